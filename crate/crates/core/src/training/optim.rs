use crate::encoder::Weights;
use crate::nn::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub velocity: Weights<T>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &Weights<T>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            velocity: params.zeros_like(),
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut Weights<T>, grad: &Weights<T>, lr: f64) {
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        let grads = grad.tensors();
        for ((p, v), g) in params
            .tensors_mut()
            .into_iter()
            .zip(self.velocity.tensors_mut())
            .zip(grads)
        {
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
    }
}

/// Half-cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Distillation gate: 0 before `warmup_fraction · total_steps`, 1 from then on.
pub fn warmup_weight(step_index: usize, total_steps: usize, warmup_fraction: f64) -> f64 {
    if (step_index as f64) < warmup_fraction * total_steps as f64 {
        0.0
    } else {
        1.0
    }
}
