use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{InterNegatives, PointMode, TrainConfig};
use crate::encoder::{Encoder, EncoderPair, Forward, OutputGrads, PointGrads, Weights};
use crate::error::{Error, Result};
use crate::geometry::NO_REGION;
use crate::losses::{
    affinity_distillation_grad, build_distillation_pair, info_nce_image_grad, point_region_contrast_in, DistillInputs,
    LossReport,
};
use crate::nn::Scalar;
use crate::seed;

use super::optim::{cosine_lr, warmup_weight, Sgd};
use super::queue::MemoryQueue;
use super::sample::{distinct, region_pixels, Sample};

const INIT_STREAM: u64 = 0x1A17_0000;
const QUEUE_STREAM: u64 = 0x1A17_0001;

/// How often each loss term and auxiliary encoder pass ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounters {
    pub image_terms: usize,
    pub contrast_terms: usize,
    pub affinity_terms: usize,
    pub momentum_view1_passes: usize,
    pub base_view2_passes: usize,
}

/// Loss terms of one batch: per-image reports and their means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub images: Vec<LossReport>,
    pub l_image: f64,
    pub l_contrast: f64,
    pub l_affinity: f64,
    pub l_point: f64,
    pub l_total: f64,
    pub n_positive_pairs: usize,
    pub skipped: usize,
}

impl BatchReport {
    fn from_images(images: Vec<LossReport>) -> Self {
        let b = images.len().max(1) as f64;
        let mean = |f: fn(&LossReport) -> f64| images.iter().map(f).sum::<f64>() / b;
        BatchReport {
            l_image: mean(|r| r.l_image),
            l_contrast: mean(|r| r.l_contrast),
            l_affinity: mean(|r| r.l_affinity),
            l_point: mean(|r| r.l_point),
            l_total: mean(|r| r.l_total),
            n_positive_pairs: images.iter().map(|r| r.n_positive_pairs).sum(),
            skipped: images.iter().filter(|r| r.skipped).count(),
            images,
        }
    }
}

/// The batch objective, its gradient with respect to the base weights, and
/// the momentum image embeddings of view 2.
#[derive(Clone, Debug)]
pub struct Objective<T> {
    pub report: BatchReport,
    pub grad: Weights<T>,
    pub momentum_embeddings: Array2<f64>,
    pub counters: EvalCounters,
}

/// Query side of one image's region contrast.
struct ImagePoints {
    query: Array2<f64>,
    indicators: Vec<i32>,
    keys: Array2<f64>,
    key_indicators: Vec<i32>,
    /// Pooled mode: pixel lists behind each query row and the pre-normalisation
    /// norms of the pooled vectors.
    pooled: Option<(PixelLists, Vec<f64>)>,
}

type PixelLists = Vec<Vec<(usize, usize)>>;

/// Mean of unit features over each pixel list, normalised.
fn pool_regions<T: Scalar>(
    fwd: &Forward<T>,
    image: usize,
    pixels: &[Vec<(usize, usize)>],
) -> Result<(Array2<f64>, Vec<f64>)> {
    let dim = fwd.pooled().ncols();
    let mut out = Array2::zeros((pixels.len(), dim));
    let mut norms = Vec::with_capacity(pixels.len());
    for (r, pix) in pixels.iter().enumerate() {
        let feats = fwd.point_features(image, pix)?;
        let mean = feats.mean_axis(Axis(0)).ok_or_else(|| Error::invalid("empty region"))?;
        let n = mean.dot(&mean).sqrt().max(1e-12);
        out.row_mut(r).assign(&(mean / n));
        norms.push(n);
    }
    Ok((out, norms))
}

fn image_points<T: Scalar>(
    cfg: &TrainConfig,
    sample: &Sample,
    image: usize,
    base: &Forward<T>,
    momentum: &Forward<T>,
) -> Result<Option<ImagePoints>> {
    let Some(regions) = &sample.regions else {
        return Ok(None);
    };
    Ok(Some(match cfg.point_mode {
        PointMode::Point => ImagePoints {
            query: base.point_features(image, &regions.points1.coords)?,
            indicators: regions.points1.indicators.clone(),
            keys: momentum.point_features(image, &regions.points2.coords)?,
            key_indicators: regions.points2.indicators.clone(),
            pooled: None,
        },
        PointMode::Pooled => {
            let ids = distinct(&regions.ids);
            let pix1 = region_pixels(&sample.labels1, &ids);
            let pix2 = region_pixels(&sample.labels2, &ids);
            let (query, norms) = pool_regions(base, image, &pix1)?;
            let (keys, _) = pool_regions(momentum, image, &pix2)?;
            ImagePoints {
                query,
                indicators: ids.clone(),
                keys,
                key_indicators: ids,
                pooled: Some((pix1, norms)),
            }
        }
    }))
}

/// Gradient on unit point features, routed back through region pooling when
/// the queries were pooled.
fn point_grads(points: &ImagePoints, coords: &[(usize, usize)], grad: &Array2<f64>, scale: f64) -> PointGrads {
    match &points.pooled {
        None => PointGrads {
            coords: coords.to_vec(),
            grads: grad * scale,
        },
        Some((pixels, norms)) => {
            let mut out = PointGrads::default();
            for (r, pix) in pixels.iter().enumerate() {
                let q = points.query.row(r);
                let dq = grad.row(r);
                let dv = (&dq - &(&q * q.dot(&dq))) * (scale / (norms[r] * pix.len() as f64));
                for &p in pix {
                    out.push(p, dv.view());
                }
            }
            out
        }
    }
}

/// Evaluates the full objective on prepared samples without updating anything.
///
/// `distill_weight` is the warm-up gate; distillation is not evaluated at all
/// when it is zero, when `alpha = 1`, or in pooled mode.
pub fn objective<T: Scalar>(
    encoder: &Encoder,
    cfg: &TrainConfig,
    pair: &EncoderPair<T>,
    samples: &[Sample],
    queue: ArrayView2<f64>,
    distill_weight: f64,
) -> Result<Objective<T>> {
    if samples.is_empty() {
        return Err(Error::invalid("training batch is empty"));
    }
    let b = samples.len();
    let v1: Vec<_> = samples.iter().map(|s| &s.view1).collect();
    let v2: Vec<_> = samples.iter().map(|s| &s.view2).collect();
    let in1 = encoder.batch::<T>(&v1)?;
    let in2 = encoder.batch::<T>(&v2)?;
    let base1 = encoder.forward(&pair.base, &in1)?;
    let mom2 = encoder.forward(&pair.momentum, &in2)?;

    let mut counters = EvalCounters::default();
    let distill = distill_weight > 0.0 && cfg.alpha < 1.0 && cfg.point_mode == PointMode::Point;
    let any_points = samples.iter().any(|s| !s.skipped());
    let mom1 = if distill && any_points && cfg.strategy.needs_momentum_view1() {
        counters.momentum_view1_passes += 1;
        Some(encoder.forward(&pair.momentum, &in1)?)
    } else {
        None
    };
    let base2 = if distill && any_points && cfg.strategy.needs_base_view2() {
        counters.base_view2_passes += 1;
        Some(encoder.forward(&pair.base, &in2)?)
    } else {
        None
    };

    let points: Vec<Option<ImagePoints>> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| image_points(cfg, s, i, &base1, &mom2))
        .collect::<Result<_>>()?;

    // Keys of every image stacked; other images' keys are the inter-image
    // negatives.
    let mut offsets = vec![0usize; b + 1];
    for (i, p) in points.iter().enumerate() {
        offsets[i + 1] = offsets[i] + p.as_ref().map_or(0, |p| p.keys.nrows());
    }
    let all_keys = {
        let views: Vec<ArrayView2<f64>> = points.iter().flatten().map(|p| p.keys.view()).collect();
        if views.is_empty() {
            Array2::zeros((0, cfg.dim))
        } else {
            concatenate(Axis(0), &views).expect("equal widths")
        }
    }
    .mapv(T::of);

    let inv_b = 1.0 / b as f64;
    let (alpha, beta) = (cfg.alpha, cfg.beta);
    let mut grads = OutputGrads::zeros(b, cfg.dim);
    let mut reports = Vec::with_capacity(b);
    for (i, sample) in samples.iter().enumerate() {
        let z = base1.pooled().row(i);
        let z_pos = mom2.pooled().row(i);
        let (l_image, g_image) = info_nce_image_grad(z, z_pos, queue, cfg.tau)?;
        counters.image_terms += 1;

        let contrast = match &points[i] {
            None => None,
            Some(p) => {
                let query = p.query.mapv(T::of);
                let (keys, key_ids) = match cfg.inter_negatives {
                    InterNegatives::Batch => {
                        let mut ids = vec![NO_REGION; all_keys.nrows()];
                        ids[offsets[i]..offsets[i + 1]].copy_from_slice(&p.key_indicators);
                        (all_keys.view(), ids)
                    }
                    InterNegatives::None => (
                        all_keys.slice(s![offsets[i]..offsets[i + 1], ..]),
                        p.key_indicators.clone(),
                    ),
                };
                counters.contrast_terms += 1;
                point_region_contrast_in(
                    query.view(),
                    &p.indicators,
                    keys,
                    &key_ids,
                    ArrayView2::<T>::from_shape((0, cfg.dim), &[]).expect("empty view"),
                    cfg.tau,
                )?
                .map(|c| (p, c))
            }
        };
        let Some((p, contrast)) = contrast else {
            grads.pooled.row_mut(i).scaled_add(inv_b, &g_image);
            reports.push(LossReport::skipped(l_image));
            continue;
        };
        let regions = sample.regions.as_ref().expect("points imply regions");
        let mut point_grad = contrast.grad * alpha;
        let mut l_affinity = 0.0;
        if distill {
            let m1 = mom1
                .as_ref()
                .map(|f| f.point_features(i, &regions.points1.coords))
                .transpose()?;
            let b2 = base2
                .as_ref()
                .map(|f| f.point_features(i, &regions.points2.coords))
                .transpose()?;
            let inputs = DistillInputs {
                base_view1: p.query.view(),
                momentum_view2: p.keys.view(),
                base_view2: b2.as_ref().map(|a| a.view()),
                momentum_view1: m1.as_ref().map(|a| a.view()),
            };
            let dp = build_distillation_pair(cfg.strategy, &inputs, cfg.tau_t, cfg.tau_s)?;
            let (la, ga) = affinity_distillation_grad(&dp.teacher, &dp.student, dp.student_keys.view())?;
            counters.affinity_terms += 1;
            l_affinity = distill_weight * la;
            point_grad.scaled_add((1.0 - alpha) * distill_weight, &ga);
        }
        let report = LossReport::combined(
            l_image,
            contrast.loss,
            l_affinity,
            contrast.n_positive_pairs,
            alpha,
            beta,
        );
        grads.pooled.row_mut(i).scaled_add((1.0 - beta) * inv_b, &g_image);
        grads.points[i] = point_grads(p, &regions.points1.coords, &point_grad, beta * inv_b);
        reports.push(report);
    }

    let grad = encoder.backward(&pair.base, &base1, &grads)?;
    Ok(Objective {
        report: BatchReport::from_images(reports),
        grad,
        momentum_embeddings: mom2.pooled().clone(),
        counters,
    })
}

/// Everything a training run mutates.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub pair: EncoderPair<T>,
    pub optimizer: Sgd<T>,
    pub queue: MemoryQueue,
    /// Number of completed steps.
    pub step: usize,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state with weights drawn from the run seed; identical for any
    /// two configs that share the seed and the architecture.
    pub fn init(cfg: &TrainConfig, encoder: &Encoder) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, INIT_STREAM));
        let base: Weights<T> = encoder.init_weights(&mut rng);
        let optimizer = Sgd::new(&base, cfg.sgd_momentum, cfg.weight_decay);
        let mut queue_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, QUEUE_STREAM));
        Ok(TrainState {
            pair: EncoderPair::new(base, cfg.ema)?,
            optimizer,
            queue: MemoryQueue::random(cfg.queue_capacity, cfg.dim, &mut queue_rng),
            step: 0,
        })
    }
}

/// Outcome of one optimisation step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepOutput {
    pub step: usize,
    pub lr: f64,
    pub distill_weight: f64,
    pub report: BatchReport,
    pub counters: EvalCounters,
}

/// One optimisation step: objective, SGD update of the base weights, EMA
/// update of the momentum weights, then enqueue the view-2 momentum
/// embeddings.
pub fn train_step<T: Scalar>(
    encoder: &Encoder,
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    samples: &[Sample],
) -> Result<StepOutput> {
    let step = state.step;
    let distill_weight = warmup_weight(step, cfg.steps, cfg.warmup_fraction);
    let lr = cosine_lr(cfg.scaled_lr(), step, cfg.steps);
    let obj = objective(
        encoder,
        cfg,
        &state.pair,
        samples,
        state.queue.negatives(),
        distill_weight,
    )?;
    state.optimizer.step(&mut state.pair.base, &obj.grad, lr);
    state.pair.ema_update();
    state.queue.extend(obj.momentum_embeddings.view())?;
    state.step += 1;
    Ok(StepOutput {
        step,
        lr,
        distill_weight,
        report: obj.report,
        counters: obj.counters,
    })
}
