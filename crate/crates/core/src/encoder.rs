//! Convolutional encoder with a dense point head and a pooled image head.
//!
//! The backbone is a stack of stride-2 3×3 convolutions. A two-layer 1×1
//! projector turns the last feature grid into `dim`-channel embeddings `y`.
//! Point features are `y` bilinearly up-sampled to `resolution`² locations and
//! ℓ2-normalised per location. The image embedding is the spatial mean of `y`
//! passed through a second two-layer projector and normalised.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{bilinear_taps, col2im, im2col, relu_backward_inplace, relu_inplace, ConvGeom, Dense, Scalar};

const STAGE_CONV: ConvGeom = ConvGeom {
    kernel: 3,
    stride: 2,
    pad: 1,
};

/// Outputs with a smaller norm (in practice exact zeros from dead ReLUs) have
/// no direction: they normalise to zero and pass no gradient back.
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Side length of the square input view.
    pub input_size: usize,
    pub in_channels: usize,
    /// Output channels of each stride-2 stage.
    pub widths: Vec<usize>,
    /// Hidden width of both projectors.
    pub hidden: usize,
    /// Embedding dimension.
    pub dim: usize,
    /// Side length `R` of the up-sampled point map.
    pub resolution: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 64,
            in_channels: 3,
            widths: vec![32, 64, 128, 128],
            hidden: 128,
            dim: 64,
            resolution: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid("encoder widths must be non-empty and positive"));
        }
        if self.in_channels == 0 || self.hidden == 0 || self.dim == 0 || self.resolution == 0 {
            return Err(Error::invalid("encoder sizes must be positive"));
        }
        if self.grid_size() == 0 {
            return Err(Error::invalid(format!(
                "input size {} too small for {} stride-2 stages",
                self.input_size,
                self.widths.len()
            )));
        }
        Ok(())
    }

    /// Side length of the backbone's output grid.
    pub fn grid_size(&self) -> usize {
        self.widths.iter().fold(
            self.input_size,
            |len, _| if len == 0 { 0 } else { STAGE_CONV.out_len(len) },
        )
    }

    pub fn param_count(&self) -> usize {
        let mut cin = self.in_channels;
        let mut total = 0;
        for &w in &self.widths {
            total += 9 * cin * w + w;
            cin = w;
        }
        let (h, d) = (self.hidden, self.dim);
        total += cin * h + h + h * d + d;
        total + d * h + h + h * d + d
    }
}

/// All parameters of one encoder, in a fixed order: the backbone stages, the
/// dense projector (two layers), then the pooled projector (two layers).
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> Weights<T> {
    /// `(fan_in, fan_out, init gain)` of every layer.
    fn layout(cfg: &EncoderConfig) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(cfg.widths.len() + 4);
        let mut cin = cfg.in_channels;
        for &w in &cfg.widths {
            out.push((9 * cin, w, 2.0));
            cin = w;
        }
        out.push((cin, cfg.hidden, 2.0));
        out.push((cfg.hidden, cfg.dim, 1.0));
        out.push((cfg.dim, cfg.hidden, 2.0));
        out.push((cfg.hidden, cfg.dim, 1.0));
        out
    }

    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        Weights {
            layers: Self::layout(cfg)
                .into_iter()
                .map(|(i, o, gain)| Dense::init(i, o, gain, rng))
                .collect(),
        }
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Weights {
            layers: Self::layout(cfg)
                .into_iter()
                .map(|(i, o, _)| Dense::zeros(i, o))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Weights {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    /// Stable tensor names, parallel to [`Weights::tensors`].
    pub fn names(&self) -> Vec<String> {
        let stages = self.layers.len() - 4;
        let mut names = Vec::with_capacity(self.layers.len() * 2);
        for i in 0..self.layers.len() {
            let layer = if i < stages {
                format!("stage{i}")
            } else {
                ["proj1", "proj2", "pool1", "pool2"][i - stages].to_string()
            };
            names.push(format!("{layer}.weight"));
            names.push(format!("{layer}.bias"));
        }
        names
    }

    /// Flat parameter buffers, weights and biases interleaved per layer.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.shape().to_vec(), l.bias.shape().to_vec()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shapes() == other.shapes()
    }

    /// Reads parameter `index` in flattened order.
    pub fn get_flat(&self, index: usize) -> T {
        let mut i = index;
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn set_flat(&mut self, index: usize, value: T) {
        let mut i = index;
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.mapv(|v| U::of(v.get())),
                    bias: l.bias.mapv(|v| U::of(v.get())),
                })
                .collect(),
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| *v == T::zero()))
    }
}

/// Base encoder `f^E`, momentum encoder `f^M` and the EMA coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair<T> {
    pub base: Weights<T>,
    pub momentum: Weights<T>,
    pub ema: f64,
}

impl<T: Scalar> EncoderPair<T> {
    /// Momentum weights start as an exact copy of the base weights.
    pub fn new(base: Weights<T>, ema: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema) {
            return Err(Error::invalid(format!("ema coefficient {ema} outside [0, 1]")));
        }
        Ok(EncoderPair {
            momentum: base.clone(),
            base,
            ema,
        })
    }

    /// `momentum ← m·momentum + (1 − m)·base`, elementwise.
    pub fn ema_update(&mut self) {
        let m = T::of(self.ema);
        let one_minus = T::of(1.0 - self.ema);
        for (mom, base) in self.momentum.tensors_mut().into_iter().zip(self.base.tensors()) {
            for (a, &b) in mom.iter_mut().zip(base) {
                *a = m * *a + one_minus * b;
            }
        }
    }
}

/// Encoder outputs for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOutput {
    /// `R`×`R`×`dim` unit vectors.
    pub point_map: Array3<f64>,
    /// Unit image embedding.
    pub pooled: Array1<f64>,
}

impl DenseOutput {
    pub fn resolution(&self) -> usize {
        self.point_map.dim().0
    }

    pub fn dim(&self) -> usize {
        self.point_map.dim().2
    }

    /// Features at `coords`, one row each, in order.
    pub fn gather_point_features(&self, coords: &[(usize, usize)]) -> Result<Array2<f64>> {
        gather_point_features(self, coords)
    }
}

/// Reads point-map vectors at `coords`, preserving order.
pub fn gather_point_features(dense: &DenseOutput, coords: &[(usize, usize)]) -> Result<Array2<f64>> {
    let (rows, cols, dim) = dense.point_map.dim();
    let mut out = Array2::zeros((coords.len(), dim));
    for (i, &(r, c)) in coords.iter().enumerate() {
        if r >= rows || c >= cols {
            return Err(Error::invalid(format!(
                "coordinate ({r}, {c}) outside a {rows}x{cols} point map"
            )));
        }
        out.row_mut(i).assign(&dense.point_map.slice(s![r, c, ..]));
    }
    Ok(out)
}

/// Architecture plus the forward/backward passes.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    row_taps: Vec<(usize, usize, f64, f64)>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let row_taps = bilinear_taps(cfg.grid_size(), cfg.resolution);
        Ok(Encoder { cfg, row_taps })
    }

    pub fn init_weights<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Weights<T> {
        Weights::init(&self.cfg, rng)
    }

    fn stage_count(&self) -> usize {
        self.cfg.widths.len()
    }

    /// Stacks H×W×C views into an NHWC batch after checking their size.
    pub fn batch<T: Scalar>(&self, views: &[&Array3<f32>]) -> Result<Array4<T>> {
        let s = self.cfg.input_size;
        let c = self.cfg.in_channels;
        let mut out = Array4::<T>::zeros((views.len(), s, s, c));
        for (i, v) in views.iter().enumerate() {
            if v.dim() != (s, s, c) {
                return Err(Error::invalid(format!(
                    "view is {:?}, encoder expects ({s}, {s}, {c})",
                    v.dim()
                )));
            }
            out.slice_mut(s![i, .., .., ..]).assign(&v.mapv(|x| T::of(x as f64)));
        }
        Ok(out)
    }

    pub fn forward<T: Scalar>(&self, w: &Weights<T>, input: &Array4<T>) -> Result<Forward<T>> {
        let (b, h, wd, c) = input.dim();
        let s = self.cfg.input_size;
        if (h, wd, c) != (s, s, self.cfg.in_channels) || b == 0 {
            return Err(Error::invalid(format!(
                "input batch is {:?}, encoder expects (_, {s}, {s}, {})",
                input.dim(),
                self.cfg.in_channels
            )));
        }
        if w.layers.len() != self.stage_count() + 4 {
            return Err(Error::invalid("weights do not match the encoder layout"));
        }
        let mut stages = Vec::with_capacity(self.stage_count());
        let mut x = input.clone();
        for layer in &w.layers[..self.stage_count()] {
            let (cols, ho, wo) = im2col(&x, STAGE_CONV);
            let mut out = layer.forward(&cols);
            relu_inplace(&mut out);
            let in_dim = x.dim();
            x = out
                .clone()
                .into_shape_with_order((b, ho, wo, layer.fan_out()))
                .expect("row-major conv output");
            stages.push(StageCache { cols, out, in_dim });
        }
        let g = self.cfg.grid_size();
        let feat = &stages.last().expect("at least one stage").out;
        let proj1 = &w.layers[self.stage_count()];
        let proj2 = &w.layers[self.stage_count() + 1];
        let pool1 = &w.layers[self.stage_count() + 2];
        let pool2 = &w.layers[self.stage_count() + 3];

        let mut proj_hidden = proj1.forward(feat);
        relu_inplace(&mut proj_hidden);
        let proj_out = proj2.forward(&proj_hidden);

        let cells = g * g;
        let pooled_mean = proj_out
            .view()
            .into_shape_with_order((b, cells, self.cfg.dim))
            .expect("row-major projector output")
            .mean_axis(Axis(1))
            .expect("non-empty grid");
        let mut pooled_hidden = pool1.forward(&pooled_mean);
        relu_inplace(&mut pooled_hidden);
        let pooled_out = pool2.forward(&pooled_hidden);
        let mut pooled = Array2::<f64>::zeros((b, self.cfg.dim));
        let mut pooled_norm = Array1::<f64>::zeros(b);
        for i in 0..b {
            let v = pooled_out.row(i).mapv(|x| x.get());
            let n = v.dot(&v).sqrt().max(NORM_EPS);
            pooled_norm[i] = n;
            pooled.row_mut(i).assign(&(v / n));
        }
        Ok(Forward {
            batch: b,
            grid: g,
            dim: self.cfg.dim,
            stages,
            proj_hidden,
            proj_out,
            pooled_mean,
            pooled_hidden,
            pooled_out,
            pooled,
            pooled_norm,
            taps: self.row_taps.clone(),
        })
    }

    /// Full dense output for a single view.
    pub fn encode<T: Scalar>(&self, w: &Weights<T>, view: &Array3<f32>) -> Result<DenseOutput> {
        let fwd = self.forward(w, &self.batch::<T>(&[view])?)?;
        Ok(DenseOutput {
            point_map: fwd.point_map(0),
            pooled: fwd.pooled.row(0).to_owned(),
        })
    }

    /// Parameter gradients for upstream gradients on the normalised outputs.
    pub fn backward<T: Scalar>(&self, w: &Weights<T>, fwd: &Forward<T>, grads: &OutputGrads) -> Result<Weights<T>> {
        let b = fwd.batch;
        let dim = fwd.dim;
        let cells = fwd.grid * fwd.grid;
        if grads.points.len() != b || grads.pooled.dim() != (b, dim) {
            return Err(Error::invalid("output gradients do not match the forward batch"));
        }
        let mut grad = w.zeros_like();
        let n_stage = self.stage_count();

        // Pooled head.
        let mut d_pooled_out = Array2::<T>::zeros((b, dim));
        for i in 0..b {
            let z = fwd.pooled.row(i);
            let dz = grads.pooled.row(i);
            let proj = z.dot(&dz);
            let n = fwd.pooled_norm[i];
            if n <= NORM_EPS {
                continue;
            }
            for k in 0..dim {
                d_pooled_out[[i, k]] = T::of((dz[k] - z[k] * proj) / n);
            }
        }
        let (g_pool2, d_hidden) = w.layers[n_stage + 3].backward(&fwd.pooled_hidden, &d_pooled_out, true);
        let mut d_hidden = d_hidden.expect("requested");
        relu_backward_inplace(&mut d_hidden, &fwd.pooled_hidden);
        let (g_pool1, d_mean) = w.layers[n_stage + 2].backward(&fwd.pooled_mean, &d_hidden, true);
        let d_mean = d_mean.expect("requested");
        grad.layers[n_stage + 3] = g_pool2;
        grad.layers[n_stage + 2] = g_pool1;

        // Projector output gradient: mean-pool share plus point taps.
        let mut d_proj = Array2::<T>::zeros((b * cells, dim));
        let inv_cells = T::of(1.0 / cells as f64);
        for i in 0..b {
            let share = d_mean.row(i).mapv(|v| v * inv_cells);
            d_proj
                .slice_mut(s![i * cells..(i + 1) * cells, ..])
                .rows_mut()
                .into_iter()
                .for_each(|mut row| row += &share);
        }
        for (i, pg) in grads.points.iter().enumerate() {
            if pg.coords.len() != pg.grads.nrows() {
                return Err(Error::invalid("point gradient rows do not match coordinates"));
            }
            for (j, &(r, c)) in pg.coords.iter().enumerate() {
                let u = fwd.interp(i, r, c)?;
                let n = u.dot(&u).sqrt();
                if n <= NORM_EPS {
                    continue;
                }
                let p = &u / n;
                let dp = pg.grads.row(j);
                let proj = p.dot(&dp);
                let du: Array1<f64> = (&dp - &(&p * proj)) / n;
                for (row, wgt) in fwd.tap_rows(i, r, c) {
                    let mut target = d_proj.row_mut(row);
                    for k in 0..dim {
                        target[k] += T::of(wgt * du[k]);
                    }
                }
            }
        }

        let (g_proj2, d_ph) = w.layers[n_stage + 1].backward(&fwd.proj_hidden, &d_proj, true);
        let mut d_ph = d_ph.expect("requested");
        relu_backward_inplace(&mut d_ph, &fwd.proj_hidden);
        let feat = &fwd.stages[n_stage - 1].out;
        let (g_proj1, d_feat) = w.layers[n_stage].backward(feat, &d_ph, true);
        grad.layers[n_stage + 1] = g_proj2;
        grad.layers[n_stage] = g_proj1;

        let mut d_out = d_feat.expect("requested");
        for si in (0..n_stage).rev() {
            let cache = &fwd.stages[si];
            relu_backward_inplace(&mut d_out, &cache.out);
            let (g, d_cols) = w.layers[si].backward(&cache.cols, &d_out, si > 0);
            grad.layers[si] = g;
            if let Some(d_cols) = d_cols {
                let d_in = col2im(&d_cols, cache.in_dim, STAGE_CONV);
                let rows = cache.in_dim.0 * cache.in_dim.1 * cache.in_dim.2;
                d_out = d_in
                    .into_shape_with_order((rows, cache.in_dim.3))
                    .expect("row-major stage input");
            }
        }
        Ok(grad)
    }
}

struct StageCache<T> {
    cols: Array2<T>,
    out: Array2<T>,
    in_dim: (usize, usize, usize, usize),
}

/// Activations kept from a forward pass.
pub struct Forward<T> {
    batch: usize,
    grid: usize,
    dim: usize,
    stages: Vec<StageCache<T>>,
    proj_hidden: Array2<T>,
    proj_out: Array2<T>,
    pooled_mean: Array2<T>,
    pooled_hidden: Array2<T>,
    #[allow(dead_code)]
    pooled_out: Array2<T>,
    pooled: Array2<f64>,
    pooled_norm: Array1<f64>,
    taps: Vec<(usize, usize, f64, f64)>,
}

impl<T: Scalar> Forward<T> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn resolution(&self) -> usize {
        self.taps.len()
    }

    /// Unit image embeddings, one row per view.
    pub fn pooled(&self) -> &Array2<f64> {
        &self.pooled
    }

    /// Projector-output rows and bilinear weights feeding point `(r, c)`.
    fn tap_rows(&self, image: usize, r: usize, c: usize) -> [(usize, f64); 4] {
        let (r0, r1, wr0, wr1) = self.taps[r];
        let (c0, c1, wc0, wc1) = self.taps[c];
        let base = image * self.grid * self.grid;
        [
            (base + r0 * self.grid + c0, wr0 * wc0),
            (base + r0 * self.grid + c1, wr0 * wc1),
            (base + r1 * self.grid + c0, wr1 * wc0),
            (base + r1 * self.grid + c1, wr1 * wc1),
        ]
    }

    /// Up-sampled, not yet normalised feature at `(r, c)`.
    fn interp(&self, image: usize, r: usize, c: usize) -> Result<Array1<f64>> {
        let res = self.resolution();
        if image >= self.batch || r >= res || c >= res {
            return Err(Error::invalid(format!(
                "point ({r}, {c}) of image {image} outside a {res}x{res} map"
            )));
        }
        let mut u = Array1::<f64>::zeros(self.dim);
        for (row, wgt) in self.tap_rows(image, r, c) {
            if wgt == 0.0 {
                continue;
            }
            let y: ArrayView1<T> = self.proj_out.row(row);
            for k in 0..self.dim {
                u[k] += wgt * y[k].get();
            }
        }
        Ok(u)
    }

    /// Unit point features of image `image` at `coords`.
    pub fn point_features(&self, image: usize, coords: &[(usize, usize)]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((coords.len(), self.dim));
        for (i, &(r, c)) in coords.iter().enumerate() {
            let u = self.interp(image, r, c)?;
            let n = u.dot(&u).sqrt().max(NORM_EPS);
            out.row_mut(i).assign(&(u / n));
        }
        Ok(out)
    }

    /// Whole `R`×`R` unit point map of one image.
    pub fn point_map(&self, image: usize) -> Array3<f64> {
        let res = self.resolution();
        let mut out = Array3::zeros((res, res, self.dim));
        for r in 0..res {
            for c in 0..res {
                let u = self.interp(image, r, c).expect("in range");
                let n = u.dot(&u).sqrt().max(NORM_EPS);
                out.slice_mut(s![r, c, ..]).assign(&(u / n));
            }
        }
        out
    }
}

/// Upstream gradients for one backward pass.
#[derive(Clone, Debug)]
pub struct OutputGrads {
    /// Gradient on each view's unit image embedding.
    pub pooled: Array2<f64>,
    /// Gradients on unit point features, per view.
    pub points: Vec<PointGrads>,
}

impl OutputGrads {
    pub fn zeros(batch: usize, dim: usize) -> Self {
        OutputGrads {
            pooled: Array2::zeros((batch, dim)),
            points: vec![PointGrads::default(); batch],
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PointGrads {
    pub coords: Vec<(usize, usize)>,
    pub grads: Array2<f64>,
}

impl PointGrads {
    pub fn push(&mut self, coord: (usize, usize), grad: ArrayView1<f64>) {
        if self.grads.ncols() != grad.len() {
            self.grads = Array2::zeros((0, grad.len()));
        }
        self.coords.push(coord);
        self.grads.push_row(grad).expect("matching width");
    }
}
