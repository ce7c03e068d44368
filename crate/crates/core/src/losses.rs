//! Contrastive and distillation objectives on unit feature vectors.
//!
//! Everything here works in `f64` (the point contrast can also run its inner
//! products in `f32`), takes plain feature matrices (one row per point) and
//! returns the gradient with respect to the trainable side only: positives,
//! negatives, keys and teachers are treated as constants.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointBatch;
use crate::nn::Scalar;

const NORM_TOLERANCE: f64 = 1e-3;

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

fn check_unit(v: ArrayView1<f64>, what: &str) -> Result<()> {
    let n = v.dot(&v).sqrt();
    if (n - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::invalid(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

/// `log Σ exp(x)` with the maximum factored out.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// Image-level InfoNCE: the positive key competes against itself plus the
/// negatives.
pub fn info_nce_image(z: ArrayView1<f64>, z_pos: ArrayView1<f64>, negatives: ArrayView2<f64>, tau: f64) -> Result<f64> {
    info_nce_image_grad(z, z_pos, negatives, tau).map(|(loss, _)| loss)
}

/// [`info_nce_image`] and its gradient with respect to `z`.
pub fn info_nce_image_grad(
    z: ArrayView1<f64>,
    z_pos: ArrayView1<f64>,
    negatives: ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, Array1<f64>)> {
    check_tau(tau)?;
    if z.len() != z_pos.len() || (negatives.nrows() > 0 && negatives.ncols() != z.len()) {
        return Err(Error::invalid("embedding dimensions differ"));
    }
    check_unit(z, "query embedding")?;
    check_unit(z_pos, "positive embedding")?;
    for (j, n) in negatives.rows().into_iter().enumerate() {
        check_unit(n, &format!("negative {j}"))?;
    }

    let mut logits = Vec::with_capacity(negatives.nrows() + 1);
    logits.push(z.dot(&z_pos) / tau);
    logits.extend(negatives.rows().into_iter().map(|n| z.dot(&n) / tau));
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[0];

    // d/dz = (Σ_j softmax_j key_j − z_pos) / τ
    let mut grad = z_pos.mapv(|v| v * ((logits[0] - lse).exp() - 1.0));
    for (n, &l) in negatives.rows().into_iter().zip(&logits[1..]) {
        grad.scaled_add((l - lse).exp(), &n);
    }
    grad /= tau;
    Ok((loss, grad))
}

/// Point features with their region indicators.
#[derive(Clone, Copy, Debug)]
pub struct PointsRef<'a> {
    pub features: ArrayView2<'a, f64>,
    pub indicators: &'a [i32],
}

impl<'a> PointsRef<'a> {
    pub fn new(features: ArrayView2<'a, f64>, indicators: &'a [i32]) -> Result<Self> {
        if features.nrows() != indicators.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} indicators",
                features.nrows(),
                indicators.len()
            )));
        }
        Ok(PointsRef { features, indicators })
    }

    pub fn len(&self) -> usize {
        self.indicators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indicators.is_empty()
    }
}

impl<'a> From<&'a PointBatch> for PointsRef<'a> {
    fn from(b: &'a PointBatch) -> Self {
        PointsRef {
            features: b.features.view(),
            indicators: &b.indicators,
        }
    }
}

/// Result of the point-level region contrast.
#[derive(Clone, Debug)]
pub struct ContrastOutput {
    pub loss: f64,
    /// Number of positive pairs `C` used for normalisation.
    pub n_positive_pairs: usize,
    /// Gradient with respect to the query features.
    pub grad: Array2<f64>,
}

/// Point-level region contrast.
///
/// Every query point `i` (base encoder, view 1) and key `k` (momentum encoder,
/// view 2) with the same region indicator form a positive pair. The softmax
/// for a query runs over all keys of the image plus `inter_negatives`. The
/// summed negative log-likelihood is divided by the number of positive pairs.
/// Returns `None` when no pair shares a region.
pub fn point_region_contrast(
    query: PointsRef,
    keys: PointsRef,
    inter_negatives: ArrayView2<f64>,
    tau: f64,
) -> Result<Option<ContrastOutput>> {
    point_region_contrast_in(
        query.features,
        query.indicators,
        keys.features,
        keys.indicators,
        inter_negatives,
        tau,
    )
}

/// [`point_region_contrast`] with the similarity products and exponentials
/// evaluated in `T`; sums, the loss and the returned gradient are `f64`.
///
/// Keys whose indicator matches no query (for example a negative id) act as
/// plain negatives, so callers may pass stacked keys of several images.
pub fn point_region_contrast_in<T: Scalar>(
    query: ArrayView2<T>,
    query_indicators: &[i32],
    keys: ArrayView2<T>,
    key_indicators: &[i32],
    inter_negatives: ArrayView2<T>,
    tau: f64,
) -> Result<Option<ContrastOutput>> {
    check_tau(tau)?;
    let dim = query.ncols();
    if keys.ncols() != dim || (inter_negatives.nrows() > 0 && inter_negatives.ncols() != dim) {
        return Err(Error::invalid("point feature dimensions differ"));
    }
    if query.nrows() != query_indicators.len() || keys.nrows() != key_indicators.len() {
        return Err(Error::invalid("point features and indicators differ in length"));
    }
    let nq = query.nrows();
    let nk = keys.nrows();
    let inv_tau = T::of(1.0 / tau);
    // Logits against the keys of this image, then against inter-image negatives.
    let logits_k = query.dot(&keys.t()) * inv_tau;
    let logits_n = if inter_negatives.nrows() > 0 {
        query.dot(&inter_negatives.t()) * inv_tau
    } else {
        Array2::zeros((nq, 0))
    };
    // d(summed loss)/d(logit), filled row by row.
    let mut d_k = Array2::<T>::zeros((nq, nk));
    let mut d_n = Array2::<T>::zeros((nq, logits_n.ncols()));
    let mut positives: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (k, &id) in key_indicators.iter().enumerate() {
        positives.entry(id).or_default().push(k);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, id) in query_indicators.iter().enumerate() {
        let Some(pos) = positives.get(id) else {
            continue;
        };
        let n_pos = pos.len();
        let (lk, ln) = (logits_k.row(i), logits_n.row(i));
        let m = lk.iter().chain(ln.iter()).copied().fold(T::neg_infinity(), T::max);
        let mut rk = d_k.row_mut(i);
        rk.zip_mut_with(&lk, |d, &l| *d = (l - m).exp());
        let mut rn = d_n.row_mut(i);
        rn.zip_mut_with(&ln, |d, &l| *d = (l - m).exp());
        let sum: f64 = rk.iter().chain(rn.iter()).map(|v| v.get()).sum();
        let lse = m.get() + sum.ln();
        let w = T::of(n_pos as f64 / sum);
        rk *= w;
        rn *= w;
        for &k in pos {
            total += lse - lk[k].get();
            rk[k] -= T::one();
        }
        pairs += n_pos;
    }
    if pairs == 0 {
        return Ok(None);
    }
    let c = pairs as f64;
    let mut grad = d_k.dot(&keys);
    if inter_negatives.nrows() > 0 {
        grad += &d_n.dot(&inter_negatives);
    }
    let scale = 1.0 / (tau * c);
    Ok(Some(ContrastOutput {
        loss: total / c,
        n_positive_pairs: pairs,
        grad: grad.mapv(|g| g.get() * scale),
    }))
}

/// Row-stochastic softmax affinities from query points to key points.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    values: Array2<f64>,
    log_values: Array2<f64>,
    temperature: f64,
}

impl AffinityMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn log_values(&self) -> &Array2<f64> {
        &self.log_values
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.values.sum_axis(Axis(1))
    }

    /// Mean over rows of the Shannon entropy of each row.
    pub fn mean_row_entropy(&self) -> f64 {
        let rows = self.values.nrows().max(1) as f64;
        -(&self.values * &self.log_values).sum() / rows
    }
}

/// `A[i][k] = exp(q_i·k_k/τ) / Σ_j exp(q_i·k_j/τ)`.
pub fn point_affinity(queries: ArrayView2<f64>, keys: ArrayView2<f64>, tau: f64) -> Result<AffinityMatrix> {
    check_tau(tau)?;
    if keys.nrows() == 0 {
        return Err(Error::invalid("affinity needs at least one key"));
    }
    if queries.ncols() != keys.ncols() {
        return Err(Error::invalid("query and key dimensions differ"));
    }
    let mut log_values = queries.dot(&keys.t()) / tau;
    for mut row in log_values.rows_mut() {
        let lse = log_sum_exp(row.as_slice().expect("row-major"));
        row -= lse;
    }
    Ok(AffinityMatrix {
        values: log_values.mapv(f64::exp),
        log_values,
        temperature: tau,
    })
}

/// Cross-entropy `−Σ_k T[i][k]·log S[i][k]`, averaged over rows.
pub fn affinity_distillation(teacher: &AffinityMatrix, student: &AffinityMatrix) -> Result<f64> {
    if teacher.dim() != student.dim() {
        return Err(Error::invalid(format!(
            "teacher is {:?} but student is {:?}",
            teacher.dim(),
            student.dim()
        )));
    }
    let rows = teacher.dim().0.max(1) as f64;
    Ok(-(&teacher.values * &student.log_values).sum() / rows)
}

/// [`affinity_distillation`] and its gradient with respect to the student's
/// query features, given the keys the student was computed against.
pub fn affinity_distillation_grad(
    teacher: &AffinityMatrix,
    student: &AffinityMatrix,
    student_keys: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    let loss = affinity_distillation(teacher, student)?;
    if student_keys.nrows() != student.dim().1 {
        return Err(Error::invalid("student keys do not match the affinity columns"));
    }
    let rows = teacher.dim().0.max(1) as f64;
    // d/dlogit_ik = S_ik·Σ_k T_ik − T_ik
    let mass = teacher.values.sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_logits = &student.values * &mass - &teacher.values;
    let grad = d_logits.dot(&student_keys) / (student.temperature * rows);
    Ok((loss, grad))
}

/// Which affinities act as teacher and student.
///
/// Features are named by encoder and view: `p` for the base encoder on view 1
/// (the only trainable side), `p'` for the momentum encoder, and `k`/`k'` for
/// view-2 points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum DistillStrategy {
    /// Teacher `A(p', k')`, student `A(p, k')`.
    #[default]
    MomentumToCross,
    /// Teacher `A(p, k')`, student `A(p, k)`.
    CrossToBase,
    /// Teacher `A(p', k')`, student `A(p, k)`.
    MomentumToBase,
}

impl DistillStrategy {
    pub fn index(self) -> u8 {
        match self {
            DistillStrategy::MomentumToCross => 1,
            DistillStrategy::CrossToBase => 2,
            DistillStrategy::MomentumToBase => 3,
        }
    }

    pub fn needs_momentum_view1(self) -> bool {
        matches!(self, DistillStrategy::MomentumToCross | DistillStrategy::MomentumToBase)
    }

    pub fn needs_base_view2(self) -> bool {
        matches!(self, DistillStrategy::CrossToBase | DistillStrategy::MomentumToBase)
    }
}

impl TryFrom<u8> for DistillStrategy {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(DistillStrategy::MomentumToCross),
            2 => Ok(DistillStrategy::CrossToBase),
            3 => Ok(DistillStrategy::MomentumToBase),
            _ => Err(Error::invalid(format!(
                "distillation strategy must be 1, 2 or 3, got {v}"
            ))),
        }
    }
}

impl From<DistillStrategy> for u8 {
    fn from(s: DistillStrategy) -> u8 {
        s.index()
    }
}

/// Point features of one image from every available pass. Row `i` of each
/// view-1 matrix is the same point; likewise for view 2.
#[derive(Clone, Copy, Debug)]
pub struct DistillInputs<'a> {
    pub base_view1: ArrayView2<'a, f64>,
    pub momentum_view2: ArrayView2<'a, f64>,
    pub base_view2: Option<ArrayView2<'a, f64>>,
    pub momentum_view1: Option<ArrayView2<'a, f64>>,
}

#[derive(Clone, Debug)]
pub struct DistillPair {
    pub teacher: AffinityMatrix,
    pub student: AffinityMatrix,
    /// Keys the student rows were computed against.
    pub student_keys: Array2<f64>,
}

pub fn build_distillation_pair(
    strategy: DistillStrategy,
    inputs: &DistillInputs,
    tau_t: f64,
    tau_s: f64,
) -> Result<DistillPair> {
    let momentum_view1 = || {
        inputs.momentum_view1.ok_or_else(|| {
            Error::invalid(format!(
                "strategy {} needs momentum features of view 1",
                strategy.index()
            ))
        })
    };
    let base_view2 = || {
        inputs
            .base_view2
            .ok_or_else(|| Error::invalid(format!("strategy {} needs base features of view 2", strategy.index())))
    };
    let (teacher, student_keys) = match strategy {
        DistillStrategy::MomentumToCross => (
            point_affinity(momentum_view1()?, inputs.momentum_view2, tau_t)?,
            inputs.momentum_view2,
        ),
        DistillStrategy::CrossToBase => (
            point_affinity(inputs.base_view1, inputs.momentum_view2, tau_t)?,
            base_view2()?,
        ),
        DistillStrategy::MomentumToBase => {
            let keys = base_view2()?;
            (point_affinity(momentum_view1()?, inputs.momentum_view2, tau_t)?, keys)
        }
    };
    let student = point_affinity(inputs.base_view1, student_keys, tau_s)?;
    Ok(DistillPair {
        teacher,
        student,
        student_keys: student_keys.to_owned(),
    })
}

/// `α·L_c + (1 − α)·L_a`.
pub fn combine_point(l_contrast: f64, l_affinity: f64, alpha: f64) -> f64 {
    alpha * l_contrast + (1.0 - alpha) * l_affinity
}

/// `β·L_p + (1 − β)·L_m`.
pub fn combine_total(l_point: f64, l_image: f64, beta: f64) -> f64 {
    beta * l_point + (1.0 - beta) * l_image
}

/// Per-image (or batch-averaged) loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_image: f64,
    pub l_contrast: f64,
    pub l_affinity: f64,
    pub l_point: f64,
    pub l_total: f64,
    pub n_positive_pairs: usize,
    pub skipped: bool,
}

impl LossReport {
    /// Image without shared regions: only the image-level term counts.
    pub fn skipped(l_image: f64) -> Self {
        LossReport {
            l_image,
            l_total: l_image,
            skipped: true,
            ..LossReport::default()
        }
    }

    pub fn combined(
        l_image: f64,
        l_contrast: f64,
        l_affinity: f64,
        n_positive_pairs: usize,
        alpha: f64,
        beta: f64,
    ) -> Self {
        let l_point = combine_point(l_contrast, l_affinity, alpha);
        LossReport {
            l_image,
            l_contrast,
            l_affinity,
            l_point,
            l_total: combine_total(l_point, l_image, beta),
            n_positive_pairs,
            skipped: false,
        }
    }
}
