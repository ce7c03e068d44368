use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RegionSource, TrainConfig};
use crate::data::{DataItem, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{
    make_annotation_regions, make_grid_regions, render_view, sample_points, sample_valid_masks, sample_view_transform,
    transform_label_map, Annotation, RegionLabelMap, SampledPoints, ViewTransform,
};
use crate::seed;

/// Two augmented views of one image with aligned region labels and, when the
/// views share a region, the sampled points of both views.
#[derive(Clone, Debug)]
pub struct Sample {
    pub t1: ViewTransform,
    pub t2: ViewTransform,
    pub view1: Array3<f32>,
    pub view2: Array3<f32>,
    /// Region labels of each view on the `R`×`R` feature grid.
    pub labels1: RegionLabelMap,
    pub labels2: RegionLabelMap,
    /// `None` when the views share no region.
    pub regions: Option<SampleRegions>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRegions {
    /// The `N` sampled region ids, with repetition.
    pub ids: Vec<i32>,
    pub points1: SampledPoints,
    pub points2: SampledPoints,
}

impl Sample {
    pub fn skipped(&self) -> bool {
        self.regions.is_none()
    }
}

/// Region label map of the source image for the configured region source.
pub fn source_regions(item: &DataItem, source: RegionSource, n: usize) -> Result<RegionLabelMap> {
    let (h, w, _) = item.image.dim();
    match source.annotation_mode() {
        None => make_grid_regions(h, w, n),
        Some(mode) => {
            if item.masks.is_empty() {
                return Err(Error::config(
                    "region_source",
                    format!("image {} has no ground-truth masks", item.id),
                ));
            }
            let shapes: Vec<Annotation> = item.masks.iter().cloned().map(Annotation::Mask).collect();
            make_annotation_regions(&shapes, h, w, mode)
        }
    }
}

/// Brightness and contrast jitter with factors drawn from `[1 − s, 1 + s]`.
fn color_jitter<R: Rng + ?Sized>(view: &mut Array3<f32>, strength: f64, rng: &mut R) {
    let b = 1.0 + strength * (2.0 * rng.random::<f64>() - 1.0);
    let c = 1.0 + strength * (2.0 * rng.random::<f64>() - 1.0);
    if strength == 0.0 {
        return;
    }
    let (b, c) = (b as f32, c as f32);
    view.mapv_inplace(|v| v * b);
    let mean = view.mean().unwrap_or(0.0);
    view.mapv_inplace(|v| ((v - mean) * c + mean).clamp(0.0, 1.0));
}

/// Samples both view transforms, then prepares the sample.
pub fn prepare_sample<R: Rng + ?Sized>(item: &DataItem, cfg: &TrainConfig, rng: &mut R) -> Result<Sample> {
    let (h, w, _) = item.image.dim();
    let scale = (cfg.scale_min, cfg.scale_max);
    let t1 = sample_view_transform(h, w, rng, scale, cfg.input_size);
    let t2 = sample_view_transform(h, w, rng, scale, cfg.input_size);
    prepare_sample_with(item, cfg, t1, t2, rng)
}

/// Prepares a sample from given view transforms.
pub fn prepare_sample_with<R: Rng + ?Sized>(
    item: &DataItem,
    cfg: &TrainConfig,
    t1: ViewTransform,
    t2: ViewTransform,
    rng: &mut R,
) -> Result<Sample> {
    let regions = source_regions(item, cfg.region_source, cfg.n)?;
    let mut view1 = render_view(&item.image, &t1);
    let mut view2 = render_view(&item.image, &t2);
    color_jitter(&mut view1, cfg.jitter, rng);
    color_jitter(&mut view2, cfg.jitter, rng);
    let labels1 = transform_label_map(&regions, &t1, cfg.resolution);
    let labels2 = transform_label_map(&regions, &t2, cfg.resolution);
    let regions = match sample_valid_masks(&labels1, &labels2, cfg.num_masks, rng) {
        Ok(ids) => {
            let points1 = sample_points(&labels1, &ids, cfg.points_per_region, rng)?;
            let points2 = sample_points(&labels2, &ids, cfg.points_per_region, rng)?;
            Some(SampleRegions { ids, points1, points2 })
        }
        Err(_) => None,
    };
    Ok(Sample {
        t1,
        t2,
        view1,
        view2,
        labels1,
        labels2,
        regions,
    })
}

/// Seed of the sample in batch slot `slot` at step `step`.
pub fn sample_seed(run_seed: u64, step: usize, slot: usize) -> u64 {
    seed::derive(seed::derive(run_seed ^ 0x5A4D_504C, step as u64), slot as u64)
}

/// Dataset indices of the batch at `step`: consecutive slices of a fresh
/// permutation per epoch.
pub fn batch_indices(run_seed: u64, step: usize, batch_size: usize, len: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let mut perms: Vec<(usize, Vec<usize>)> = Vec::new();
    (0..batch_size)
        .map(|k| {
            let pos = step * batch_size + k;
            let epoch = pos / len;
            let perm = match perms.iter().position(|(e, _)| *e == epoch) {
                Some(i) => &perms[i].1,
                None => {
                    let mut p: Vec<usize> = (0..len).collect();
                    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(
                        run_seed ^ 0x000E_90C4,
                        epoch as u64,
                    )));
                    perms.push((epoch, p));
                    &perms.last().expect("just pushed").1
                }
            };
            perm[pos % len]
        })
        .collect()
}

/// Prepared samples of the batch at `step`.
pub fn prepare_batch(dataset: &Dataset, cfg: &TrainConfig, step: usize) -> Result<Vec<Sample>> {
    batch_indices(cfg.seed, step, cfg.batch_size, dataset.len())
        .into_iter()
        .enumerate()
        .map(|(slot, idx)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, step, slot));
            prepare_sample(&dataset.items[idx], cfg, &mut rng)
        })
        .collect()
}

/// Pixels of each listed region on a label map, in row-major order.
pub(crate) fn region_pixels(labels: &RegionLabelMap, ids: &[i32]) -> Vec<Vec<(usize, usize)>> {
    ids.iter().map(|&id| labels.pixels_of(id)).collect()
}

/// Distinct ids in order of first appearance.
pub(crate) fn distinct(ids: &[i32]) -> Vec<i32> {
    let mut out: Vec<i32> = Vec::new();
    for &id in ids {
        if !out.contains(&id) {
            out.push(id);
        }
    }
    out
}
