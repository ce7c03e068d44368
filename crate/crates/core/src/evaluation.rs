//! Affinity maps, affinity-derived masks scored by Jaccard against ground
//! truth, k-means region discovery and figure export.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataItem, Dataset};
use crate::encoder::{DenseOutput, Encoder, Weights};
use crate::error::{Error, Result};
use crate::geometry::{render_view, ViewTransform};
use crate::nn::Scalar;

/// Cosine similarity of one point's feature to every location of its map.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMap {
    pub values: Array2<f64>,
    pub source_point: (usize, usize),
}

impl AffinityMap {
    pub fn resolution(&self) -> usize {
        self.values.nrows()
    }
}

pub fn affinity_map(dense: &DenseOutput, point: (usize, usize)) -> Result<AffinityMap> {
    let res = dense.resolution();
    let (r, c) = point;
    if r >= res || c >= res {
        return Err(Error::invalid(format!("point ({r}, {c}) outside a {res}x{res} map")));
    }
    let q = dense.point_map.slice(ndarray::s![r, c, ..]);
    let flat = dense
        .point_map
        .view()
        .into_shape_with_order((res * res, dense.dim()))
        .expect("row-major point map");
    let values = flat
        .dot(&q)
        .mapv(|v| v.clamp(-1.0, 1.0))
        .into_shape_with_order((res, res))
        .expect("square map");
    Ok(AffinityMap {
        values,
        source_point: point,
    })
}

/// Number of locations a keep fraction retains out of `total`.
pub fn kept_count(keep_fraction: f64, total: usize) -> usize {
    ((keep_fraction * total as f64).ceil() as usize).min(total)
}

/// Keeps the `⌈keep_fraction·R²⌉` highest-affinity locations; equal values
/// are taken in row-major order.
pub fn mask_from_affinity(map: &AffinityMap, keep_fraction: f64) -> Result<Array2<bool>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "keep fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let (h, w) = map.values.dim();
    let values = map.values.as_standard_layout();
    let flat = values.as_slice().expect("standard layout");
    let mut order: Vec<usize> = (0..flat.len()).collect();
    // Stable sort keeps row-major order among ties.
    order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]));
    let mut mask = Array2::from_elem((h, w), false);
    for &i in &order[..kept_count(keep_fraction, flat.len())] {
        mask[[i / w, i % w]] = true;
    }
    Ok(mask)
}

/// Nearest-neighbour resize of a mask or label grid.
pub fn upsample_nearest<A: Clone>(grid: &Array2<A>, height: usize, width: usize) -> Array2<A> {
    let (gh, gw) = grid.dim();
    Array2::from_shape_fn((height, width), |(y, x)| {
        let sy = ((y * gh) as f64 / height as f64 + 0.5 * gh as f64 / height as f64) as usize;
        let sx = ((x * gw) as f64 / width as f64 + 0.5 * gw as f64 / width as f64) as usize;
        grid[[sy.min(gh - 1), sx.min(gw - 1)]].clone()
    })
}

/// Intersection over union; 0 when both masks are empty.
pub fn jaccard(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::invalid(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// The mask pixel nearest to the mask centroid (ties in row-major order).
pub fn snapped_centroid(mask: &Array2<bool>) -> Option<(usize, usize)> {
    let pixels: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, &b)| b).map(|(p, _)| p).collect();
    if pixels.is_empty() {
        return None;
    }
    let n = pixels.len() as f64;
    let cy = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cx = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    pixels.into_iter().min_by(|a, b| {
        let d = |p: &(usize, usize)| (p.0 as f64 - cy).powi(2) + (p.1 as f64 - cx).powi(2);
        d(a).total_cmp(&d(b))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub image_id: String,
    pub object: usize,
    /// Picked point on the feature grid.
    pub point: (usize, usize),
    pub jaccard: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardReport {
    pub checkpoint: String,
    pub keep_fraction: f64,
    pub mean_jaccard: f64,
    pub objects: Vec<ObjectScore>,
    /// Objects whose mask was empty.
    pub skipped_objects: usize,
}

/// Scores every ground-truth object of one image given its dense output.
pub fn score_image(item: &DataItem, dense: &DenseOutput, keep_fraction: f64) -> Result<(Vec<ObjectScore>, usize)> {
    let (h, w, _) = item.image.dim();
    let res = dense.resolution();
    let mut scores = Vec::new();
    let mut skipped = 0;
    for (k, gt) in item.masks.iter().enumerate() {
        let Some((y, x)) = snapped_centroid(gt) else {
            skipped += 1;
            continue;
        };
        let point = ((y * res / h).min(res - 1), (x * res / w).min(res - 1));
        let map = affinity_map(dense, point)?;
        let pred = upsample_nearest(&mask_from_affinity(&map, keep_fraction)?, h, w);
        scores.push(ObjectScore {
            image_id: item.id.clone(),
            object: k,
            point,
            jaccard: jaccard(&pred, gt)?,
        });
    }
    Ok((scores, skipped))
}

/// Mean Jaccard over all objects, with dense outputs from `encode`.
pub fn evaluate_with<F>(dataset: &Dataset, keep_fraction: f64, checkpoint: &str, mut encode: F) -> Result<JaccardReport>
where
    F: FnMut(&DataItem) -> Result<DenseOutput>,
{
    if !dataset.has_gt_masks {
        return Err(Error::Dataset("evaluation needs ground-truth masks".into()));
    }
    let mut objects = Vec::new();
    let mut skipped_objects = 0;
    for item in &dataset.items {
        let dense = encode(item)?;
        let (s, k) = score_image(item, &dense, keep_fraction)?;
        objects.extend(s);
        skipped_objects += k;
    }
    if skipped_objects > 0 {
        log::warn!("{skipped_objects} objects with empty masks were skipped");
    }
    let mean_jaccard = if objects.is_empty() {
        0.0
    } else {
        objects.iter().map(|o| o.jaccard).sum::<f64>() / objects.len() as f64
    };
    Ok(JaccardReport {
        checkpoint: checkpoint.to_string(),
        keep_fraction,
        mean_jaccard,
        objects,
        skipped_objects,
    })
}

/// Resizes an image to the encoder input, then encodes it.
pub fn encode_image<T: Scalar>(encoder: &Encoder, weights: &Weights<T>, image: &Array3<f32>) -> Result<DenseOutput> {
    let (h, w, _) = image.dim();
    let s = encoder.cfg.input_size;
    if (h, w) == (s, s) {
        encoder.encode(weights, image)
    } else {
        encoder.encode(weights, &render_view(image, &ViewTransform::identity(h, w, s)))
    }
}

/// Mean Jaccard of an encoder on a dataset with ground-truth masks.
pub fn evaluate_jaccard<T: Scalar>(
    encoder: &Encoder,
    weights: &Weights<T>,
    dataset: &Dataset,
    keep_fraction: f64,
    checkpoint: &str,
) -> Result<JaccardReport> {
    evaluate_with(dataset, keep_fraction, checkpoint, |item| {
        encode_image(encoder, weights, &item.image)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Array2<usize>,
    pub centroids: Array2<f64>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means with k-means++ seeding over all `R²` unit point features. Empty
/// clusters are re-seeded at the point farthest from its centroid.
pub fn kmeans_regions<R: Rng + ?Sized>(
    dense: &DenseOutput,
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Result<KMeansResult> {
    let res = dense.resolution();
    let n = res * res;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cluster count {k} must lie in [1, {n}]")));
    }
    let x = dense
        .point_map
        .view()
        .into_shape_with_order((n, dense.dim()))
        .expect("row-major point map")
        .to_owned();

    // k-means++ seeding.
    let mut centroids = Array2::zeros((k, x.ncols()));
    centroids.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut d2: Array1<f64> = x.rows().into_iter().map(|r| sq_dist(r, centroids.row(0))).collect();
    for c in 1..k {
        let total = d2.sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut t = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    idx = i;
                    break;
                }
                t -= d;
            }
            idx
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centroids.row(c)));
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut objective = Vec::new();
    for _ in 0..iters.max(1) {
        let mut changed = false;
        let mut obj = 0.0;
        for (i, r) in x.rows().into_iter().enumerate() {
            let (best, d) = (0..k)
                .map(|c| (c, sq_dist(r, centroids.row(c))))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("k >= 1");
            changed |= assign[i] != best;
            assign[i] = best;
            obj += d;
        }
        objective.push(obj);
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, r) in x.rows().into_iter().enumerate() {
            sums.row_mut(assign[i]).scaled_add(1.0, &r);
            counts[assign[i]] += 1;
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / count as f64));
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(x.row(a), centroids.row(assign[a]))
                            .total_cmp(&sq_dist(x.row(b), centroids.row(assign[b])))
                    })
                    .expect("non-empty");
                centroids.row_mut(c).assign(&x.row(far));
            }
        }
    }
    Ok(KMeansResult {
        labels: Array2::from_shape_vec((res, res), assign).expect("R² labels"),
        centroids,
        objective,
    })
}

/// What the right-hand panel of a visualisation shows.
#[derive(Clone, Copy, Debug)]
pub enum Overlay<'a> {
    Affinity(&'a AffinityMap),
    Labels(&'a Array2<usize>),
}

/// Min-max normalised copy; a constant map becomes all ones.
pub fn normalize_heatmap(values: &Array2<f64>) -> Array2<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return values.mapv(|_| 1.0);
    }
    values.mapv(|v| (v - lo) / (hi - lo))
}

fn label_color(label: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
    ];
    PALETTE[label % PALETTE.len()]
}

/// Writes the source image (picked point marked in red) next to a grayscale
/// heatmap or a label-colour panel, both at image resolution.
pub fn export_visualization(image: &Array3<f32>, overlay: Overlay, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let mut out: RgbImage = ImageBuffer::new(2 * w as u32, h as u32);
    let px = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(
                x as u32,
                y as u32,
                Rgb([px(image[[y, x, 0]]), px(image[[y, x, 1]]), px(image[[y, x, 2]])]),
            );
        }
    }
    match overlay {
        Overlay::Affinity(map) => {
            let heat = upsample_nearest(&normalize_heatmap(&map.values), h, w);
            for ((y, x), &v) in heat.indexed_iter() {
                let g = (v * 255.0).round() as u8;
                out.put_pixel((w + x) as u32, y as u32, Rgb([g, g, g]));
            }
            let res = map.resolution();
            let (r, c) = map.source_point;
            let (cy, cx) = (
                ((r as f64 + 0.5) * h as f64 / res as f64) as usize,
                ((c as f64 + 0.5) * w as f64 / res as f64) as usize,
            );
            for d in -2i64..=2 {
                for (yy, xx) in [(cy as i64 + d, cx as i64), (cy as i64, cx as i64 + d)] {
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        out.put_pixel(xx as u32, yy as u32, Rgb([255, 0, 0]));
                    }
                }
            }
        }
        Overlay::Labels(labels) => {
            let up = upsample_nearest(labels, h, w);
            for ((y, x), &l) in up.indexed_iter() {
                out.put_pixel((w + x) as u32, y as u32, Rgb(label_color(l)));
            }
        }
    }
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
