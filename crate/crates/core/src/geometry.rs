//! Augmented views with aligned region label maps.
//!
//! A region is identified by its id in the *source* image. Every view carries a
//! label map obtained by pushing the source labels through the same crop, flip
//! and resize as the pixels, so two views of one image agree on which region a
//! point belongs to even though their pixels do not line up.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value for pixels that belong to no region.
pub const NO_REGION: i32 = -1;

/// Pixel rectangle in source-image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelBox {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        PixelBox { x0, y0, w, h }
    }

    pub fn whole(height: usize, width: usize) -> Self {
        PixelBox::new(0, 0, width, height)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x0 + self.w <= width && self.y0 + self.h <= height
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.y0 && row < self.y0 + self.h && col >= self.x0 && col < self.x0 + self.w
    }

    /// Bounding box of the set pixels of `mask`, `None` when the mask is empty.
    pub fn bounding(mask: ArrayView2<bool>) -> Option<Self> {
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for ((r, c), &on) in mask.indexed_iter() {
            if on {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
        (r0 != usize::MAX).then(|| PixelBox::new(c0, r0, c1 - c0 + 1, r1 - r0 + 1))
    }
}

/// Geometric recipe that turns a source image into a square view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewTransform {
    pub crop_box: PixelBox,
    pub hflip: bool,
    pub out_size: usize,
}

impl ViewTransform {
    pub fn new(crop_box: PixelBox, hflip: bool, out_size: usize, src_height: usize, src_width: usize) -> Result<Self> {
        if !crop_box.fits(src_height, src_width) {
            return Err(Error::invalid(format!(
                "crop box {crop_box:?} does not fit a {src_height}x{src_width} image"
            )));
        }
        if out_size == 0 {
            return Err(Error::invalid("view out_size must be positive"));
        }
        Ok(ViewTransform {
            crop_box,
            hflip,
            out_size,
        })
    }

    /// Whole image, no flip.
    pub fn identity(src_height: usize, src_width: usize, out_size: usize) -> Self {
        ViewTransform {
            crop_box: PixelBox::whole(src_height, src_width),
            hflip: false,
            out_size,
        }
    }

    pub fn flipped(mut self) -> Self {
        self.hflip = !self.hflip;
        self
    }

    /// Continuous source coordinates `(y, x)` of the centre of view pixel
    /// `(row, col)` on a `res`×`res` grid laid over the view.
    pub fn view_to_source(&self, row: f64, col: f64, res: usize) -> (f64, f64) {
        let res_f = res as f64;
        let col = if self.hflip { res_f - 1.0 - col } else { col };
        let b = &self.crop_box;
        let y = b.y0 as f64 + (row + 0.5) * b.h as f64 / res_f;
        let x = b.x0 as f64 + (col + 0.5) * b.w as f64 / res_f;
        (y, x)
    }

    /// Nearest source pixel for view pixel `(row, col)` on a `res` grid.
    pub fn source_pixel(&self, row: usize, col: usize, res: usize) -> (usize, usize) {
        let (y, x) = self.view_to_source(row as f64, col as f64, res);
        let b = &self.crop_box;
        let sy = (y.floor() as usize).clamp(b.y0, b.y0 + b.h - 1);
        let sx = (x.floor() as usize).clamp(b.x0, b.x0 + b.w - 1);
        (sy, sx)
    }
}

/// Per-pixel source-region ids for an image or a view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionLabelMap {
    pub labels: Array2<i32>,
    pub n_regions: usize,
}

impl RegionLabelMap {
    pub fn new(labels: Array2<i32>, n_regions: usize) -> Result<Self> {
        if let Some(bad) = labels
            .iter()
            .find(|&&l| l < NO_REGION || (l >= 0 && l as usize >= n_regions))
        {
            return Err(Error::invalid(format!("label {bad} outside 0..{n_regions}")));
        }
        Ok(RegionLabelMap { labels, n_regions })
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    /// Ids with at least one pixel, ascending.
    pub fn present_ids(&self) -> BTreeSet<i32> {
        self.labels.iter().copied().filter(|&l| l >= 0).collect()
    }

    /// Binary mask of one region.
    pub fn mask(&self, id: i32) -> Array2<bool> {
        self.labels.mapv(|l| l == id)
    }

    /// Row-major pixel positions carrying `id`.
    pub fn pixels_of(&self, id: i32) -> Vec<(usize, usize)> {
        self.labels
            .indexed_iter()
            .filter(|(_, &l)| l == id)
            .map(|(p, _)| p)
            .collect()
    }
}

/// `n`×`n` grid over a `height`×`width` image; cell `(r, c)` gets id `r*n + c`.
///
/// The first `height % n` rows of cells (and `width % n` columns) are one
/// pixel larger than the rest.
pub fn make_grid_regions(height: usize, width: usize, n: usize) -> Result<RegionLabelMap> {
    if n == 0 {
        return Err(Error::invalid("grid size n must be at least 1"));
    }
    if height < n || width < n {
        return Err(Error::invalid(format!(
            "a {height}x{width} image cannot hold a {n}x{n} grid"
        )));
    }
    let row_cell = cell_index(height, n);
    let col_cell = cell_index(width, n);
    let labels = Array2::from_shape_fn((height, width), |(r, c)| (row_cell[r] * n + col_cell[c]) as i32);
    RegionLabelMap::new(labels, n * n)
}

fn cell_index(len: usize, n: usize) -> Vec<usize> {
    let base = len / n;
    let extra = len % n;
    let mut out = Vec::with_capacity(len);
    for cell in 0..n {
        let size = base + usize::from(cell < extra);
        out.extend(std::iter::repeat_n(cell, size));
    }
    out
}

/// A ground-truth object, either as a pixel mask or a box.
#[derive(Clone, Debug, PartialEq)]
pub enum Annotation {
    Mask(Array2<bool>),
    Box(PixelBox),
}

/// How annotations become regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    /// Masks are used as-is.
    Mask,
    /// Every annotation is reduced to its filled bounding box.
    Box,
}

/// Rasterises annotations into a label map. Shape `k` gets id `k`, uncovered
/// pixels share the background id `shapes.len()`; later shapes overwrite
/// earlier ones.
pub fn make_annotation_regions(
    shapes: &[Annotation],
    height: usize,
    width: usize,
    mode: AnnotationMode,
) -> Result<RegionLabelMap> {
    let background = shapes.len() as i32;
    let mut labels = Array2::from_elem((height, width), background);
    for (k, shape) in shapes.iter().enumerate() {
        let id = k as i32;
        match shape {
            Annotation::Mask(mask) => {
                if mask.dim() != (height, width) {
                    return Err(Error::invalid(format!(
                        "mask {k} is {:?}, image is {height}x{width}",
                        mask.dim()
                    )));
                }
                match mode {
                    AnnotationMode::Mask => {
                        ndarray::Zip::from(&mut labels).and(mask).for_each(|l, &on| {
                            if on {
                                *l = id;
                            }
                        });
                    }
                    AnnotationMode::Box => {
                        if let Some(b) = PixelBox::bounding(mask.view()) {
                            fill_box(&mut labels, &b, id);
                        }
                    }
                }
            }
            Annotation::Box(b) => {
                if !b.fits(height, width) {
                    return Err(Error::invalid(format!(
                        "box {k} {b:?} outside a {height}x{width} image"
                    )));
                }
                fill_box(&mut labels, b, id);
            }
        }
    }
    RegionLabelMap::new(labels, shapes.len() + 1)
}

fn fill_box(labels: &mut Array2<i32>, b: &PixelBox, id: i32) {
    labels
        .slice_mut(ndarray::s![b.y0..b.y0 + b.h, b.x0..b.x0 + b.w])
        .fill(id);
}

const MIN_ASPECT: f64 = 3.0 / 4.0;
const MAX_ASPECT: f64 = 4.0 / 3.0;
const CROP_ATTEMPTS: usize = 10;

/// Random resized crop plus horizontal flip.
///
/// Crop area over source area lies in `scale_range`, aspect ratio in
/// [3/4, 4/3]; after ten rejected draws the centre crop is used.
pub fn sample_view_transform<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    rng: &mut R,
    scale_range: (f64, f64),
    out_size: usize,
) -> ViewTransform {
    let (lo, hi) = scale_range;
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (MIN_ASPECT.ln(), MAX_ASPECT.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.random_range(lo..=hi);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w == 0 || h == 0 || w > width || h > height {
            continue;
        }
        let frac = (w * h) as f64 / area;
        let ratio = w as f64 / h as f64;
        if frac < lo || frac > hi || !(MIN_ASPECT..=MAX_ASPECT).contains(&ratio) {
            continue;
        }
        let x0 = rng.random_range(0..=width - w);
        let y0 = rng.random_range(0..=height - h);
        let hflip = rng.random_bool(0.5);
        return ViewTransform {
            crop_box: PixelBox::new(x0, y0, w, h),
            hflip,
            out_size,
        };
    }
    let ratio = width as f64 / height as f64;
    let (w, h) = if ratio < MIN_ASPECT {
        (width, ((width as f64 / MIN_ASPECT).round() as usize).min(height))
    } else if ratio > MAX_ASPECT {
        (((height as f64 * MAX_ASPECT).round() as usize).min(width), height)
    } else {
        (width, height)
    };
    let hflip = rng.random_bool(0.5);
    ViewTransform {
        crop_box: PixelBox::new((width - w) / 2, (height - h) / 2, w, h),
        hflip,
        out_size,
    }
}

/// Crop, flip and nearest-neighbour resize of a label map to `out_res`×`out_res`.
pub fn transform_label_map(labels: &RegionLabelMap, t: &ViewTransform, out_res: usize) -> RegionLabelMap {
    let out = Array2::from_shape_fn((out_res, out_res), |(r, c)| {
        let (sy, sx) = t.source_pixel(r, c, out_res);
        labels.labels[[sy, sx]]
    });
    RegionLabelMap {
        labels: out,
        n_regions: labels.n_regions,
    }
}

/// Renders the view for an H×W×C image with bilinear sampling.
pub fn render_view(image: &Array3<f32>, t: &ViewTransform) -> Array3<f32> {
    let (h, w, ch) = image.dim();
    let res = t.out_size;
    let mut out = Array3::<f32>::zeros((res, res, ch));
    for r in 0..res {
        for c in 0..res {
            let (y, x) = t.view_to_source(r as f64, c as f64, res);
            let y = (y - 0.5).clamp(0.0, (h - 1) as f64);
            let x = (x - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
            for k in 0..ch {
                let top = image[[y0, x0, k]] * (1.0 - fx) + image[[y0, x1, k]] * fx;
                let bot = image[[y1, x0, k]] * (1.0 - fx) + image[[y1, x1, k]] * fx;
                out[[r, c, k]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// The two views share no region, so point losses are skipped for the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoOverlap;

impl std::fmt::Display for NoOverlap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("views share no region")
    }
}

impl std::error::Error for NoOverlap {}

/// Ids present in both views.
pub fn shared_region_ids(a: &RegionLabelMap, b: &RegionLabelMap) -> Vec<i32> {
    let ids_b = b.present_ids();
    a.present_ids().intersection(&ids_b).copied().collect()
}

/// Draws `count` region ids uniformly, with repetition, from the ids that are
/// non-empty in both views.
pub fn sample_valid_masks<R: Rng + ?Sized>(
    labels1: &RegionLabelMap,
    labels2: &RegionLabelMap,
    count: usize,
    rng: &mut R,
) -> std::result::Result<Vec<i32>, NoOverlap> {
    let shared = shared_region_ids(labels1, labels2);
    if shared.is_empty() {
        return Err(NoOverlap);
    }
    Ok((0..count).map(|_| shared[rng.random_range(0..shared.len())]).collect())
}

/// Point positions on the feature grid with their region indicators.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampledPoints {
    pub coords: Vec<(usize, usize)>,
    pub indicators: Vec<i32>,
}

impl SampledPoints {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn with_features(self, features: Array2<f64>) -> Result<PointBatch> {
        PointBatch::new(self.coords, self.indicators, features)
    }
}

/// Sampled points together with their unit-norm features.
#[derive(Clone, Debug)]
pub struct PointBatch {
    pub coords: Vec<(usize, usize)>,
    pub indicators: Vec<i32>,
    pub features: Array2<f64>,
}

impl PointBatch {
    pub fn new(coords: Vec<(usize, usize)>, indicators: Vec<i32>, features: Array2<f64>) -> Result<Self> {
        if coords.len() != indicators.len() || indicators.len() != features.nrows() {
            return Err(Error::invalid(format!(
                "point batch lengths differ: {} coords, {} indicators, {} features",
                coords.len(),
                indicators.len(),
                features.nrows()
            )));
        }
        for (i, row) in features.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!("feature {i} has norm {norm}")));
            }
        }
        Ok(PointBatch {
            coords,
            indicators,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.indicators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indicators.is_empty()
    }
}

/// Draws `per_region` points from each listed region.
///
/// Sampling is uniform over the region's pixels, without replacement when the
/// region is large enough. Repeated ids get fresh draws.
pub fn sample_points<R: Rng + ?Sized>(
    labels: &RegionLabelMap,
    region_ids: &[i32],
    per_region: usize,
    rng: &mut R,
) -> Result<SampledPoints> {
    let mut out = SampledPoints {
        coords: Vec::with_capacity(region_ids.len() * per_region),
        indicators: Vec::with_capacity(region_ids.len() * per_region),
    };
    let mut cache: Vec<(i32, Vec<(usize, usize)>)> = Vec::new();
    for &id in region_ids {
        let pos = match cache.iter().position(|(k, _)| *k == id) {
            Some(p) => p,
            None => {
                let pixels = labels.pixels_of(id);
                if pixels.is_empty() {
                    return Err(Error::invalid(format!("region {id} is empty in this view")));
                }
                cache.push((id, pixels));
                cache.len() - 1
            }
        };
        let pixels = &cache[pos].1;
        if pixels.len() >= per_region {
            for i in index::sample(rng, pixels.len(), per_region) {
                out.coords.push(pixels[i]);
            }
        } else {
            for _ in 0..per_region {
                out.coords.push(pixels[rng.random_range(0..pixels.len())]);
            }
        }
        out.indicators.extend(std::iter::repeat_n(id, per_region));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn grid_even_division() {
        let g = make_grid_regions(224, 224, 4).unwrap();
        assert_eq!(g.n_regions, 16);
        for id in 0..16 {
            let px = g.pixels_of(id);
            assert_eq!(px.len(), 56 * 56);
            let (r, c) = px[0];
            assert_eq!((r / 56 * 4 + c / 56) as i32, id);
        }
        let g2 = make_grid_regions(224, 224, 2).unwrap();
        assert!((0..4).all(|id| g2.pixels_of(id).len() == 112 * 112));
    }

    #[test]
    fn grid_uneven_division_partitions() {
        let g = make_grid_regions(225, 225, 4).unwrap();
        // Row extents, counted by enumerating the first column.
        let mut rows = [0usize; 4];
        for r in 0..225 {
            rows[(g.labels[[r, 0]] / 4) as usize] += 1;
        }
        assert_eq!(rows, [57, 56, 56, 56]);
        let total: usize = (0..16).map(|id| g.pixels_of(id).len()).sum();
        assert_eq!(total, 225 * 225);
        assert!(g.labels.iter().all(|&l| (0..16).contains(&l)));
    }

    #[test]
    fn grid_rejects_small_images() {
        assert!(make_grid_regions(3, 10, 4).is_err());
        assert!(make_grid_regions(10, 10, 0).is_err());
    }

    #[test]
    fn annotation_full_mask_and_boxes() {
        let full = Array2::from_elem((8, 8), true);
        let m = make_annotation_regions(&[Annotation::Mask(full)], 8, 8, AnnotationMode::Mask).unwrap();
        assert!(m.labels.iter().all(|&l| l == 0));
        assert_eq!(m.n_regions, 2);

        let boxes = [
            Annotation::Box(PixelBox::new(0, 0, 2, 2)),
            Annotation::Box(PixelBox::new(5, 5, 3, 3)),
        ];
        let m = make_annotation_regions(&boxes, 8, 8, AnnotationMode::Box).unwrap();
        assert_eq!(m.labels[[1, 1]], 0);
        assert_eq!(m.labels[[6, 6]], 1);
        assert_eq!(m.labels[[3, 3]], 2);
    }

    #[test]
    fn annotation_overlap_later_wins() {
        let boxes = [
            Annotation::Box(PixelBox::new(0, 0, 5, 5)),
            Annotation::Box(PixelBox::new(3, 3, 5, 5)),
        ];
        let m = make_annotation_regions(&boxes, 8, 8, AnnotationMode::Mask).unwrap();
        for r in 3..5 {
            for c in 3..5 {
                assert_eq!(m.labels[[r, c]], 1);
            }
        }
        assert_eq!(m.labels[[0, 0]], 0);
        assert_eq!(m.labels[[7, 0]], 2);
    }

    #[test]
    fn annotation_box_mode_uses_bounding_box() {
        let mut mask = Array2::from_elem((6, 6), false);
        mask[[1, 1]] = true;
        mask[[3, 4]] = true;
        let m = make_annotation_regions(&[Annotation::Mask(mask)], 6, 6, AnnotationMode::Box).unwrap();
        assert_eq!(m.pixels_of(0).len(), 3 * 4);
    }

    #[test]
    fn annotation_empty_is_background() {
        let m = make_annotation_regions(&[], 4, 5, AnnotationMode::Mask).unwrap();
        assert!(m.labels.iter().all(|&l| l == 0));
        assert_eq!(m.n_regions, 1);
    }

    #[test]
    fn annotation_rejects_out_of_bounds() {
        let b = [Annotation::Box(PixelBox::new(6, 0, 4, 2))];
        assert!(make_annotation_regions(&b, 8, 8, AnnotationMode::Box).is_err());
    }

    #[test]
    fn full_scale_crop_is_whole_image() {
        let t = sample_view_transform(64, 64, &mut rng(1), (1.0, 1.0), 32);
        assert_eq!(t.crop_box, PixelBox::whole(64, 64));
    }

    #[test]
    fn crop_sampling_is_deterministic() {
        let a = sample_view_transform(100, 80, &mut rng(7), (0.2, 1.0), 64);
        let b = sample_view_transform(100, 80, &mut rng(7), (0.2, 1.0), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn crop_area_and_aspect_within_range() {
        let mut r = rng(3);
        let mut flips = 0;
        for _ in 0..10_000 {
            let t = sample_view_transform(96, 96, &mut r, (0.2, 1.0), 64);
            let frac = t.crop_box.area() as f64 / (96.0 * 96.0);
            assert!((0.2..=1.0).contains(&frac), "area fraction {frac}");
            let ratio = t.crop_box.w as f64 / t.crop_box.h as f64;
            assert!((MIN_ASPECT..=MAX_ASPECT).contains(&ratio));
            assert!(t.crop_box.fits(96, 96));
            flips += usize::from(t.hflip);
        }
        assert!((4700..5300).contains(&flips), "flip count {flips}");
    }

    #[test]
    fn identity_transform_keeps_labels() {
        let g = make_grid_regions(16, 16, 4).unwrap();
        let t = ViewTransform::identity(16, 16, 16);
        assert_eq!(transform_label_map(&g, &t, 16), g);
    }

    #[test]
    fn double_flip_is_identity() {
        let g = make_grid_regions(20, 20, 4).unwrap();
        let t = ViewTransform::new(PixelBox::new(2, 3, 13, 11), true, 20, 20, 20).unwrap();
        let once = transform_label_map(&g, &t, 20);
        let mirrored = transform_label_map(&g, &t.flipped(), 20);
        let back = RegionLabelMap {
            labels: mirrored.labels.slice(ndarray::s![.., ..;-1]).to_owned(),
            n_regions: 16,
        };
        assert_eq!(once, back);
    }

    #[test]
    fn top_left_quadrant_of_2x2_grid() {
        let g = make_grid_regions(64, 64, 2).unwrap();
        let t = ViewTransform::new(PixelBox::new(0, 0, 32, 32), false, 64, 64, 64).unwrap();
        let v = transform_label_map(&g, &t, 16);
        assert!(v.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn valid_masks_draw_from_shared_ids() {
        let a = RegionLabelMap::new(Array2::from_shape_vec((1, 4), vec![3, 7, 1, 1]).unwrap(), 16).unwrap();
        let b = RegionLabelMap::new(Array2::from_shape_vec((1, 4), vec![7, 3, 3, 9]).unwrap(), 16).unwrap();
        let ids = sample_valid_masks(&a, &b, 16, &mut rng(0)).unwrap();
        assert_eq!(ids.len(), 16);
        assert!(ids.iter().all(|i| *i == 3 || *i == 7));
    }

    #[test]
    fn valid_masks_no_overlap() {
        let a = RegionLabelMap::new(Array2::from_elem((2, 2), 0), 4).unwrap();
        let b = RegionLabelMap::new(Array2::from_elem((2, 2), 3), 4).unwrap();
        assert_eq!(sample_valid_masks(&a, &b, 16, &mut rng(0)), Err(NoOverlap));
    }

    #[test]
    fn single_pixel_region_repeats() {
        let mut l = Array2::from_elem((4, 4), 0);
        l[[2, 3]] = 1;
        let m = RegionLabelMap::new(l, 2).unwrap();
        let s = sample_points(&m, &[1], 4, &mut rng(5)).unwrap();
        assert_eq!(s.coords, vec![(2, 3); 4]);
        assert_eq!(s.indicators, vec![1; 4]);
    }

    #[test]
    fn large_region_points_are_distinct() {
        let g = make_grid_regions(16, 16, 2).unwrap();
        let s = sample_points(&g, &[2, 2], 16, &mut rng(9)).unwrap();
        assert_eq!(s.len(), 32);
        for chunk in s.coords.chunks(16) {
            let set: BTreeSet<_> = chunk.iter().collect();
            assert_eq!(set.len(), 16);
            assert!(chunk.iter().all(|&(r, c)| g.labels[[r, c]] == 2));
        }
    }

    #[test]
    fn absent_region_is_an_error() {
        let g = make_grid_regions(8, 8, 2).unwrap();
        assert!(sample_points(&g, &[5], 2, &mut rng(0)).is_err());
    }

    #[test]
    fn two_pixel_region_is_uniform() {
        let mut l = Array2::from_elem((3, 3), 0);
        l[[0, 0]] = 1;
        l[[2, 2]] = 1;
        let m = RegionLabelMap::new(l, 2).unwrap();
        let mut r = rng(11);
        let mut first = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            let s = sample_points(&m, &[1], 1, &mut r).unwrap();
            first += usize::from(s.coords[0] == (0, 0));
        }
        let f = first as f64 / draws as f64;
        assert!((0.47..=0.53).contains(&f), "frequency {f}");
    }

    #[test]
    fn point_batch_checks_norms() {
        let f = Array2::from_shape_vec((1, 2), vec![0.6, 0.8]).unwrap();
        assert!(PointBatch::new(vec![(0, 0)], vec![0], f).is_ok());
        let bad = Array2::from_shape_vec((1, 2), vec![0.6, 0.9]).unwrap();
        assert!(PointBatch::new(vec![(0, 0)], vec![0], bad).is_err());
    }
}
