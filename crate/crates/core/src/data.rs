//! Synthetic shape datasets with ground-truth masks, and image-folder loading.
//!
//! On disk a synthetic dataset is
//!
//! ```text
//! images/<id>.png        8-bit RGB
//! masks/<id>_<k>.png     8-bit binary (0 / 255), one per object
//! index.jsonl            {"id", "size": [h, w], "masks", "seed", "shapes"}
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RegionSource;
use crate::error::{Error, Result};

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub count: usize,
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            count: 2000,
            image_size: 64,
            min_shapes: 1,
            max_shapes: 4,
            seed: 0,
        }
    }
}

impl SyntheticParams {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse = |v: &str| -> Result<u64> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
        };
        match key {
            "count" => self.count = parse(value)? as usize,
            "image_size" => self.image_size = parse(value)? as usize,
            "min_shapes" => self.min_shapes = parse(value)? as usize,
            "max_shapes" => self.max_shapes = parse(value)? as usize,
            "seed" => self.seed = parse(value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines, then validates.
    pub fn apply_kv_str(&mut self, text: &str) -> Result<()> {
        for (key, value) in crate::config::parse_kv_lines(text)? {
            self.set(&key, &value)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("count", "must be at least 1"));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size", "must be at least 16"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.max_shapes > MAX_SHAPES {
            return Err(Error::config(
                "min_shapes",
                format!(
                    "shape range [{}, {}] must satisfy 1 <= min <= max <= {MAX_SHAPES}",
                    self.min_shapes, self.max_shapes
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<[f32; 3]>,
}

/// One generated image with a visible-pixel mask per shape.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: Array3<f32>,
    pub object_masks: Vec<Array2<bool>>,
    pub meta: SampleMeta,
}

/// Upper bound on shapes per image; every shape must stay visibly large.
pub const MAX_SHAPES: usize = 8;

/// Smallest visible area of an object, as a fraction of the image.
const MIN_VISIBLE: f64 = 0.04;

/// Per-image seed derived from the dataset seed.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    crate::seed::derive(seed, index as u64)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    // Saturated colours: one channel high, one low, one random.
    let mut c = [
        rng.random_range(0.75..1.0),
        rng.random_range(0.0..0.25),
        rng.random::<f32>(),
    ];
    for i in (1..3).rev() {
        let j = rng.random_range(0..=i);
        c.swap(i, j);
    }
    c
}

fn shape_mask(kind: ShapeKind, size: usize, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let s = size as f64;
    match kind {
        ShapeKind::Disk => {
            let r = rng.random_range(0.18..0.34) * s;
            let cy = rng.random_range(r * 0.6..s - r * 0.6);
            let cx = rng.random_range(r * 0.6..s - r * 0.6);
            Array2::from_shape_fn((size, size), |(y, x)| {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            })
        }
        ShapeKind::Rectangle => {
            let h = rng.random_range(0.3..0.65) * s;
            let w = rng.random_range(0.3..0.65) * s;
            let y0 = rng.random_range(0.0..s - h);
            let x0 = rng.random_range(0.0..s - w);
            Array2::from_shape_fn((size, size), |(y, x)| {
                let (y, x) = (y as f64 + 0.5, x as f64 + 0.5);
                y >= y0 && y < y0 + h && x >= x0 && x < x0 + w
            })
        }
        ShapeKind::Triangle => {
            let cy = rng.random_range(0.3..0.7) * s;
            let cx = rng.random_range(0.3..0.7) * s;
            let r = rng.random_range(0.25..0.45) * s;
            let rot = rng.random_range(0.0..std::f64::consts::TAU);
            let v: Vec<(f64, f64)> = (0..3)
                .map(|k| {
                    let a = rot + k as f64 * std::f64::consts::TAU / 3.0;
                    (cy + r * a.sin(), cx + r * a.cos())
                })
                .collect();
            Array2::from_shape_fn((size, size), |(y, x)| {
                let p = (y as f64 + 0.5, x as f64 + 0.5);
                let side = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (p.0 - a.0) - (b.0 - a.0) * (p.1 - a.1);
                let d = [side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0])];
                d.iter().all(|&s| s >= 0.0) || d.iter().all(|&s| s <= 0.0)
            })
        }
    }
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let c0: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let freq = rng.random_range(0.15..0.6);
    let amp = rng.random_range(0.05..0.15);
    let s = size as f32;
    let mut img = Array3::from_shape_fn((size, size, 3), |(y, x, k)| {
        let t = ((y as f32 / s - 0.5) * dy + (x as f32 / s - 0.5) * dx + 0.5).clamp(0.0, 1.0);
        let stripes = amp * ((y as f32 * dx - x as f32 * dy) * freq).sin();
        c0[k] * (1.0 - t) + c1[k] * t + stripes
    });
    for v in img.iter_mut() {
        *v = (*v + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
    }
    img
}

/// Generates one sample; a pure function of `(seed, size, shape range)`.
pub fn generate_sample(seed: u64, size: usize, min_shapes: usize, max_shapes: usize) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = size * size;
    let min_px = ((MIN_VISIBLE * target as f64).ceil() as usize).max(1);
    loop {
        let count = rng.random_range(min_shapes..=max_shapes);
        let mut image = background(size, &mut rng);
        let mut owner = Array2::<i32>::from_elem((size, size), -1);
        let mut shapes = Vec::with_capacity(count);
        let mut colors = Vec::with_capacity(count);
        for k in 0..count {
            let kind = match rng.random_range(0..3) {
                0 => ShapeKind::Disk,
                1 => ShapeKind::Rectangle,
                _ => ShapeKind::Triangle,
            };
            let mask = shape_mask(kind, size, &mut rng);
            let color = random_color(&mut rng);
            let noise = rng.random_range(0.02..0.08f32);
            for ((y, x), &on) in mask.indexed_iter() {
                if on {
                    owner[[y, x]] = k as i32;
                    for (c, &base) in color.iter().enumerate() {
                        image[[y, x, c]] = (base + rng.random_range(-noise..noise)).clamp(0.0, 1.0);
                    }
                }
            }
            shapes.push(kind);
            colors.push(color);
        }
        let object_masks: Vec<Array2<bool>> = (0..count as i32).map(|k| owner.mapv(|o| o == k)).collect();
        if object_masks.iter().all(|m| m.iter().filter(|&&b| b).count() >= min_px) {
            return SyntheticSample {
                image,
                object_masks,
                meta: SampleMeta { seed, shapes, colors },
            };
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub size: [usize; 2],
    pub masks: usize,
    pub seed: u64,
    #[serde(default)]
    pub shapes: Vec<ShapeKind>,
}

fn item_id(i: usize) -> String {
    format!("{i:06}")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a synthetic dataset to `out_dir`.
pub fn gen_synthetic_dataset(params: &SyntheticParams, out_dir: &Path) -> Result<Vec<IndexEntry>> {
    params.validate()?;
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    create_dir(&images)?;
    create_dir(&masks)?;
    let index_path = out_dir.join("index.jsonl");
    let mut index = fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut entries = Vec::with_capacity(params.count);
    for i in 0..params.count {
        let seed = item_seed(params.seed, i);
        let sample = generate_sample(seed, params.image_size, params.min_shapes, params.max_shapes);
        let id = item_id(i);
        save_rgb(&sample.image, &images.join(format!("{id}.png")))?;
        for (k, m) in sample.object_masks.iter().enumerate() {
            save_mask(m, &masks.join(format!("{id}_{k}.png")))?;
        }
        let entry = IndexEntry {
            id,
            size: [params.image_size, params.image_size],
            masks: sample.object_masks.len(),
            seed,
            shapes: sample.meta.shapes,
        };
        writeln!(index, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&index_path, e))?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn save_rgb(image: &Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |k: usize| (image[[y as usize, x as usize, k]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_mask(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, k)| {
        img.get_pixel(x as u32, y as u32)[k] as f32 / 255.0
    }))
}

pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    ImageFolder,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "image_folder" => Ok(DatasetKind::ImageFolder),
            _ => Err(Error::invalid(format!("unknown dataset kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DataItem {
    pub id: String,
    pub image: Array3<f32>,
    pub masks: Vec<Array2<bool>>,
}

/// An in-memory dataset in deterministic order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub items: Vec<DataItem>,
    pub has_gt_masks: bool,
}

impl Dataset {
    pub fn from_items(items: Vec<DataItem>) -> Self {
        let has_gt_masks = !items.is_empty() && items.iter().all(|i| !i.masks.is_empty());
        Dataset {
            kind: DatasetKind::Synthetic,
            root: PathBuf::new(),
            items,
            has_gt_masks,
        }
    }

    /// In-memory synthetic dataset, identical to what [`gen_synthetic_dataset`]
    /// writes up to 8-bit quantisation.
    pub fn synthetic_in_memory(params: &SyntheticParams) -> Result<Self> {
        params.validate()?;
        let items = (0..params.count)
            .map(|i| {
                let s = generate_sample(
                    item_seed(params.seed, i),
                    params.image_size,
                    params.min_shapes,
                    params.max_shapes,
                );
                DataItem {
                    id: item_id(i),
                    image: s.image.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0),
                    masks: s.object_masks,
                }
            })
            .collect();
        Ok(Dataset::from_items(items))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Fails when the region source needs masks this dataset lacks.
    pub fn check_region_source(&self, source: RegionSource) -> Result<()> {
        if source.needs_masks() && !self.has_gt_masks {
            return Err(Error::config(
                "region_source",
                format!("{source:?} needs ground-truth masks, but the dataset has none"),
            ));
        }
        Ok(())
    }

    /// First `n` items.
    pub fn truncated(&self, n: usize) -> Self {
        Dataset {
            items: self.items.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }
}

/// Loads a dataset directory of the given kind.
pub fn load_dataset(path: &Path, kind: DatasetKind) -> Result<Dataset> {
    if !path.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", path.display())));
    }
    match kind {
        DatasetKind::Synthetic => load_synthetic(path),
        DatasetKind::ImageFolder => load_folder(path),
    }
}

fn load_synthetic(path: &Path) -> Result<Dataset> {
    let index_path = path.join("index.jsonl");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut items = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let entry: IndexEntry = serde_json::from_str(line)?;
        let image = load_rgb(&path.join("images").join(format!("{}.png", entry.id)))?;
        if image.dim().0 != entry.size[0] || image.dim().1 != entry.size[1] {
            return Err(Error::Dataset(format!(
                "image {} does not match its index size",
                entry.id
            )));
        }
        let masks = (0..entry.masks)
            .map(|k| load_mask(&path.join("masks").join(format!("{}_{k}.png", entry.id))))
            .collect::<Result<Vec<_>>>()?;
        items.push(DataItem {
            id: entry.id,
            image,
            masks,
        });
    }
    if items.is_empty() {
        return Err(Error::Dataset(format!("{} lists no images", index_path.display())));
    }
    let has_gt_masks = items.iter().all(|i| !i.masks.is_empty());
    Ok(Dataset {
        kind: DatasetKind::Synthetic,
        root: path.to_path_buf(),
        items,
        has_gt_masks,
    })
}

fn load_folder(path: &Path) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", path.display())));
    }
    let items = files
        .iter()
        .map(|f| {
            Ok(DataItem {
                id: f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
                image: load_rgb(f)?,
                masks: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        kind: DatasetKind::ImageFolder,
        root: path.to_path_buf(),
        items,
        has_gt_masks: false,
    })
}
