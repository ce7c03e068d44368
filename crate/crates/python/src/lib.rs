//! Python bindings: configuration, synthetic data, pre-training, evaluation
//! and the loss and geometry primitives.

use std::path::PathBuf;

use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use plrc::config::{self, TrainConfig};
use plrc::data::{self, DatasetKind, SyntheticParams};
use plrc::encoder::Encoder;
use plrc::evaluation::evaluate_jaccard;
use plrc::geometry;
use plrc::losses::{self, PointsRef};
use plrc::training::{self, Checkpoint};

fn py_err(e: plrc::Error) -> PyErr {
    match e {
        plrc::Error::Config { .. } | plrc::Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{what}: rows have different lengths")));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn rows<A: Clone>(m: &Array2<A>) -> Vec<Vec<A>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_json<S: serde::Serialize>(value: &S) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Pre-training configuration; every key of `TrainConfig.keys()` is settable.
/// Keyword overrides are validated on construction.
#[pyclass(name = "TrainConfig", module = "plrc")]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = TrainConfig::default();
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                inner.set(&key, &v.str()?.to_string()).map_err(py_err)?;
            }
        }
        inner.validate().map_err(py_err)?;
        Ok(PyTrainConfig { inner })
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        config::KEYS.iter().map(|(k, _)| *k).collect()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        TrainConfig::from_json(text)
            .map(|inner| PyTrainConfig { inner })
            .map_err(py_err)
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        self.inner.set(key, &value.str()?.to_string()).map_err(py_err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).map_err(py_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", self.inner.to_json().unwrap_or_default())
    }
}

/// Images with optional ground-truth object masks.
#[pyclass(name = "Dataset", module = "plrc")]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Loads a dataset directory (`kind` is `synthetic` or `image_folder`).
    #[staticmethod]
    #[pyo3(signature = (path, kind = "synthetic"))]
    fn load(path: PathBuf, kind: &str) -> PyResult<Self> {
        let kind: DatasetKind = kind.parse().map_err(py_err)?;
        data::load_dataset(&path, kind)
            .map(|inner| PyDataset { inner })
            .map_err(py_err)
    }

    /// Generates a synthetic dataset in memory.
    #[staticmethod]
    #[pyo3(signature = (count, seed = 0, image_size = 64, min_shapes = 1, max_shapes = 4))]
    fn synthetic(count: usize, seed: u64, image_size: usize, min_shapes: usize, max_shapes: usize) -> PyResult<Self> {
        let params = SyntheticParams {
            count,
            image_size,
            min_shapes,
            max_shapes,
            seed,
        };
        data::Dataset::synthetic_in_memory(&params)
            .map(|inner| PyDataset { inner })
            .map_err(py_err)
    }

    #[getter]
    fn has_gt_masks(&self) -> bool {
        self.inner.has_gt_masks
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Writes a synthetic dataset (images, masks, index.json) to `out_dir` and
/// returns the number of images.
#[pyfunction]
#[pyo3(signature = (out_dir, count = 2000, seed = 0, image_size = 64, min_shapes = 1, max_shapes = 4))]
fn gen_synthetic_data(
    out_dir: PathBuf,
    count: usize,
    seed: u64,
    image_size: usize,
    min_shapes: usize,
    max_shapes: usize,
) -> PyResult<usize> {
    let params = SyntheticParams {
        count,
        image_size,
        min_shapes,
        max_shapes,
        seed,
    };
    data::gen_synthetic_dataset(&params, &out_dir)
        .map(|idx| idx.len())
        .map_err(py_err)
}

/// Runs pre-training and returns `{"checkpoints": [...], "metrics": [...]}`.
#[pyfunction]
fn pretrain<'py>(
    py: Python<'py>,
    config: &PyTrainConfig,
    dataset: &PyDataset,
    out_dir: PathBuf,
) -> PyResult<Bound<'py, PyAny>> {
    let summary = py
        .detach(|| training::run_pretraining(&config.inner, &dataset.inner, &out_dir))
        .map_err(py_err)?;
    let out = PyDict::new(py);
    let paths: Vec<String> = summary.checkpoints.iter().map(|p| p.display().to_string()).collect();
    out.set_item("checkpoints", paths)?;
    out.set_item("metrics", json_to_py(py, &to_json(&summary.records)?)?)?;
    Ok(out.into_any())
}

/// Mean affinity-mask Jaccard of a checkpoint over a dataset with masks.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, keep_fraction = 0.8))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    dataset: &PyDataset,
    keep_fraction: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let report = py
        .detach(|| {
            let ck = Checkpoint::<f32>::load(&checkpoint)?;
            let encoder = Encoder::new(ck.encoder.clone())?;
            let name = checkpoint.display().to_string();
            evaluate_jaccard(&encoder, &ck.pair.base, &dataset.inner, keep_fraction, &name)
        })
        .map_err(py_err)?;
    json_to_py(py, &to_json(&report)?)
}

/// Image-level InfoNCE of unit query `z` with positive `z_pos` and negatives.
#[pyfunction]
fn info_nce_image(z: Vec<f64>, z_pos: Vec<f64>, negatives: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let negatives = if negatives.is_empty() {
        Array2::zeros((0, z.len()))
    } else {
        matrix(negatives, "negatives")?
    };
    losses::info_nce_image(
        Array1::from(z).view(),
        Array1::from(z_pos).view(),
        negatives.view(),
        tau,
    )
    .map_err(py_err)
}

/// Point-level region contrast; returns `(loss, n_positive_pairs)` or `None`
/// when no query shares a region with a key.
#[pyfunction]
#[pyo3(signature = (query, query_ids, keys, key_ids, tau, negatives = None))]
fn point_region_contrast(
    query: Vec<Vec<f64>>,
    query_ids: Vec<i32>,
    keys: Vec<Vec<f64>>,
    key_ids: Vec<i32>,
    tau: f64,
    negatives: Option<Vec<Vec<f64>>>,
) -> PyResult<Option<(f64, usize)>> {
    let q = matrix(query, "query")?;
    let k = matrix(keys, "keys")?;
    let n = match negatives {
        Some(n) if !n.is_empty() => matrix(n, "negatives")?,
        _ => Array2::zeros((0, q.ncols())),
    };
    let qr = PointsRef::new(q.view(), &query_ids).map_err(py_err)?;
    let kr = PointsRef::new(k.view(), &key_ids).map_err(py_err)?;
    let out = losses::point_region_contrast(qr, kr, n.view(), tau).map_err(py_err)?;
    Ok(out.map(|o| (o.loss, o.n_positive_pairs)))
}

/// Row-softmax affinity matrix between queries and keys.
#[pyfunction]
fn point_affinity(queries: Vec<Vec<f64>>, keys: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let q = matrix(queries, "queries")?;
    let k = matrix(keys, "keys")?;
    let a = losses::point_affinity(q.view(), k.view(), tau).map_err(py_err)?;
    Ok(rows(a.values()))
}

/// Distillation cross-entropy between teacher `A(tq→tk; tau_t)` and student
/// `A(sq→sk; tau_s)`.
#[pyfunction]
fn affinity_distillation(
    teacher_queries: Vec<Vec<f64>>,
    teacher_keys: Vec<Vec<f64>>,
    student_queries: Vec<Vec<f64>>,
    student_keys: Vec<Vec<f64>>,
    tau_t: f64,
    tau_s: f64,
) -> PyResult<f64> {
    let tq = matrix(teacher_queries, "teacher_queries")?;
    let tk = matrix(teacher_keys, "teacher_keys")?;
    let sq = matrix(student_queries, "student_queries")?;
    let sk = matrix(student_keys, "student_keys")?;
    let teacher = losses::point_affinity(tq.view(), tk.view(), tau_t).map_err(py_err)?;
    let student = losses::point_affinity(sq.view(), sk.view(), tau_s).map_err(py_err)?;
    losses::affinity_distillation(&teacher, &student).map_err(py_err)
}

/// Region-id map of an `n × n` grid over a `height × width` image.
#[pyfunction]
fn grid_regions(height: usize, width: usize, n: usize) -> PyResult<Vec<Vec<i32>>> {
    let map = geometry::make_grid_regions(height, width, n).map_err(py_err)?;
    Ok(rows(&map.labels))
}

#[pymodule(name = "plrc")]
fn plrc_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic_data, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce_image, m)?)?;
    m.add_function(wrap_pyfunction!(point_region_contrast, m)?)?;
    m.add_function(wrap_pyfunction!(point_affinity, m)?)?;
    m.add_function(wrap_pyfunction!(affinity_distillation, m)?)?;
    m.add_function(wrap_pyfunction!(grid_regions, m)?)?;
    Ok(())
}
