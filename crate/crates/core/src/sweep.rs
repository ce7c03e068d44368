//! One-parameter ablation sweeps: train one run per value from the same
//! seed, score each final checkpoint by mean Jaccard.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RegionSource, TrainConfig};
use crate::data::Dataset;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::evaluation::evaluate_jaccard;
use crate::training::{run_pretraining, Checkpoint};

/// Parameters a sweep can vary.
pub const SWEEP_PARAMS: &[&str] = &[
    "alpha",
    "beta",
    "tau_s",
    "tau_t",
    "tau_pair",
    "P",
    "n",
    "R",
    "strategy",
    "region_source",
];

/// A parameter, its values and the config every run starts from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: String,
    pub values: Vec<String>,
    pub base: TrainConfig,
}

impl SweepSpec {
    /// Checks the parameter name and every value against its domain.
    pub fn new(param: &str, values: Vec<String>, base: TrainConfig) -> Result<Self> {
        if !SWEEP_PARAMS.contains(&param) {
            return Err(Error::config(
                param,
                format!("not a sweep parameter; expected one of {}", SWEEP_PARAMS.join(", ")),
            ));
        }
        let spec = SweepSpec {
            param: param.to_string(),
            values,
            base,
        };
        for v in &spec.values {
            spec.config_for(v)?;
        }
        Ok(spec)
    }

    /// The base config with one value applied.
    ///
    /// `tau_pair` takes `tau_s:tau_t`; `region_source` additionally accepts
    /// `grid<k>` for a `k`×`k` grid.
    pub fn config_for(&self, value: &str) -> Result<TrainConfig> {
        let mut cfg = self.base.clone();
        match self.param.as_str() {
            "tau_pair" => {
                let (s, t) = value
                    .split_once(':')
                    .ok_or_else(|| Error::config("tau_pair", format!("`{value}` is not `tau_s:tau_t`")))?;
                cfg.set("tau_s", s)?;
                cfg.set("tau_t", t)?;
            }
            "region_source" => match value.strip_prefix("grid") {
                Some(k) if !k.is_empty() => {
                    cfg.region_source = RegionSource::Grid;
                    cfg.set("n", k)?;
                }
                _ => cfg.set("region_source", value)?,
            },
            p => cfg.set(p, value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub mean_jaccard: Option<f64>,
    pub final_l_total: Option<f64>,
    pub run_dir: PathBuf,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: String,
    pub rows: Vec<SweepRow>,
}

fn run_one(cfg: &TrainConfig, train: &Dataset, eval: &Dataset, dir: &Path) -> Result<(f64, Option<f64>)> {
    let summary = run_pretraining(cfg, train, dir)?;
    let ckpt = Checkpoint::<f32>::load(summary.final_checkpoint())?;
    let encoder = Encoder::new(ckpt.encoder.clone())?;
    let id = summary.final_checkpoint().display().to_string();
    let report = evaluate_jaccard(&encoder, &ckpt.pair.base, eval, cfg.keep_fraction, &id)?;
    Ok((report.mean_jaccard, summary.records.last().map(|r| r.l_total)))
}

fn dir_name(param: &str, value: &str) -> String {
    let safe: String = value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{param}={safe}")
}

/// Trains and scores one run per value; a failing run is recorded and the
/// sweep moves on. Rows are appended to `sweep.jsonl` as they finish and the
/// full report is written to `sweep.json`.
pub fn run_sweep(spec: &SweepSpec, train: &Dataset, eval: &Dataset, out_dir: &Path) -> Result<SweepReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows_path = out_dir.join("sweep.jsonl");
    let mut rows_file = fs::File::create(&rows_path).map_err(|e| Error::io(&rows_path, e))?;
    let mut rows = Vec::with_capacity(spec.values.len());
    for value in &spec.values {
        let run_dir = out_dir.join(dir_name(&spec.param, value));
        let outcome = spec
            .config_for(value)
            .and_then(|cfg| run_one(&cfg, train, eval, &run_dir));
        let row = match outcome {
            Ok((j, loss)) => SweepRow {
                param: spec.param.clone(),
                value: value.clone(),
                mean_jaccard: Some(j),
                final_l_total: loss,
                run_dir,
                error: None,
            },
            Err(e) => {
                log::warn!("sweep run {}={value} failed: {e}", spec.param);
                SweepRow {
                    param: spec.param.clone(),
                    value: value.clone(),
                    mean_jaccard: None,
                    final_l_total: None,
                    run_dir,
                    error: Some(e.to_string()),
                }
            }
        };
        writeln!(rows_file, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&rows_path, e))?;
        rows.push(row);
    }
    let report = SweepReport {
        param: spec.param.clone(),
        rows,
    };
    let report_path = out_dir.join("sweep.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}
