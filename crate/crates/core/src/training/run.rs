use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::encoder::Encoder;
use crate::error::{Error, Result};

use super::checkpoint::Checkpoint;
use super::sample::prepare_batch;
use super::step::{train_step, StepOutput, TrainState};

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub distill_weight: f64,
    pub l_image: f64,
    pub l_contrast: f64,
    pub l_affinity: f64,
    pub l_point: f64,
    pub l_total: f64,
    pub n_positive_pairs: usize,
    pub skipped: usize,
}

impl From<&StepOutput> for StepRecord {
    fn from(o: &StepOutput) -> Self {
        let r = &o.report;
        StepRecord {
            step: o.step,
            lr: o.lr,
            distill_weight: o.distill_weight,
            l_image: r.l_image,
            l_contrast: r.l_contrast,
            l_affinity: r.l_affinity,
            l_point: r.l_point,
            l_total: r.l_total,
            n_positive_pairs: r.n_positive_pairs,
            skipped: r.skipped,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub records: Vec<StepRecord>,
    /// Checkpoint paths in step order; the first is the initial weights.
    pub checkpoints: Vec<PathBuf>,
}

impl RunSummary {
    pub fn initial_checkpoint(&self) -> &Path {
        &self.checkpoints[0]
    }

    pub fn final_checkpoint(&self) -> &Path {
        self.checkpoints.last().expect("initial checkpoint always written")
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step}.ckpt"))
}

/// Reads `metrics.jsonl` of a run directory.
pub fn read_metrics(dir: &Path) -> Result<Vec<StepRecord>> {
    let path = dir.join("metrics.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Runs `cfg.steps` training steps, writing the config snapshot, one metrics
/// record per step and checkpoints at step 0, every `checkpoint_every` steps
/// and at the end.
pub fn run_pretraining(cfg: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    dataset.check_region_source(cfg.region_source)?;
    let encoder = Encoder::new(cfg.encoder_config())?;

    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let config_path = out_dir.join("config.json");
    fs::write(&config_path, cfg.to_json()?).map_err(|e| Error::io(&config_path, e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?);

    let mut state = TrainState::<f32>::init(cfg, &encoder)?;
    let mut checkpoints = Vec::new();
    let mut save = |state: &TrainState<f32>| -> Result<()> {
        let path = checkpoint_path(out_dir, state.step);
        Checkpoint {
            step: state.step,
            encoder: encoder.cfg.clone(),
            pair: state.pair.clone(),
            velocity: state.optimizer.velocity.clone(),
        }
        .save(&path)?;
        checkpoints.push(path);
        Ok(())
    };
    save(&state)?;

    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let samples = prepare_batch(dataset, cfg, step)?;
        let out = train_step(&encoder, cfg, &mut state, &samples)?;
        let rec = StepRecord::from(&out);
        writeln!(metrics, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&metrics_path, e))?;
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!(
                "step {step}: l_total {:.4} l_image {:.4} l_contrast {:.4} l_affinity {:.4} skipped {}",
                rec.l_total,
                rec.l_image,
                rec.l_contrast,
                rec.l_affinity,
                rec.skipped
            );
        }
        records.push(rec);
        let done = state.step;
        if done == cfg.steps || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            save(&state)?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(RunSummary {
        dir: out_dir.to_path_buf(),
        records,
        checkpoints,
    })
}
