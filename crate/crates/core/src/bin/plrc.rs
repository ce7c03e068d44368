use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use plrc::config::TrainConfig;
use plrc::data::{gen_synthetic_dataset, load_dataset, DatasetKind, SyntheticParams};
use plrc::encoder::Encoder;
use plrc::evaluation::{
    affinity_map, encode_image, evaluate_jaccard, export_visualization, kmeans_regions, snapped_centroid, Overlay,
};
use plrc::sweep::{run_sweep, SweepSpec};
use plrc::training::{run_pretraining, Checkpoint};

#[derive(Parser)]
#[command(name = "plrc", version, about = "Point-level region contrast pre-training")]
#[command(after_help = TrainConfig::help_table())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value config file (`key = value` per line)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, where noted)
    #[arg(long)]
    out: PathBuf,
    /// Extra `key=value` overrides applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// synthetic | image_folder
    #[arg(long, default_value = "synthetic")]
    kind: DatasetKind,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset with ground-truth masks.
    ///
    /// Config keys: count, image_size, min_shapes, max_shapes, seed.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train an encoder pair and write a run directory.
    #[command(after_help = TrainConfig::help_table())]
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Score a checkpoint by mean Jaccard of affinity masks; writes a JSON report.
    #[command(after_help = TrainConfig::help_table())]
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint file
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export an affinity map (or k-means regions) of one image as a PNG.
    #[command(after_help = TrainConfig::help_table())]
    Visualize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Position of the image in the dataset
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Picked point `row,col` on the feature grid; defaults to the
        /// centre of the first object, or of the map
        #[arg(long)]
        point: Option<String>,
        /// Show k-means regions with this many clusters instead
        #[arg(long)]
        kmeans: Option<usize>,
    },
    /// Train and score one run per value of a parameter.
    #[command(after_help = TrainConfig::help_table())]
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// alpha | beta | tau_s | tau_t | tau_pair | P | n | R | strategy | region_source
        #[arg(long)]
        param: String,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        /// Separate evaluation dataset (defaults to the training data)
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
}

fn train_config(common: &Common) -> plrc::Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_kv_file(p)?,
        None => TrainConfig::default(),
    };
    let mut text = String::new();
    for o in &common.overrides {
        text.push_str(o);
        text.push('\n');
    }
    if let Some(seed) = common.seed {
        text.push_str(&format!("seed = {seed}\n"));
    }
    cfg.apply_kv_str(&text)?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(Encoder, Checkpoint<f32>)> {
    let ckpt = Checkpoint::<f32>::load(path)?;
    Ok((Encoder::new(ckpt.encoder.clone())?, ckpt))
}

fn parse_point(s: &str) -> anyhow::Result<(usize, usize)> {
    let (r, c) = s.split_once(',').context("point must be `row,col`")?;
    Ok((r.trim().parse()?, c.trim().parse()?))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let mut params = SyntheticParams::default();
            let mut text = match &common.config {
                Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                None => String::new(),
            };
            for o in &common.overrides {
                text.push('\n');
                text.push_str(o);
            }
            if let Some(seed) = common.seed {
                text.push_str(&format!("\nseed = {seed}"));
            }
            params.apply_kv_str(&text)?;
            let entries = gen_synthetic_dataset(&params, &common.out)?;
            println!("wrote {} images to {}", entries.len(), common.out.display());
        }
        Command::Pretrain { common, data } => {
            let cfg = train_config(&common)?;
            let dataset = load_dataset(&data.data, data.kind)?;
            let summary = run_pretraining(&cfg, &dataset, &common.out)?;
            match summary.records.last() {
                Some(r) => println!(
                    "finished {} steps, final l_total {:.4}",
                    summary.records.len(),
                    r.l_total
                ),
                None => println!("no steps run"),
            }
            println!("checkpoint {}", summary.final_checkpoint().display());
        }
        Command::Eval {
            common,
            data,
            checkpoint,
        } => {
            let cfg = train_config(&common)?;
            let dataset = load_dataset(&data.data, data.kind)?;
            let (encoder, ckpt) = load_checkpoint(&checkpoint)?;
            let id = checkpoint.display().to_string();
            let report = evaluate_jaccard(&encoder, &ckpt.pair.base, &dataset, cfg.keep_fraction, &id)?;
            let path = if common.out.extension().is_some_and(|e| e == "json") {
                common.out.clone()
            } else {
                fs::create_dir_all(&common.out)?;
                common.out.join("eval.json")
            };
            fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            println!(
                "mean Jaccard {:.4} over {} objects -> {}",
                report.mean_jaccard,
                report.objects.len(),
                path.display()
            );
        }
        Command::Visualize {
            common,
            data,
            checkpoint,
            index,
            point,
            kmeans,
        } => {
            let cfg = train_config(&common)?;
            let dataset = load_dataset(&data.data, data.kind)?;
            let Some(item) = dataset.items.get(index) else {
                bail!("index {index} out of range for {} images", dataset.len());
            };
            let (encoder, ckpt) = load_checkpoint(&checkpoint)?;
            let dense = encode_image(&encoder, &ckpt.pair.base, &item.image)?;
            let res = dense.resolution();
            let path = if common.out.extension().is_some_and(|e| e == "png") {
                common.out.clone()
            } else {
                fs::create_dir_all(&common.out)?;
                common.out.join(format!("{}.png", item.id))
            };
            if let Some(k) = kmeans {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let km = kmeans_regions(&dense, k, 50, &mut rng)?;
                export_visualization(&item.image, Overlay::Labels(&km.labels), &path)?;
            } else {
                let (h, w, _) = item.image.dim();
                let p = match point {
                    Some(s) => parse_point(&s)?,
                    None => item
                        .masks
                        .first()
                        .and_then(snapped_centroid)
                        .map(|(y, x)| (y * res / h, x * res / w))
                        .unwrap_or((res / 2, res / 2)),
                };
                let map = affinity_map(&dense, p)?;
                export_visualization(&item.image, Overlay::Affinity(&map), &path)?;
            }
            println!("wrote {}", path.display());
        }
        Command::Sweep {
            common,
            data,
            param,
            values,
            eval_data,
        } => {
            let cfg = train_config(&common)?;
            let spec = SweepSpec::new(&param, values, cfg)?;
            let train = load_dataset(&data.data, data.kind)?;
            let eval = match eval_data {
                Some(p) => load_dataset(&p, DatasetKind::Synthetic)?,
                None => train.clone(),
            };
            let report = run_sweep(&spec, &train, &eval, &common.out)?;
            for row in &report.rows {
                match (row.mean_jaccard, &row.error) {
                    (Some(j), _) => println!("{}={}: mean Jaccard {j:.4}", row.param, row.value),
                    (None, Some(e)) => println!("{}={}: failed: {e}", row.param, row.value),
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<plrc::Error>() {
                Some(plrc::Error::Config { .. }) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
