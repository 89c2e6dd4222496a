use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::Value;

use lgn::checkpoint::Checkpoint;
use lgn::data::{dataset_stats, generate, load_dataset, Dataset, Split, SyntheticConfig};
use lgn::eval::{ablation_report, evaluate_detailed, per_query_csv, MetricSpec};
use lgn::model::{grad_check_config, model_grad_check, LgnModel, ModelConfig, Variant};
use lgn::text::load_pretrained_embeddings;
use lgn::train::{train, vocab_from_samples, TrainConfig, TrainOutput};
use lgn::{Error, Result};

#[derive(Parser)]
#[command(name = "lgn", version, about = "Language-guided temporal moment retrieval")]
struct Cli {
    /// Override the seed of every config involved.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON with optional `model` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Frozen word vectors, one `word v1 .. v_dw` line per word.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// NMS threshold for Rank n > 1 (default 0.5).
        #[arg(long, conflicts_with = "no_nms")]
        nms: Option<f64>,
        #[arg(long)]
        no_nms: bool,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Write per-query predictions here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate the four ablation variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of the full model's loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 5e-5)]
        eps: f64,
    },
    /// Print dataset statistics.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    model: Option<Value>,
    #[serde(default)]
    train: TrainConfig,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Model and training configs; `d_v` defaults to the dataset's feature width.
fn run_config(path: Option<&Path>, data: &Dataset, seed: Option<u64>) -> Result<(ModelConfig, TrainConfig)> {
    let run: RunConfig = match path {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    let mut model_value = run.model.unwrap_or_else(|| Value::Object(Default::default()));
    if let (Value::Object(map), Some(v)) = (&mut model_value, data.videos.first()) {
        map.entry("d_v").or_insert_with(|| Value::from(v.feature_width()));
    }
    let mut model: ModelConfig = serde_json::from_value(model_value).map_err(|e| Error::Format {
        path: path.map(Path::to_path_buf).unwrap_or_default(),
        reason: e.to_string(),
    })?;
    let mut train = run.train;
    if let Some(s) = seed {
        model.seed = s;
        train.seed = s;
    }
    Ok((model, train))
}

fn require_split(data: &Dataset, split: Split) -> Result<Vec<lgn::data::Sample>> {
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::Config(format!("dataset has no {split:?} samples")));
    }
    Ok(samples)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let mut cfg: SyntheticConfig = match &config {
                Some(p) => read_json(p)?,
                None => SyntheticConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            generate(&cfg, &out)?;
            println!("wrote {} videos to {}", cfg.n_videos, out.display());
        }
        Command::Train {
            data,
            config,
            out,
            embeddings,
            resume,
        } => {
            let dataset = load_dataset(&data)?;
            let train_set = require_split(&dataset, Split::Train)?;
            let (model_cfg, train_cfg) = run_config(config.as_deref(), &dataset, cli.seed)?;
            let log_path = {
                let mut s = out.as_os_str().to_owned();
                s.push(".log.jsonl");
                PathBuf::from(s)
            };
            let output = TrainOutput {
                checkpoint: Some(out.clone()),
                log: Some(log_path),
            };
            let (model, log) = match resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    lgn::train::resume(&train_set, ckpt, &train_cfg, &output)?
                }
                None => {
                    let mut model = LgnModel::new(model_cfg, vocab_from_samples(&train_set))?;
                    if let Some(path) = embeddings {
                        let fallback = model.params().get(lgn::model::EMBEDDING).expect("embedding").tensor().clone();
                        let table = load_pretrained_embeddings(&path, model.vocab(), fallback)?;
                        model.set_pretrained_embeddings(table)?;
                    }
                    train(&train_set, model, &train_cfg, &output)?
                }
            };
            for row in &log {
                println!("epoch {:>3}  loss {:.6}  {} ms", row.epoch, row.mean_loss, row.wall_ms);
            }
            println!("saved {} ({} parameters)", out.display(), model.params().numel());
        }
        Command::Eval {
            data,
            ckpt,
            nms,
            no_nms,
            split,
            json,
            csv,
        } => {
            let dataset = load_dataset(&data)?;
            let samples = require_split(&dataset, split.into())?;
            let model = Checkpoint::load(&ckpt)?.model;
            let spec = MetricSpec {
                nms_iou: if no_nms { None } else { Some(nms.unwrap_or(0.5)) },
                ..MetricSpec::default()
            };
            let (report, results) = evaluate_detailed(&model, &samples, &spec)?;
            if json {
                println!("{}", report.to_json()?);
            } else {
                print!("{}", report.to_table());
            }
            if let Some(path) = csv {
                fs::write(&path, per_query_csv(&results)).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::Ablate {
            data,
            seeds,
            config,
            json,
        } => {
            let dataset = load_dataset(&data)?;
            let train_set = require_split(&dataset, Split::Train)?;
            let test_set = require_split(&dataset, Split::Test)?;
            let (model_cfg, train_cfg) = run_config(config.as_deref(), &dataset, cli.seed)?;
            let base = cli.seed.unwrap_or(0);
            let seed_list: Vec<u64> = (0..seeds).map(|i| base + i).collect();
            let table = ablation_report(&train_set, &test_set, &model_cfg, &train_cfg, &Variant::ALL, &seed_list)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&table)?);
            } else {
                print!("{}", table.to_table());
            }
        }
        Command::Gradcheck { seeds, eps } => {
            let base = cli.seed.unwrap_or(0);
            let mut worst = 0.0f64;
            for seed in base..base + seeds {
                let err = model_grad_check(&grad_check_config(seed), seed, eps)?;
                println!("seed {seed}: max relative error {err:.3e}");
                worst = worst.max(err);
            }
            println!("worst {worst:.3e} ({})", if worst <= 1e-4 { "ok" } else { "FAILED" });
            if worst > 1e-4 {
                return Err(Error::GradientCheck(worst));
            }
        }
        Command::Stats { data } => {
            let stats = dataset_stats(&load_dataset(&data)?)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
