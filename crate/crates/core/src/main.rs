//! Batch CLI: synthetic data generation, vocabulary construction,
//! pretraining, fine-tuning, evaluation, metrics-only scoring, and the
//! gradient verification suite.
//!
//! Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use multiway::checkpoint::Checkpoint;
use multiway::config::RunConfig;
use multiway::data::{gen_synthetic, load_dataset};
use multiway::error::{Error, Result};
use multiway::metrics::Taxonomy;
use multiway::text::Vocab;
use multiway::train;
use multiway::verify;

#[derive(Parser)]
#[command(
    name = "multiway",
    about = "Desk-scale multiway-transformer VQA pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints, traces, and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. --set d_model=16 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset (images + JSONL + taxonomy).
    GenSynth {
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a vocabulary file from a dataset's questions and answers.
    BuildVocab {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        max_size: usize,
    },
    /// Tokenizer training followed by masked data modeling.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Supervised answer-head training from a pretrain checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score a checkpoint on a dataset; prints a table, writes JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the dataset recorded in the checkpoint config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Defaults to the taxonomy recorded in the checkpoint config;
        /// WUPS columns are reported as absent when the file is missing.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Which side of the seeded split to score.
        #[arg(long, default_value = "all", value_parser = ["all", "train", "test"])]
        subset: String,
        /// Echo gold answers instead of model predictions.
        #[arg(long, default_value_t = false)]
        oracle: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Metrics-only scoring of a predictions file against gold answers.
    Score {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient verification suite.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn effective_config(common: &CommonArgs, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut config = match (&common.config, base) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(base)) => base,
        (None, None) => RunConfig::default(),
    };
    for kv in &common.set {
        config.apply_line(kv)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn load_taxonomy(path: &str) -> Option<Taxonomy> {
    if path.is_empty() {
        return None;
    }
    let p = Path::new(path);
    if !p.exists() {
        return None;
    }
    Taxonomy::load(p).ok()
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenSynth {
            n,
            image_size,
            seed,
            out,
        } => {
            ensure_out(&out)?;
            let jsonl = gen_synthetic(&out, n, image_size, seed)?;
            println!("wrote {} examples to {}", n, jsonl.display());
        }

        Command::BuildVocab {
            dataset,
            out,
            max_size,
        } => {
            let ds = load_dataset(&dataset)?;
            let vocab = Vocab::build(&multiway::data::corpus_lines(&ds), max_size)?;
            vocab.save(&out)?;
            println!("wrote {} tokens to {}", vocab.len(), out.display());
        }

        Command::Pretrain { common } => {
            let config = effective_config(&common, None)?;
            config.validate()?;
            if config.dataset.is_empty() {
                return Err(Error::Config(
                    "pretrain needs a dataset path (--set dataset=...)".into(),
                ));
            }
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            ensure_out(&out)?;
            let data = train::load_data(Path::new(&config.dataset), config.image_size)?;
            let vocab = train::vocab_for(&config, &data.dataset)?;
            let result = train::pretrain(&config, &data, &vocab, Some(&out))?;
            let ckpt_path = out.join("pretrain.ckpt");
            result.checkpoint.save(&ckpt_path)?;
            println!(
                "pretrain done: {} vqkd steps, {} mdm steps, checkpoint {}",
                result.vqkd_trace.len(),
                result.mdm_trace.len(),
                ckpt_path.display()
            );
        }

        Command::Finetune { checkpoint, common } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let config = effective_config(&common, Some(ckpt.config.clone()))?;
            config.validate()?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            ensure_out(&out)?;
            let data = train::load_data(Path::new(&config.dataset), config.image_size)?;
            let result = train::finetune(&config, &ckpt, &data, Some(&out))?;
            let ckpt_path = out.join("finetune.ckpt");
            result.checkpoint.save(&ckpt_path)?;
            let last = result.trace.last().cloned().unwrap_or_default();
            println!(
                "finetune done: {} epochs, last epoch [{}], checkpoint {}",
                result.trace.len(),
                last,
                ckpt_path.display()
            );
        }

        Command::Evaluate {
            checkpoint,
            dataset,
            taxonomy,
            subset,
            oracle,
            common,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let config = effective_config(&common, Some(ckpt.config.clone()))?;
            let dataset_path = dataset
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| config.dataset.clone());
            if dataset_path.is_empty() {
                return Err(Error::Config("evaluate needs a dataset".into()));
            }
            let data = train::load_data(Path::new(&dataset_path), config.image_size)?;
            let tax_path = taxonomy
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| config.taxonomy.clone());
            let tax = load_taxonomy(&tax_path);

            let n = data.dataset.pairs.len();
            let indices = match subset.as_str() {
                "train" => train::resolve_split(&config, n)?.0,
                "test" => train::resolve_split(&config, n)?.1,
                _ => train::all_indices(&data.dataset.pairs),
            };
            let output = train::evaluate(&ckpt, &data, &indices, tax.as_ref(), oracle)?;
            print!("{}", output.to_table());
            if let Some(out) = &common.out {
                ensure_out(out)?;
                let json_path = out.join("metrics.json");
                std::fs::write(&json_path, output.to_json())
                    .map_err(|e| Error::io(json_path.display().to_string(), e))?;
                let preds_path = out.join("predictions.jsonl");
                let mut lines = String::new();
                for (id, prediction, _) in &output.predictions {
                    lines.push_str(&format!(
                        "{}\n",
                        serde_json::json!({ "id": id, "prediction": prediction })
                    ));
                }
                std::fs::write(&preds_path, lines)
                    .map_err(|e| Error::io(preds_path.display().to_string(), e))?;
            }
        }

        Command::Score {
            gold,
            predictions,
            taxonomy,
            out,
        } => {
            let tax = taxonomy
                .map(|p| p.display().to_string())
                .and_then(|p| load_taxonomy(&p));
            let report = train::score_files(&gold, &predictions, tax.as_ref())?;
            let output = train::EvalOutput {
                report,
                per_type: Default::default(),
                predictions: Vec::new(),
            };
            print!("{}", output.to_table());
            if let Some(out) = out {
                ensure_out(&out)?;
                let json_path = out.join("metrics.json");
                std::fs::write(&json_path, output.to_json())
                    .map_err(|e| Error::io(json_path.display().to_string(), e))?;
            }
        }

        Command::GradCheck { seeds } => {
            let entries = verify::run_suite(seeds)?;
            let mut all_pass = true;
            for e in &entries {
                println!(
                    "{} {:28} seeds={} max_rel_err={:.3e}",
                    if e.pass { "PASS" } else { "FAIL" },
                    e.name,
                    e.seeds,
                    e.max_rel_err
                );
                all_pass &= e.pass;
            }
            if !all_pass {
                return Err(Error::Numeric(
                    "gradient verification suite failed".into(),
                ));
            }
            println!("all {} checks passed", entries.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
