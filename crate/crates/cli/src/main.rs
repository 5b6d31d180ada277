use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aag::augment::{make_views, ThirdView};
use aag::data::Split;
use aag::eval::{knn_evaluate, linear_evaluate, LinearEvalConfig, DEFAULT_K, DEFAULT_KNN_TEMPERATURE};
use aag::gradcheck::run_gradcheck;
use aag::model::{Checkpoint, EncoderState};
use aag::seed;
use aag::train::{checkpoint_normalizer, train, DatasetConfig, ExperimentConfig, TrainEvent, ViewScheme, PRESETS};
use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

/// Three-view contrastive representation learning.
#[derive(Parser, Debug)]
#[command(name = "aag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an encoder from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Ablation preset applied on top of the config (repeatable).
        #[arg(long)]
        preset: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Weighted kNN accuracy of a checkpoint.
    KnnEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A CIFAR-10 directory or a dataset JSON file.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_KNN_TEMPERATURE)]
        temperature: f64,
    },
    /// Linear-probe accuracy of a checkpoint.
    LinearEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write augmented views of the first training images as PPM files.
    DumpAug {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(EncoderState, aag::data::Normalizer)> {
    let ck = Checkpoint::load(path)?;
    let state = ck.encoder_state()?;
    let normalizer = checkpoint_normalizer(&ck)?;
    Ok((state, normalizer))
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Train {
            config,
            preset,
            seed,
            epochs,
            output_dir,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            for p in &preset {
                cfg.apply_preset(p)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            let outcome = train(&cfg, &mut |event| match event {
                TrainEvent::Epoch { epoch, mean_loss, lr } => {
                    eprintln!("epoch {:>4}  loss {mean_loss:.4}  lr {lr:.5}", epoch + 1)
                }
                TrainEvent::Eval(r) => eprintln!("eval  {:>4}  knn top-1 {:.4}", r.epoch, r.knn.top1_accuracy),
            })?;
            emit(&serde_json::to_string_pretty(&outcome.summary)?);
            eprintln!("wrote {}", cfg.output_dir.display());
        }
        Command::KnnEval {
            checkpoint,
            dataset,
            k,
            temperature,
        } => {
            let (state, normalizer) = load_checkpoint(&checkpoint)?;
            let data = DatasetConfig::from_path(&dataset)?;
            let train_set = data.load(Split::Train)?;
            let test_set = data.load(Split::Test)?;
            let r = knn_evaluate(&state, &normalizer, &train_set, &test_set, k, temperature)?;
            emit(&serde_json::to_string_pretty(&r)?);
        }
        Command::LinearEval {
            checkpoint,
            dataset,
            epochs,
            seed,
        } => {
            let (state, normalizer) = load_checkpoint(&checkpoint)?;
            let data = DatasetConfig::from_path(&dataset)?;
            let cfg = LinearEvalConfig {
                epochs,
                seed,
                ..LinearEvalConfig::default()
            };
            let r = linear_evaluate(
                &state,
                &normalizer,
                &data.load(Split::Train)?,
                &data.load(Split::Test)?,
                &cfg,
            )?;
            emit(&serde_json::to_string_pretty(&r)?);
        }
        Command::Gradcheck { seed } => {
            let report = run_gradcheck(seed)?;
            emit(&report.to_string());
            if !report.passed() {
                let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
                bail!("gradient check failed: {}", names.join(", "));
            }
        }
        Command::DumpAug {
            config,
            count,
            out,
            seed,
        } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            cfg.validate()?;
            let data = cfg.dataset.load(Split::Train)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let third = match cfg.view_scheme {
                ViewScheme::ThreeView => ThirdView::Aux(&cfg.aux),
                ViewScheme::ThreeBasic => ThirdView::Basic,
                ViewScheme::TwoBasic => ThirdView::None,
            };
            let mut rng = seed::rng(seed.unwrap_or(cfg.seed), &[]);
            for (i, img) in data.images().iter().take(count).enumerate() {
                let (a, b, c) = make_views(img, &cfg.basic, third, &mut rng)?;
                img.write_ppm(&out.join(format!("{i:04}_source.ppm")))?;
                a.write_ppm(&out.join(format!("{i:04}_core1.ppm")))?;
                b.write_ppm(&out.join(format!("{i:04}_core2.ppm")))?;
                if let Some(c) = c {
                    c.write_ppm(&out.join(format!("{i:04}_third.ppm")))?;
                }
            }
            eprintln!("wrote {} images to {}", count.min(data.len()), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Command::Train { preset, .. } = &cli.command {
        if let Some(bad) = preset.iter().find(|p| !PRESETS.contains(&p.as_str())) {
            eprintln!("error: unknown preset {bad:?}; valid presets: {}", PRESETS.join(", "));
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
