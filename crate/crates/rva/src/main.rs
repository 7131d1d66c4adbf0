//! Command-line surface: data generation, training, evaluation,
//! gradient checking and trace export.
//!
//! Exit codes: 0 success, 1 validation error, 2 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rva::config::RunConfig;
use rva::eval;
use rva::gradcheck;
use rva::synth;
use rva::train::{self, TrainError, TrainState};

#[derive(Parser)]
#[command(name = "rva", about = "Recursive visual attention on synthetic grounded dialogs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dialog dataset.
    GenData {
        /// Master seed for the dataset (episode i derives its own).
        #[arg(long)]
        seed: u64,
        /// Number of episodes.
        #[arg(long)]
        episodes: usize,
        /// Run configuration file (key = value).
        #[arg(long)]
        config: PathBuf,
        /// Output path (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the final checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset path; overrides the config's `data` key.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for checkpoint and loss curve.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint: metrics report, prediction dump, traces.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics report output path.
        #[arg(long)]
        report: PathBuf,
        /// Prediction dump output path (JSON lines).
        #[arg(long)]
        dump: PathBuf,
        /// Optional directory for per-episode DOT traces.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Finite-difference check of the full model at toy dimensions.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Export one episode's recursion trace.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Episode index.
        #[arg(long)]
        episode: usize,
        /// DOT output path.
        #[arg(long)]
        dot: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(AppError::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(2)
        }
    }
}

enum AppError {
    Validation(String),
    Numeric(String),
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => AppError::Numeric(e.to_string()),
            other => AppError::Validation(other.to_string()),
        }
    }
}

fn validation<E: std::fmt::Display>(e: E) -> AppError {
    AppError::Validation(e.to_string())
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<synth::Dataset, AppError> {
    let ds = synth::deserialize(path).map_err(validation)?;
    if ds.candidates != cfg.candidates || ds.d_v != cfg.d_v {
        return Err(AppError::Validation(format!(
            "dataset was generated with candidates={} d_v={}, config says candidates={} d_v={}",
            ds.candidates, ds.d_v, cfg.candidates, cfg.d_v
        )));
    }
    Ok(ds)
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::GenData {
            seed,
            episodes,
            config,
            out,
        } => {
            let cfg = RunConfig::load(&config).map_err(validation)?;
            let gen = cfg.gen_config();
            let eps = synth::generate_dataset(seed, episodes, &gen).map_err(validation)?;
            synth::serialize(&eps, &gen, &out).map_err(validation)?;
            println!("wrote {} episodes to {}", eps.len(), out.display());
            Ok(())
        }
        Command::Train { config, data, out_dir } => {
            let cfg = RunConfig::load(&config).map_err(validation)?;
            let data_path = data.unwrap_or_else(|| PathBuf::from(&cfg.data));
            if data_path.as_os_str().is_empty() {
                return Err(AppError::Validation(
                    "no dataset: pass --data or set the config's data key".into(),
                ));
            }
            let ds = load_dataset(&data_path, &cfg)?;
            let vocab = synth::dataset_vocab(&ds.episodes);
            std::fs::create_dir_all(&out_dir).map_err(validation)?;

            let mut state = TrainState::new(&cfg, &vocab);
            train::train(&mut state, &ds.episodes, |log| {
                println!(
                    "epoch {} lr {:.2e} mean_loss {:.6}",
                    log.epoch, log.lr, log.mean_loss
                );
            })?;
            let ck = out_dir.join("model.rva");
            train::save_checkpoint(&ck, &state)?;
            let curve: String = state
                .loss_curve
                .iter()
                .enumerate()
                .map(|(e, l)| format!("{e} {l:.9}\n"))
                .collect();
            std::fs::write(out_dir.join("loss_curve.txt"), curve).map_err(validation)?;
            println!("checkpoint {}", ck.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            report,
            dump,
            traces,
        } => {
            let state = train::load_checkpoint(&checkpoint)?;
            let cfg = &state.config;
            let ds = load_dataset(&data, cfg)?;
            let ev = eval::evaluate(cfg, &state.params, &state.vocab, &ds.episodes)
                .map_err(|e| AppError::Numeric(e.to_string()))?;
            let mut text = ev.report.to_text();
            text.push_str(&ev.diagnostics.to_text());
            std::fs::write(&report, &text).map_err(validation)?;
            std::fs::write(&dump, eval::dump_predictions(&ev.predictions)).map_err(validation)?;
            if let Some(dir) = traces {
                std::fs::create_dir_all(&dir).map_err(validation)?;
                for (i, tr) in ev.traces.iter().enumerate() {
                    std::fs::write(dir.join(format!("episode_{i}.dot")), tr.to_dot(i))
                        .map_err(validation)?;
                }
            }
            print!("{text}");
            Ok(())
        }
        Command::Gradcheck { config } => {
            let cfg = RunConfig::load(&config).map_err(validation)?;
            let report = gradcheck::run(&cfg).map_err(|e| AppError::Numeric(e.to_string()))?;
            print!("{}", report.to_text());
            if report.passed() {
                Ok(())
            } else {
                Err(AppError::Numeric(format!(
                    "max relative error {:.3e} exceeds {:.1e}",
                    report.worst, report.tolerance
                )))
            }
        }
        Command::Trace {
            checkpoint,
            data,
            episode,
            dot,
        } => {
            let state = train::load_checkpoint(&checkpoint)?;
            let cfg = &state.config;
            let ds = load_dataset(&data, cfg)?;
            if episode >= ds.episodes.len() {
                return Err(AppError::Validation(format!(
                    "episode {episode} out of range ({} episodes)",
                    ds.episodes.len()
                )));
            }
            let ev = eval::evaluate(
                cfg,
                &state.params,
                &state.vocab,
                std::slice::from_ref(&ds.episodes[episode]),
            )
            .map_err(|e| AppError::Numeric(e.to_string()))?;
            std::fs::write(&dot, ev.traces[0].to_dot(episode)).map_err(validation)?;
            println!("{}", ev.traces[0].to_text());
            Ok(())
        }
    }
}
