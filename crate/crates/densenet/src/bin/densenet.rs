use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use densenet::checkpoint::Checkpoint;
use densenet::eval::{self, DEFAULT_VIEWS};
use densenet::{io, report, train, TrainConfig};
use densenet_core::data::AugmentSpec;
use densenet_core::Tensor;

#[derive(Parser, Debug)]
#[command(name = "densenet", about = "Train and evaluate dense-connectivity CNNs on image patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on an 80/20 split of a labelled patch directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long)]
        epochs: u64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.0001)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        augment: Switch,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_log: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many batches in total.
        #[arg(long)]
        max_batches: Option<u64>,
    },
    /// Score a labelled dataset and write the summary row and ROC curve.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        roc: PathBuf,
        #[command(flatten)]
        tta: Tta,
    },
    /// Score a single PNG.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        tta: Tta,
    },
}

#[derive(clap::Args, Debug)]
struct Tta {
    /// Average over flipped and rotated views.
    #[arg(long)]
    tta: bool,
    #[arg(long, default_value_t = DEFAULT_VIEWS)]
    views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Tiny,
    #[value(name = "densenet201-like")]
    Densenet201Like,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            data,
            labels,
            preset,
            epochs,
            batch_size,
            lr,
            seed,
            augment,
            out,
            loss_log,
            resume,
            max_batches,
        } => {
            let preset = match preset {
                Preset::Tiny => "tiny",
                Preset::Densenet201Like => "densenet201-like",
            };
            let config = TrainConfig {
                epochs,
                batch_size,
                lr,
                seed,
                augment: augment == Switch::On,
                resume,
                stop_after: max_batches,
                ..TrainConfig::new(preset, data, labels, out, loss_log)
            };
            let (state, log) = train::train(&config)?;
            let last = log.losses(train::Phase::Train).last().copied();
            match last {
                Some(loss) => println!("batches={} loss={loss}", state.progress.batches_done),
                None => println!("batches={}", state.progress.batches_done),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            labels,
            report: report_path,
            roc,
            tta,
        } => {
            let state = load(&checkpoint)?;
            let dataset = io::load_dataset(&data, &labels)?;
            let mut name = state.model.spec().name.clone();
            let metrics = if tta.tta {
                name.push_str("(TTA)");
                eval::evaluate_tta(&state.model, &dataset, &AugmentSpec::dihedral(), tta.views, tta.seed)?
            } else {
                eval::evaluate(&state.model, &dataset)?
            };
            report::write_report(&report_path, &name, &metrics)?;
            report::write_roc(&roc, &metrics)?;
            let auc = metrics.auc_roc.map_or_else(|| "absent".to_string(), |a| a.to_string());
            println!("auc_roc={auc} accuracy={} n={}", metrics.accuracy, metrics.n_samples);
        }
        Command::Predict { checkpoint, image, tta } => {
            let state = load(&checkpoint)?;
            let img = io::read_png(&image)?;
            let score = if tta.tta {
                eval::tta_predict(&state.model, &img, &AugmentSpec::dihedral(), tta.views, tta.seed)?
            } else {
                let batch = Tensor::stack(&[img])?;
                state.model.predict(&batch)?[0]
            };
            println!("score={score}");
        }
    }
    Ok(())
}

fn load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}
