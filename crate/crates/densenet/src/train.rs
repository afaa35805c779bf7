//! The training loop.
//!
//! Each step runs forward, binary cross-entropy, backward, one Adam update
//! and a gradient reset. The training loss of every batch is logged; the
//! held-out loss is logged once per epoch unless a batch cadence is set.
//! Every random choice derives from the schedule seed, so a run is a pure
//! function of its configuration, and a run resumed from a checkpoint
//! follows the same trajectory as one that never stopped.

use std::fmt;
use std::path::{Path, PathBuf};

use densenet_core::arch::{Model, ModelSpec};
use densenet_core::data::{batches, split, AugmentSpec, Dataset};
use densenet_core::optim::{adam_step, zero_grads, AdamHyper, AdamState};
use densenet_core::{rng, Mode, Tape, Tensor};

use crate::checkpoint::{Checkpoint, Progress, Schedule};
use crate::error::{io_err, Error, Result};
use crate::{eval, io};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_HOLDOUT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Validation,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Validation => "validation",
        })
    }
}

/// One loss measurement. `batch_index` is the number of optimizer steps
/// taken when it was recorded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub batch_index: u64,
    pub phase: Phase,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

impl LossLog {
    pub fn push(&mut self, batch_index: u64, phase: Phase, loss: f64) {
        self.rows.push(LossRow { batch_index, phase, loss });
    }

    pub fn losses(&self, phase: Phase) -> Vec<f64> {
        self.rows.iter().filter(|r| r.phase == phase).map(|r| r.loss).collect()
    }

    /// CSV with header `batch_index,split,loss`. Losses are written in the
    /// shortest form that parses back to the same value.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["batch_index", "split", "loss"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([r.batch_index.to_string(), r.phase.to_string(), r.loss.to_string()])
                .expect("in-memory write");
        }
        w.into_inner().expect("in-memory write")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

/// When to stop and when to validate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunLimits {
    pub epochs: u64,
    /// Stop once this many optimizer steps have been taken in total.
    pub stop_after: Option<u64>,
    /// Validate every this many steps instead of at the end of each epoch.
    pub validate_every: Option<u64>,
}

impl RunLimits {
    pub fn epochs(epochs: u64) -> Self {
        Self {
            epochs,
            stop_after: None,
            validate_every: None,
        }
    }
}

/// Fresh training state: initialized weights, zeroed optimizer moments.
pub fn initial_state(spec: ModelSpec, hyper: AdamHyper, schedule: Schedule) -> Result<Checkpoint> {
    hyper.validate()?;
    if schedule.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&schedule.holdout) {
        return Err(Error::Config(format!("holdout fraction {} outside [0, 1)", schedule.holdout)));
    }
    let model = Model::build(spec, rng::derive(schedule.seed, 4))?;
    Ok(Checkpoint {
        optimizer: AdamState::new(model.params()),
        model,
        hyper,
        schedule,
        progress: Progress::default(),
    })
}

/// Splits off the held-out fold. A zero holdout trains on everything.
pub fn holdout_split(dataset: &Dataset, schedule: &Schedule) -> Result<(Dataset, Dataset)> {
    if schedule.holdout == 0.0 {
        return Ok((dataset.clone(), Dataset::default()));
    }
    Ok(split(dataset, 1.0 - schedule.holdout, rng::derive(schedule.seed, 3))?)
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    rng::derive(rng::derive(seed, 2), epoch)
}

/// Mean binary cross-entropy of `scorer` over `dataset`.
pub fn dataset_loss(model: &Model, dataset: &Dataset) -> Result<f64> {
    let scores = eval::score_dataset(model, dataset)?;
    let labels: Vec<f64> = dataset.samples().iter().map(|s| s.label as f64).collect();
    let mut tape = Tape::new();
    let n = scores.len();
    let s = tape.constant(Tensor::new([n, 1], scores)?);
    let loss = tape.bce_loss(s, &labels)?;
    Ok(tape.value(loss).data()[0])
}

/// Continues training from `state` until `limits` is reached, appending to
/// `log`.
pub fn run(state: &mut Checkpoint, train: &Dataset, heldout: &Dataset, limits: &RunLimits, log: &mut LossLog) -> Result<()> {
    let schedule = state.schedule;
    let spec = schedule.augment.then(AugmentSpec::standard);
    let done = |p: &Progress| limits.stop_after.is_some_and(|n| p.batches_done >= n);
    if train.is_empty() && state.progress.epoch < limits.epochs {
        return Err(Error::Config("training set is empty".into()));
    }
    while state.progress.epoch < limits.epochs && !done(&state.progress) {
        let mut it = batches(train, schedule.batch_size, true, epoch_seed(schedule.seed, state.progress.epoch), spec)?;
        it.seek(state.progress.batch as usize);
        for batch in it {
            if done(&state.progress) {
                return Ok(());
            }
            let loss = step(state, &batch.images, &batch.labels)?;
            state.progress.batch += 1;
            state.progress.batches_done += 1;
            log.push(state.progress.batches_done, Phase::Train, loss);
            if limits.validate_every.is_some_and(|k| state.progress.batches_done.is_multiple_of(k)) {
                validate(state, heldout, log)?;
            }
        }
        state.progress.epoch += 1;
        state.progress.batch = 0;
        if limits.validate_every.is_none() {
            validate(state, heldout, log)?;
        }
    }
    Ok(())
}

fn validate(state: &Checkpoint, heldout: &Dataset, log: &mut LossLog) -> Result<()> {
    if !heldout.is_empty() {
        log.push(state.progress.batches_done, Phase::Validation, dataset_loss(&state.model, heldout)?);
    }
    Ok(())
}

/// One optimizer step on a batch; returns the batch loss.
pub fn step(state: &mut Checkpoint, images: &Tensor, labels: &[f64]) -> Result<f64> {
    let model = &mut state.model;
    model.set_mode(Mode::Train);
    let mut tape = Tape::new();
    let input = tape.constant(images.clone());
    let forward = model.forward(&mut tape, input)?;
    let loss = tape.bce_loss(forward.scores, labels)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch_index: state.progress.batches_done,
        });
    }
    tape.backward(loss)?;
    model.collect_grads(&tape, &forward)?;
    adam_step(model.params_mut(), &mut state.optimizer, &state.hyper)?;
    zero_grads(model.params_mut());
    Ok(value)
}

/// Everything the `train` command needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: String,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: bool,
    pub data_dir: PathBuf,
    pub labels: PathBuf,
    pub out: PathBuf,
    pub loss_log: PathBuf,
    pub holdout: f64,
    pub validate_every: Option<u64>,
    pub stop_after: Option<u64>,
    /// Continue from this checkpoint instead of initializing.
    pub resume: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(preset: &str, data_dir: impl Into<PathBuf>, labels: impl Into<PathBuf>, out: impl Into<PathBuf>, loss_log: impl Into<PathBuf>) -> Self {
        Self {
            preset: preset.to_string(),
            epochs: 1,
            batch_size: densenet_core::data::DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LR,
            seed: 0,
            augment: true,
            data_dir: data_dir.into(),
            labels: labels.into(),
            out: out.into(),
            loss_log: loss_log.into(),
            holdout: DEFAULT_HOLDOUT,
            validate_every: None,
            stop_after: None,
            resume: None,
        }
    }

    fn schedule(&self) -> Schedule {
        Schedule {
            seed: self.seed,
            batch_size: self.batch_size,
            augment: self.augment,
            holdout: self.holdout,
        }
    }

    fn limits(&self) -> RunLimits {
        RunLimits {
            epochs: self.epochs,
            stop_after: self.stop_after,
            validate_every: self.validate_every,
        }
    }
}

/// Loads and splits the data, trains, then writes the checkpoint and the
/// loss log. A resumed run logs only the steps it takes itself.
pub fn train(config: &TrainConfig) -> Result<(Checkpoint, LossLog)> {
    let spec = ModelSpec::preset(&config.preset).ok_or_else(|| Error::Config(format!("unknown preset `{}`", config.preset)))?;
    let mut state = match &config.resume {
        None => initial_state(spec, AdamHyper::with_lr(config.lr), config.schedule())?,
        Some(path) => {
            let state = Checkpoint::load(path)?;
            if state.schedule != config.schedule() || state.hyper.lr != config.lr || state.model.spec() != &spec {
                return Err(Error::Config(format!(
                    "{}: preset, seed, batch size, learning rate, augmentation and holdout must match the checkpoint",
                    path.display()
                )));
            }
            state
        }
    };
    let dataset = io::load_dataset(&config.data_dir, &config.labels)?;
    let (train_set, heldout) = holdout_split(&dataset, &state.schedule)?;
    let mut log = LossLog::default();
    run(&mut state, &train_set, &heldout, &config.limits(), &mut log)?;
    state.save(&config.out)?;
    log.write(&config.loss_log)?;
    Ok((state, log))
}
