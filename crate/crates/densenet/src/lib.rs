//! Desk-scale training and evaluation on top of [`densenet_core`]: PNG and CSV
//! ingestion, the training loop with loss logging, checkpoints, plain and
//! test-time-augmented evaluation, and report files.

pub mod checkpoint;
mod error;
pub mod eval;
pub mod io;
pub mod report;
pub mod train;

pub use checkpoint::{Checkpoint, Progress, Schedule};
pub use error::{Error, Result};
pub use eval::{evaluate, evaluate_tta, tta_predict, Scorer};
pub use train::{LossLog, TrainConfig};
