//! Dense convolutional network engine.
//!
//! Everything in this crate is `no_std` (it needs `alloc`): an n-dimensional
//! [`Tensor`], a reverse-mode [`Tape`] with the differentiable operations a
//! DenseNet needs, the dense/transition/residual building blocks, Adam,
//! classification metrics, and the pure parts of the data pipeline
//! (splitting, augmentation, batching). File formats, PNG decoding and the
//! command line live in the `densenet` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod arch;
pub mod data;
mod error;
pub mod params;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod tape;
mod tensor;

pub use error::{Error, Result};
pub use tape::{ConvParams, Mode, PoolKind, RunningStats, Tape, Var};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
