//! Cue-driven priming of convolutional networks.
//!
//! A frozen base network (a grid detector or a small FCN-style segmenter)
//! is modulated by a parallel branch that maps a class cue to per-channel
//! residual gains on selected feature planes. The crate also provides the
//! cue-based pruning baselines, training loops, a synthetic shapes
//! dataset, and the evaluation protocols used to compare free viewing,
//! pruning and priming.

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nets;
pub mod priming;
pub mod pruning;
pub mod report;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorArchive, Var};
