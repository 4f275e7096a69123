//! Soft spiking neural units (sSNU, sSNU-a, sSNU-o) and LSTM baselines
//! inside a recurrent neural network transducer.
//!
//! - [`numerics`]: tensors, recorded and eager evaluation, gradient checks
//! - [`cells`]: single-step recurrent units and uni/bidirectional layers
//! - [`transducer`]: encoder, prediction and joint networks, alignment
//!   loss, greedy and beam decoding
//! - [`training`]: AdamW, one-cycle schedule, clipping, dropout, `fit`
//! - [`profiler`]: exact parameter/multiplication counts and decode timing
//! - [`dataio`]: synthetic transduction task, feature ops, dataset and
//!   checkpoint files

pub mod cells;
pub mod dataio;
mod error;
pub mod numerics;
pub mod profiler;
pub mod training;
pub mod transducer;

pub use error::{Error, Result};
