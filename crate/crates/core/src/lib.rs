//! Large-kernel depth-wise convolution toolkit.
//!
//! * [`conv`]: direct, cache-blocked and FFT convolution backends plus the
//!   input-gradient (transposed) convolution.
//! * [`bench`]: latency harness for stacks of depth-wise convolutions.
//! * [`reparam`]: BN folding, small-into-large kernel merging, dilated-kernel
//!   densification.
//! * [`model`]: RepLKNet graphs, inference, parameter/MAC counts, deploy-form
//!   conversion and the `RLKW` weight container.
//! * [`erf`]: effective receptive field maps and area ratios.
//!
//! With the default `parallel` feature, convolutions split work over
//! `(batch, channel)` planes on rayon's current thread pool. Disabling the
//! feature gives a purely sequential build with identical results.

pub mod bench;
pub mod conv;
pub mod erf;
mod error;
pub mod model;
mod par;
pub mod reparam;
pub mod tensor;

pub use error::{Error, Result};
pub use par::{parallel_enabled, with_threads, Pool};
