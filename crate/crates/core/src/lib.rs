//! Speech separation and enhancement recast as classification over discrete
//! acoustic units, followed by resynthesis.
//!
//! The flow is: waveform → frame features → nearest-centroid unit ids
//! ([`discretizer`]); mixture → per-stream unit posteriors trained with
//! utterance-level permutation-invariant cross-entropy ([`pseudo_asr`]);
//! unit ids → waveform ([`vocoder`]); optional signal-level refinement
//! conditioned on the mixture and the resynthesized estimate ([`refiner`]).
//! [`metrics`] holds the evaluation suite and [`pipeline`] the orchestration.

pub mod assignment;
pub mod data;
pub mod discretizer;
pub mod error;
pub mod metrics;
pub mod parallel;
pub mod pipeline;
pub mod pseudo_asr;
pub mod refiner;
pub mod signal;
pub mod train;
pub mod vocoder;

pub use error::{Error, Result};
pub use parallel::Execution;
