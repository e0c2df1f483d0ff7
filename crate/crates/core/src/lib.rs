//! Acoustic scene classification with a sub-spectral factorized CNN.
//!
//! The crate covers the whole pipeline: WAV decoding and log-mel features,
//! a small reverse-mode tensor engine, the per-band factorized model, the
//! cross-entropy + city-aware triplet objective, mixup / spec-augment,
//! Adam training with unseen-city evaluation, and a checkpoint format.

pub mod audio;
pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
