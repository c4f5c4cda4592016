//! Confidence-based early-exit inference for multi-exit transformer classifiers.
//!
//! A single encoder carries several exit heads of increasing depth. Each head
//! is calibrated with its own temperature and, at inference time, every
//! instance leaves through the first head whose calibrated confidence exceeds
//! a threshold. Hidden states computed for an earlier head are reused by the
//! later ones.

pub mod analysis;
pub mod autodiff;
pub mod calibration;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod multi_exit;
pub mod par;
pub mod routing;
pub mod tensor;
pub mod traces;
pub mod training;

pub use error::{Error, Result, StatsError};
pub use par::Execution;
