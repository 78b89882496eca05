//! Domain-incremental continual learning on CPU: a small reverse-mode
//! autodiff engine, a dual-head MLP, the three-stage divergence /
//! adaptation / refinement trainer with intermediary reservoir replay, the
//! ER, DER++, SGD and joint baselines, synthetic domain streams and the
//! accuracy, transfer, drift and calibration metrics.

pub mod buffer;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
