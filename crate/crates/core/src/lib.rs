//! Numerical laboratory for optimization collapse under sharpness-aware
//! minimization: autodiff, frozen toy encoders with region-token injection,
//! SAM training of linear probes, and the spectral diagnostics that predict
//! when training fails.

pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod optim;
pub mod regions;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
