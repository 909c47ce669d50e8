//! Slow-fast stochastic systems: simulation, averaging, skeleton equations,
//! rate functions and Monte Carlo large-deviation checks.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

pub mod averaging;
pub mod cli;
pub mod control;
pub mod error;
pub mod mc;
pub mod model;
pub mod modulus;
pub mod ratefn;
pub mod sde;
pub mod skeleton;
pub mod stats;
pub mod stream;
pub mod suite;

pub use averaging::AveragedDrift;
pub use control::Control;
pub use error::{Error, Result};
pub use model::{make_builtin, AssumptionProfile, BuiltinModel, Coefficients, ModelSpec};
pub use sde::{PathKind, PathSample, SimConfig};
