//! Approximate message passing (AMP) for signal and change-point estimation in
//! high-dimensional generalized linear models, with the state-evolution
//! recursion that predicts its behavior and a posterior over change points.

pub mod amp;
pub mod denoise;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod model;
pub mod priors;
pub mod rng;
pub mod se;
pub mod special;

pub use error::{CpampError, Result};
