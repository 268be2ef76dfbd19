pub mod baselines;
pub mod cohort;
pub mod discretizer;
pub mod encoder;
pub mod error;
pub mod lasso;
pub mod model;
mod par;
pub mod pipeline;
pub mod eval;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
