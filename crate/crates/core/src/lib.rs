//! Physics-constrained generative modeling of 1-D time series.

pub mod cfm;
pub mod checkpoint;
pub mod constraints;
pub mod datasets;
pub mod diffmath;
pub mod discovery;
pub mod error;
pub mod fno;
pub mod guidance;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod scalar;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use diffmath::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
