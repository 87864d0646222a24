//! Second-order flow matching on Gaussian interpolation paths: exact
//! conditional and marginal fields, B-spline approximators of the
//! acceleration, explicit ReLU gadget networks, small trainable heads and a
//! verification harness.

pub mod bspline;
pub mod density;
pub mod error;
pub mod gaussian_path;
pub mod harness;
pub mod quad;
pub mod relunet;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
