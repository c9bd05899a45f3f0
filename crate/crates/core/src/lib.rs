//! Scanner harmonization for 3D T1-weighted MR volumes.
//!
//! Anatomy and scanner effect are disentangled into a spatial brain
//! embedding and a low-dimensional variational scanner embedding. Volumes are
//! harmonized either into a shared scanner-free space (fixed Gaussian style
//! code) or onto a reference training scanner. The crate also carries the
//! evaluation metrics, hypothesis tests and downstream statistical analyses
//! used to judge a harmonization.

pub mod analysis;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod phantom;
pub mod seed;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Volume, WindowPlan, WindowSet};
