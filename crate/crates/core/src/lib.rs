//! Chain-directed pairwise gradient reduction for device-to-device
//! collaborative learning.
//!
//! The crate covers:
//!
//! * [`param`]: parameter vectors and the central, neighbour and pair
//!   aggregation rules plus the SGD step;
//! * [`toy`]: a synthetic dataset and a small dense network producing real
//!   gradients;
//! * [`resource`]: device lifecycle, resource reports and energy accounting;
//! * [`scheduler`]: ring, tree and reinforcement-learned chain aggregation
//!   schedules;
//! * [`sim`]: a discrete-event simulator of the mesh network;
//! * [`metrics`]: objective values and scheduler comparisons over traces.
//!
//! Aggregation code is generic over [`Scalar`], training code over [`Real`].
//! The aliases below fix the scalar to `f64`, which the simulator uses.

pub mod error;
pub mod metrics;
pub mod param;
pub mod resource;
pub mod scalar;
pub mod scheduler;
pub mod sim;
pub mod toy;

pub use error::{Error, Result};
pub use scalar::{Real, Scalar};

pub type ParamVec = param::ParamVector<f64>;
pub type GradientMsg = param::GradientMessage<f64>;
pub type ToyNet = toy::ToyModel<f64>;
pub type ParamVec32 = param::ParamVector<f32>;
pub type ToyNet32 = toy::ToyModel<f32>;
