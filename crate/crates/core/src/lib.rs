//! Trajectory representation learning with road-environment perception and
//! route-choice modeling.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod encoder;
pub mod env;
pub mod geo;
pub mod model;
pub mod pipeline;
pub mod poi;
pub mod pretrain;
pub mod route;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
