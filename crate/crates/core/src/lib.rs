//! Desk-scale multimodal decoder with representation steering.

pub mod analysis;
pub mod error;
pub mod model;
pub mod numeric;
pub mod peft;
pub mod rng;
pub mod scalar;
pub mod steering;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

pub type Tensor = numeric::Tensor<f64>;
pub type Tape = numeric::Tape<f64>;
pub type Model = model::Model<f64>;
pub type ParamStore = model::ParamStore<f64>;
