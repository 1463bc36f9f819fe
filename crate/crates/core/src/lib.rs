pub mod corpus;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod params;
pub mod transformer;

pub use error::{Error, Result};
pub use model::{Model, Sample};
pub use numerics::{no_grad, Scalar, Tensor};
