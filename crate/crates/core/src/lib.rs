pub mod align;
pub mod corpus;
pub mod cosegment;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod highlight;
pub mod model;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
