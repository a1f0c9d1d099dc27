pub mod error;
pub mod par;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub mod config;
pub mod data;
pub mod subword;
pub mod model;
pub mod training;
pub mod inference;
pub mod analysis;
