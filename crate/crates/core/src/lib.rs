//! Jointly trained tabular + image autoencoder-classifier with latent-shift
//! counterfactual explanations.
//!
//! Numeric code is generic over [`numeric::Scalar`]; the aliases below fix
//! it to `f64`, which is what the command line uses.

pub mod error;
pub mod numeric;

pub use error::{Error, Result};
pub mod models;
pub mod data;
pub mod training;
pub mod explain;
pub mod eval;
pub mod cli;

pub type Tensor = numeric::Tensor<f64>;
pub type Tape = numeric::Tape<f64>;
pub type Model = models::MultimodalModel<f64>;
