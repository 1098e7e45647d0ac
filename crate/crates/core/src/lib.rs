pub mod autodiff;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod edit;
pub mod error;
pub mod formats;
mod kernels;
pub mod mask;
pub mod meter;
pub mod metrics;
pub mod model;
pub mod record;
pub mod str_score;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
