pub mod ablation;
pub mod autodiff;
pub mod cmploss;
pub mod error;
pub mod experiment;
pub mod models;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
