pub mod autodiff;
pub mod config;
pub mod env;
pub mod error;
pub mod experiment;
pub mod gae;
pub mod perception;
pub mod policy;
pub mod tabular;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
