pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod defenses;
pub mod error;
pub mod evalnet;
pub mod experiments;
pub mod fl;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod pnm;
pub mod refiner;
pub mod rng;

pub use error::{Error, Result};
pub use glab_autodiff::{GradientVector, Tensor};
