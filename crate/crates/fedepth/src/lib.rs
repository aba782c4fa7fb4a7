//! Federated self-supervised monocular depth estimation at desk scale.

pub mod autodiff;
pub mod camera;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod real;
pub mod rng;

pub use error::{Error, Result};
