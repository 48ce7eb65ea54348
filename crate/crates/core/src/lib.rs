pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminators;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod generator;
pub mod heatmap;
pub mod imaging;
pub mod lifting3d;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
