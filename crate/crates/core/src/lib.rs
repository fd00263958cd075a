pub mod augment;
pub mod autograd;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
