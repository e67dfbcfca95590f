pub mod autodiff;
pub mod costvolume;
pub mod error;
pub mod features;
pub mod geometry;
pub mod imaging;
pub mod medium;
pub mod rng;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
