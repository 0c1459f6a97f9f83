pub mod analysis;
pub mod conditioning;
pub mod degradation;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod flowcore;
pub mod image;
pub mod nn;
pub mod pseudotriplet;
pub mod rng;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use image::{ImageTensor, Mask};
