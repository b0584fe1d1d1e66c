pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod conditioning;
pub mod detect;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod face;
pub mod image;
pub mod names;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scoring;
pub mod selfaug;
pub mod text;
pub mod trainer;
pub mod vit;
pub mod zoo;

pub use error::{Error, Result};
