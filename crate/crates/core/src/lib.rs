//! Conditional music source separation with a deterministic extractor, a
//! feature-conditioned diffusion refiner and a consistency-distilled student.

pub mod audio;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod precondition;
pub mod samplers;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
