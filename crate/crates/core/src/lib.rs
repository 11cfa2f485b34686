//! Promptable instance segmentation at desk scale: box geometry, prompt encoders,
//! a small two-stage segmentation model, synthetic data and evaluation.

pub mod checkpoint;
pub mod config;
mod error;
pub mod geometry;
pub mod global_prompt;
pub mod image;
pub mod local_prompt;
pub mod mask;
pub mod nn;
pub mod pipeline;
pub mod synthlab;
pub mod tokenizer;

pub use boxprompt_autograd as autograd;
pub use error::{Error, Result};
