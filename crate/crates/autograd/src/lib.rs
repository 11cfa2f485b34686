//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: a [`Graph`] records operations eagerly, keeps
//! every intermediate value, and [`Graph::backward`] sweeps the tape once. Besides
//! the usual dense algebra it carries the structured operators the segmentation
//! model needs (strided convolution, region max pooling, patch extraction,
//! additive spectral embedding, multi-head attention and the standard losses).

pub mod gradcheck;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::Params;
pub use tensor::Tensor;
