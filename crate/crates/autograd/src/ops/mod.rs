//! Kernels behind the structured graph operators.

pub mod attention;
pub mod conv;
pub mod patches;
pub mod pool;
pub mod spectral;
