//! Kernels behind the graph operations.

pub mod conv;
pub(crate) mod dense;
pub(crate) mod norm;
pub(crate) mod pool;
