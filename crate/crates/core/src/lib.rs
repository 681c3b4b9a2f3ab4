pub mod data;
pub mod explain;
pub mod image;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
