//! Global-to-local feature selection with a differentiable nearest-neighbour
//! classifier, for high-dimensional low-sample-size tabular data.

pub mod baselines;
pub mod data;
pub mod diffcore;
pub mod exec;
pub mod experiment;
pub mod fused;
pub mod metrics;
pub mod model;
pub mod proto;
pub mod seed;
pub mod selector;
pub mod tensor;
pub mod train;
pub mod verify;

pub use tensor::Matrix;
