pub mod config;
pub mod data;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod run;
pub mod tensor;
pub mod wavelet;

pub use tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};
