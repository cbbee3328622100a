//! Dense tensors and the reverse-mode differentiation engine.

pub mod float;
pub mod graph;
pub mod io;
mod kernels;
pub mod params;
pub mod tensor;

pub use float::{DType, Float};
pub use graph::{BatchStats, BnMode, Graph, Var, BN_EPS, BN_MOMENTUM};
pub use params::{ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::Tensor;
