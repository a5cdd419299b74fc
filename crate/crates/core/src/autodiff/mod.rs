//! Minimal reverse-mode autodiff over dense matrices, generic over [`Scalar`](crate::Scalar).

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{AttnGroup, Graph, ParamGrads, SparseEntry, Var};
pub use params::{Archive, ParamId, ParamStore};
pub use tensor::Tensor;
