//! Minimal neural toolkit: shaped `f64` tensors, a reverse-mode tape,
//! the layers the beamformer stack needs, Adam and gradient clipping.
//!
//! Every forward op records a backward closure on a [`Graph`]. Parameters
//! live in a [`ParamTree`] and are pulled onto the graph by name; after
//! [`Graph::backward`] their gradients are added back into the tree.

mod error;
mod gemm;
pub mod graph;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod suite;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{BackwardCtx, BackwardFn, Graph, Var};
pub use params::ParamTree;
pub use tensor::Tensor;
