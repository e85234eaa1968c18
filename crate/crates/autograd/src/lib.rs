//! Reverse-mode automatic differentiation for small convolutional networks.
//!
//! Tensors are dense and row-major. Image tensors use the NCHW layout. A
//! [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! walks the record in reverse and returns gradients for every node that
//! depends on a trainable leaf. Nodes that do not depend on any trainable
//! leaf never save backward state and never receive a gradient, which is how
//! stop-gradient is expressed: [`Var::detach`] and [`Graph::constant`].
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference checks.

mod graph;
mod ops;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, MomentState};
pub use params::{BoundParams, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter topology mismatch: {0}")]
    Topology(String),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
