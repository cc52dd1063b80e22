//! Dense tensors with a reverse-mode tape.
//!
//! A [`Graph`] records every operation executed on it in order, so the
//! record is topologically sorted by construction. [`Graph::backward`]
//! walks the record once in reverse. The engine is generic over the
//! element type: models train in `f32` and the same graph code re-executes
//! in `f64` for finite-difference checks (see [`gradcheck`]).

mod error;
mod graph;
mod ops;
mod scalar;
mod tensor;

pub mod gradcheck;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Lower clamp applied to cosine denominators and to log / KL arguments.
pub const EPS: f64 = 1e-8;
