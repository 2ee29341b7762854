//! Tape-based reverse-mode differentiation over dense vectors and
//! matrices, and the layers the classifiers are built from.
//!
//! A [`Graph`] is built per document, borrowing a [`ParamSet`] and
//! optionally an embedding table; [`Graph::backward`] returns
//! [`Gradients`] keyed by parameter and by embedding row.

mod gradcheck;
mod graph;
pub mod nn;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheck};
pub use graph::{softmax, Gradients, Graph, Var};
pub use tensor::{ParamId, ParamSet, Shape, Tensor, INIT_RANGE};
