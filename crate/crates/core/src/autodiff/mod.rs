//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly and records its
//! inputs, and [`Graph::backward`] replays the tape in reverse. Graphs are
//! cheap and meant to be rebuilt for every mini-batch.

mod graph;
mod tensor;

pub(crate) use graph::sq_dist_slice;
pub use graph::{BinaryOp, Graph, ReduceOp, UnaryOp, Var};
pub use tensor::{Scalar, Tensor};
