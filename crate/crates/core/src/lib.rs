//! Prototype-based generalized zero-shot recognition of gesture sequences.
//!
//! A bidirectional LSTM encodes each sequence; a projection places it among
//! learnable class prototypes whose learned radii decide seen vs. unseen, and
//! a semantic auto-encoder labels rejected samples through class attributes.

pub mod autodiff;
pub mod dataset;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod sae;
pub mod trainer;

pub use autodiff::{Graph, Scalar, Tensor, Var};
pub use error::{Error, Result};
