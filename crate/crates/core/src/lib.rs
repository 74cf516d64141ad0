//! Metric learning with teacher-student embedding distillation.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]) underlies the embedding networks ([`model`]) and every loss
//! ([`loss`]): triplet, absolute and relative distillation, hint and
//! attention transfer. [`trainer`] runs Adam over class-balanced batches with
//! in-batch hard negative mining ([`sampling`]); [`eval`] scores embeddings
//! with Recall@K on classes never seen in training ([`data`]).

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod sampling;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, NodeId, Primitive, Tape};
pub use error::{Error, Result};
pub use tensor::Tensor;
