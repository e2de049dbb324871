//! Hybrid discriminative-generative classifier training on a small f64
//! autodiff engine.
//!
//! A classifier's logits double as negative energies: `E(x, y) = −f(x)[y]`.
//! Training mixes cross-entropy with a contrastive term whose normalizer is
//! estimated from a FIFO queue of past normalized logits, optionally plus a
//! Langevin-sampled marginal likelihood term.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod ebm;
pub mod error;
pub mod eval;
pub mod harness;
pub mod loss;
pub mod model;
pub mod queue;
pub mod rng;
pub mod tensor;

pub use data::Dataset;
pub use error::{Error, Result};
pub use loss::{hybrid_loss, HdgeConfig, Normalization};
pub use model::{Checkpoint, ModelParams};
pub use queue::LogitQueue;
pub use rng::{substream, Rng};
pub use tensor::{Gradients, Tape, Tensor, Var};
