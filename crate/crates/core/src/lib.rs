//! Sequence labeling for depth-ordered image stacks, with two attention
//! mechanisms over a recurrent encoder: global (additive, whole-sequence)
//! attention and Toeplitz attention, a depth-independent convex kernel of
//! support 2D+1 whose attention map is a banded Toeplitz matrix computable
//! as a 1-D convolution.
//!
//! The crate is organized as:
//! - [`tensor`], [`graph`], [`gradcheck`], [`optim`]: a minimal reverse-mode
//!   automatic-differentiation engine over dense `f64` tensors, with a
//!   finite-difference verifier and an Adam step.
//! - [`nn`]: the model layers and assemblies.
//! - [`synth`]: a seeded generator of layered synthetic stacks plus dataset
//!   persistence.
//! - [`train`]: the training loop and checkpointing.
//! - [`eval`]: metrics, the impossible-transition audit, attention-map
//!   export, and the banded-vs-dense attention benchmark.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Boundary, GradGraph, Var};
pub use tensor::Tensor;
