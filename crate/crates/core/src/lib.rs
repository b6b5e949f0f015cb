//! Zero-shot low-light image enhancement.
//!
//! A multi-scale curve-estimation network built from depthwise-separable
//! convolutions and spatial attention predicts a per-pixel map `A ∈ [-1, 1]`.
//! The map drives the recurrence `x ← x + A·(x² − x)`, and the network is
//! trained without reference images against a composite of smoothness,
//! structure, colour and exposure losses. Everything runs on the small
//! reverse-mode autodiff engine in [`autodiff`].

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod enhance;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{Eager, ElementwiseKind, Graph, ReduceKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
