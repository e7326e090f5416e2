//! Residual networks with auxiliary output heads.
//!
//! This crate implements a compact CPU training stack for residual stacks
//! that carry extra classifier heads at intermediate layers. One training run
//! produces several usable models of different depths, and the heads can be
//! driven by four gradient-propagation strategies:
//!
//! - **plain**: backpropagate the final loss only,
//! - **joint**: one backward pass of the weighted sum of all head losses,
//! - **pairwise**: per head, a fresh forward then backward then update,
//! - **multipath**: one shared forward, then per head a backward over the
//!   cached activations followed by an immediate update.
//!
//! Alongside training it measures the per-layer supervision-information
//! ratio (how much of the gradient at a layer is actual loss signal), and
//! serves multi-head prediction with entropy-based head selection.
//!
//! Inner loops are data-parallel over rayon when the default `parallel`
//! feature is enabled; disabling it compiles a sequential fallback with
//! bitwise-identical results.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub(crate) mod parallel;
pub mod predict;
pub mod ratio;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use model::{ForwardCache, Mode, Model, ModelConfig};
pub use tensor::{Element, Tensor};
