//! Sparse mixture-of-experts vision transformers at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: `f64` tensors and a reverse-mode tape.
//! - [`vit`]: patch embedding, attention, FFN and heads.
//! - [`moe`]: gating, top-k mixing, shared expert and the balancing loss.
//! - [`model`]: assembling a model from a [`model::ModelConfig`], plus
//!   exact parameter and FLOPs accounting.
//! - [`data`]: deterministic synthetic datasets and the `VIMD` container.
//! - [`train`]: AdamW with layer-wise decay, the training loop, layer scans.
//! - [`analysis`]: routing logs, heatmaps, expert load and layer selection.

pub mod analysis;
pub mod data;
pub mod error;
pub mod io;
pub mod moe;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
