//! Desk-scale navigation instruction generation from perspective and
//! bird's-eye-view prompts.
//!
//! The crate is organized as a pipeline:
//!
//! - [`simworld`]: procedural 2.5D houses, trajectories, rendering,
//!   grammar-based instructions and a scripted follower.
//! - [`numerics`]: the tensor/autodiff engine, AdamW and checkpoints.
//! - [`encoder`], [`bev`], [`fusion`]: the visual encoder stack.
//! - [`lm`]: a small prompt-tuned decoder with zero-initialized gating.
//! - [`refine`]: landmark drafting and iterative refinement.
//! - [`metrics`]: captioning metrics.
//! - [`cli`]: configuration, datasets, training and the experiment commands.

pub mod bev;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod layers;
pub mod lm;
pub mod metrics;
pub mod numerics;
pub mod refine;
pub mod simworld;

pub use error::{Error, Result};
