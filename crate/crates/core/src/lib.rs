//! Mixture-of-LoRA adapters with a shared down-projection subspace
//! (MALoRA), together with LoRA, AsyLoRA and MoLoRA baselines.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: dense matrices, thin SVD, seeded RNG.
//! - [`autodiff`]: a define-by-run reverse-mode tape over matrices.
//! - [`adapters`]: single-expert LoRA / AsyLoRA layers.
//! - [`moe`]: routing, MoLoRA and MALoRA layers, geometry and budgets.
//! - [`analysis`]: expert-similarity and gradient-scaling diagnostics.
//! - [`harness`]: synthetic multi-task data, AdamW training, benchmarks.
//! - [`cli`]: config files, checkpoints and the `malk` command surface.

pub mod adapters;
pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod moe;

pub use error::{Error, Result};
pub use linalg::{Matrix, Rng};
