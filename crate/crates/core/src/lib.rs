//! Few-shot meta-learning engine built around contrastive prototype learning
//! with augmented embeddings (CPLAE).
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: dense tensors with reverse-mode differentiation, plus the
//!   seeded RNG and finite-difference gradient checker.
//! - [`nn`]: convolutional backbone, batch normalization, self-attention
//!   integrator, projection head, optimizers, and checkpointing.
//! - [`data`]: dataset ingestion (PGM/PPM + JSON-lines manifest), the
//!   synthetic corpus generator, deterministic augmentations, and the
//!   n-way k-shot episode sampler.
//! - [`cplae`]: augmented-embedding construction, prototypes, the FSL and
//!   CPL losses, and nearest-prototype classification.
//! - [`train`]: episodic meta-training, backbone pre-training, run logs.
//! - [`eval`]: meta-test harness, Davies-Bouldin index, embedding export,
//!   and the ablation runner.
//!
//! The `cplae-cli` crate layers the JSON run-configuration format and the
//! `synth`/`train`/`eval`/`ablate` commands on top.

pub mod autodiff;
pub mod cplae;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};
