//! Desk-scale multiway-transformer VQA pipeline.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense 64-bit tensors plus the binary checkpoint encoding.
//! - [`graph`] — a reverse-mode autodiff tape over tensor-valued nodes.
//! - [`gradcheck`] — central finite-difference verification of the tape.
//! - [`text`] — a toy greedy longest-match subword tokenizer.
//! - [`masking`] — exact-count random and block-wise mask sampling.
//! - [`vision`] — patchification and the VQ-KD visual tokenizer.
//! - [`model`] — the multiway encoder with per-modality experts, the
//!   masked-data-modeling loss, and the answer-selection head.
//! - [`metrics`] — token P/R/F1, exact-match accuracy, and Wu-Palmer WUPS.
//! - [`data`], [`config`], [`optim`], [`checkpoint`], [`train`] — dataset and
//!   image I/O, run configuration, Adam, checkpoint container, and the
//!   pretrain/finetune/evaluate drivers behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;
pub mod verify;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::Tensor;
