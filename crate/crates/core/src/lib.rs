//! Cross-modal audio/video matching engine.
//!
//! Two embedding branches map audio and video feature sequences into a
//! shared 512-dimensional space where cosine similarity scores how well a
//! soundtrack fits a clip. The crate contains everything needed to train
//! and evaluate such models from scratch:
//!
//! * [`tensor`]: dense tensors with a reverse-mode autodiff tape,
//! * [`layers`]: linear/batchnorm stacks, multi-head attention, transformer
//!   encoder blocks and bidirectional LSTMs,
//! * [`losses`]: InfoNCE, mined triplet loss and the intra-modal structure
//!   constraint,
//! * [`model`]: the dual-branch network and its seven presets,
//! * [`data`]: feature files, manifests, song-disjoint splits and a
//!   synthetic paired-sequence generator,
//! * [`engine`]: Adam training, checkpoints, top-k recall and
//!   recommendation queries.

pub mod data;
pub mod engine;
pub mod error;
pub mod layers;
pub mod losses;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Tape, Tensor, Var};
