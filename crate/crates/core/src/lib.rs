//! Transferrable prototypical networks for unsupervised domain adaptation.
//!
//! The crate trains an embedding function on labeled source data plus
//! unlabeled target data. Each training iteration alternates two steps:
//! source-prototype classifiers pseudo-label a fresh target batch, then one
//! gradient step minimizes the supervised source loss together with a
//! class-level RKHS discrepancy between per-class prototypes and a
//! sample-level symmetric-KL discrepancy between the score distributions the
//! source, target, and combined prototype classifiers produce.
//!
//! Modules:
//!
//! - [`tensor`], [`tape`], [`gradcheck`], [`adam`] — a small reverse-mode
//!   autodiff core with Adam, sufficient for the networks and losses here.
//! - [`net`] — the embedding function: an MLP or a two-conv LeNet variant.
//! - [`proto`] — prototypes, distance-softmax classification, pseudo-labels.
//! - [`losses`] — class-level and sample-level adaptation losses, MMD, and
//!   the combined objective.
//! - [`trainer`] — episode sampling, the alternating optimization, frozen
//!   prototypes, inference, and training logs.
//! - [`datasets`] — synthetic domain-shift generators and IDX digit loading.
//! - [`checkpoint`] — the binary parameter/prototype dump format.

pub mod adam;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod net;
pub mod proto;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
