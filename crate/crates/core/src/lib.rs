//! Semi-supervised training with pseudo-labeled cross-entropy plus ranking
//! losses (BatchAll, BatchHard, BatchMean triplet and contrastive) applied to
//! L2-normalized logits.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: a small reverse-mode differentiation engine.
//! - [`ranking`]: triplet and contrastive losses with triplet census.
//! - [`objective`]: pseudo-labeling and the weighted four-term objective.
//! - [`model`], [`optim`]: trainable models, SGD with Nesterov momentum, EMA.
//! - [`augment`], [`data`]: augmentation pipelines, CIFAR-10 and synthetic data.
//! - [`bench`]: cost profiling of the ranking losses.
//! - [`runner`]: configuration, the training loop, evaluation and file outputs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objective;
pub mod optim;
pub mod ranking;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
