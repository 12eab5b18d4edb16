//! Few-shot aerial action classification from feature vectors.
//!
//! Two trainers share one small dense-network toolkit:
//!
//! * [`gan`] synthesizes target-domain (aerial) features from source-domain
//!   (ground) features with a conditional Wasserstein GAN trained with a
//!   gradient penalty and an auxiliary classification loss.
//! * [`dml`] trains a shared-trunk, four-head classifier on a few real
//!   aerial examples together with auxiliary game and/or generated data,
//!   filling missing labels with pseudo-labels from teacher heads.
//!
//! [`data`] handles datasets, splits, k-shot sampling, checkpoints and a
//! synthetic domain-shift benchmark; [`eval`] computes accuracy reports and
//! k-shot curves; [`cli`] wires everything into the `fewshot-dml` binary.

pub mod cli;
pub mod config;
pub mod data;
pub mod dml;
pub mod error;
pub mod eval;
pub mod gan;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
