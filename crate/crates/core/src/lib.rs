//! Cross-modal knowledge distillation and meta-learned parameter priors.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffcore`]: tensors, a reverse-mode tape, a finite-difference oracle
//!   and SGD/Adam.
//! * [`nets`]: small dense networks whose hidden layers are grouped into
//!   channels so that spatial attention maps are defined.
//! * [`losses`]: regression, activation matching, attention transfer, the
//!   weighted parameter regularizer and the composite objectives.
//! * [`meta`]: teacher training, distillation, meta-training of the
//!   regularizer weights and regularized training on a target set.
//! * [`synthdata`]: a seeded paired-modality regression world with a
//!   shifted target domain.
//! * [`metrics`]: EPE, PCK, AUC and parameter histograms.
//! * [`checkpoint`]: JSON checkpoints of networks and regularizer weights.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod meta;
pub mod metrics;
pub mod nets;
pub mod synthdata;

pub use error::{Error, Result};
