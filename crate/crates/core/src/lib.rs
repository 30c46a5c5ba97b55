//! Attention-guided dynamic masking and dual-branch contrastive pretraining
//! for point clouds, at a scale where every equation can be checked against
//! an independent oracle.
//!
//! The pipeline: a cloud is grouped into local patches (farthest-point
//! sampling + k-nearest neighbors), patches are embedded into tokens and run
//! through a small transformer encoder with a learnable global token. The
//! attention row of that global token, weighted by value norms, yields a
//! per-patch significance score. High-significance patches are masked — either
//! deterministically or by Gumbel-perturbed sampling — and the masked cloud is
//! re-encoded through the same weights. Training aligns the two branches with
//! a symmetric contrastive loss on top of a Chamfer reconstruction loss.
//!
//! Modules:
//! - [`geometry`]: clouds, patchification, perturbations, synthetic shapes
//! - [`autodiff`]: dense f64 tensors with reverse-mode differentiation
//! - [`encoder`]: token embedding, multi-head attention, significance scores
//! - [`masking`]: dynamic and baseline mask selection, mask-token substitution
//! - [`objectives`]: contrastive, Chamfer and joint losses, projection head
//! - [`pipeline`]: the dual-branch training step, optimizer, kNN probe
//! - [`harness`]: file I/O, configuration, experiments, CLI

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod masking;
pub mod objectives;
pub mod pipeline;
pub mod seeds;

pub use error::{Error, Result};
