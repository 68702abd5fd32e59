//! Multi-source unsupervised domain adaptation for re-identification.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense tensors and a reverse-mode gradient tape.
//! - [`normalization`]: batch norm, per-domain branches, and rectification.
//! - [`graph_fusion`]: domain agent nodes and the two-layer fusion graph.
//! - [`clustering`]: DBSCAN pseudo-labels.
//! - [`objectives`]: identity, triplet, and stage losses.
//! - [`pipeline`]: sampling, the small backbone, Adam, and both training stages.
//! - [`evaluation`]: retrieval metrics and domain-gap statistics.
//! - [`synthetic`], [`experiment`]: data generation and run orchestration.
//! - [`reference`], [`verify`]: brute-force reference implementations and the
//!   self-check suite built on them.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod graph_fusion;
pub mod normalization;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod reference;
pub mod synthetic;
pub mod verify;

pub use error::{Error, Result};

/// Domain tag. Sources are `0..K`, the target is `K`.
pub type DomainId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}
