//! A numerical laboratory for the memorization capacity of one-layer
//! attention-only transformers.
//!
//! The crate builds, verifies and stress-tests three families of results:
//!
//! * **Constructive exact memorization** — [`construct`] assembles a one-layer
//!   attention-only transformer that stores `H·d_h + d` sequence/next-token
//!   associations by solving a linear system over generic attention features,
//!   and emits a machine-checkable [`construct::ConstructionCertificate`].
//! * **Distribution-task bounds** — [`bounds`] estimates the best achievable
//!   KL divergence of any rank-`d` sequence encoder (lower bound via
//!   multi-restart optimization), and evaluates the matching upper bounds:
//!   the circle encoder for lookup tasks and the near-orthogonal-unembedding
//!   bound with its per-sequence temperature equation.
//! * **Scaling-law experiments** — [`trainlab`] trains models with exact
//!   reverse-mode gradients (finite-difference verified), sweeps head count /
//!   head dimension / embedding dimension grids, and fits accuracy scaling
//!   laws in stored-association units.
//!
//! Everything runs on a small dense `f64` kernel ([`numkernel`]) with a
//! splittable seeded RNG, so every artifact is reproducible from
//! `(config, seed)`.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each major capability has one. The `aotmem` binary exposes the same
//! operations as subcommands (`construct`, `verify`, `bounds`, `train`,
//! `sweep`, `fit`, `plot`).

pub mod bounds;
pub mod cli;
pub mod construct;
pub mod model;
pub mod numkernel;
pub mod task;
pub mod trainlab;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("SVD failed to converge within {0} iterations")]
    SvdNonConvergence(usize),
    #[error("degenerate design matrix: {0}")]
    DegenerateDesign(String),
    #[error("support size {got} exceeds cap {cap}")]
    SupportCapExceeded { got: usize, cap: usize },
    #[error("rank deficiency: needed {needed}, achieved {achieved} after {resamples} resamples")]
    RankDeficient {
        needed: usize,
        achieved: usize,
        resamples: usize,
    },
    #[error("no finite solution: {0}")]
    NoFiniteSolution(String),
    #[error("bound is vacuous: {0}")]
    VacuousBound(String),
    #[error("optimization failed: {0}")]
    OptimizationFailed(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("near-orthogonality target not met after {tries} tries (best deviation {best})")]
    JlTargetNotMet { tries: usize, best: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
