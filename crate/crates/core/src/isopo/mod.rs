//! Isometric policy optimization.
//!
//! Two layer-wise transformations of the batch dimension, applied to per-sequence
//! log-probability gradients before they are contracted with advantages:
//!
//! * **non-interacting**: every sequence gradient `v` is rescaled by a function of its
//!   stochastic Fisher norm `‖v‖_F` (estimated from rank-one position gradients drawn from
//!   the microbatch) and its Euclidean norm, see [`rescaling`] and [`noninteracting_update`];
//! * **interacting**: the advantages are preconditioned by the layer's empirical neural
//!   tangent kernel, `Jᵀ(K + cI)⁻¹A` with `K = JJᵀ`, see [`interacting_update`].

mod ema;
mod fisher;
mod noninteracting;
mod ntk;
mod rescaling;

pub use ema::{ema_update, Ema, LayerRegEma, RegEmaState};
pub use fisher::{
    draw_overlap_samples, fisher_norm_estimate, fisher_norm_estimate_excluding, LayerSamples, OverlapSamples,
};
pub use noninteracting::{estimate_fisher_norms, noninteracting_update, NonInteractingUpdate};
pub use ntk::{
    build_ntk, interacting_microbatch_update, interacting_update, InteractingParams, InteractingUpdate,
    NtkDecomposition,
};
pub use rescaling::{reg2, rescaling, RescalingParams, REG_FLOOR};

use thiserror::Error;

use crate::linalg::LinalgError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IsopoError {
    /// Every sampled position factor is zero, so the normalizer of the estimate vanishes.
    #[error("Fisher-norm estimator is degenerate: {0}")]
    Degenerate(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}
