//! Per-step diagnostics: reward, held-out score, KL drift from the initial policy and
//! per-layer norm / spectrum summaries of the last microbatch.

use crate::policy::{kl_from_reference, PolicyError, PolicyNet};
use crate::rng::Streams;
use crate::tasks::{validation_score, Microbatch, Prompt};
use crate::Scalar;

/// Held-out prompts used by the KL estimate.
pub const KL_PROMPTS: usize = 16;
/// Samples per prompt in the KL estimate (`16 × 16 = 256` in total).
pub const KL_SAMPLES_PER_PROMPT: usize = 16;
pub const DEFAULT_EVAL_EVERY: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMetrics<T> {
    /// Mean estimated Fisher norm over the non-degenerate sequences (zero if none).
    pub mean_f_norm: T,
    pub mean_grad_norm: T,
    /// Only recorded by the interacting variant.
    pub ntk_eigen_mean: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics<T> {
    pub step: usize,
    pub mean_reward: T,
    pub validation: T,
    pub kl_from_init: T,
    pub per_layer: Vec<LayerMetrics<T>>,
    pub degenerate_sequences: usize,
}

/// What the training step already computed about its microbatch.
#[derive(Debug, Clone, PartialEq)]
pub struct MicrobatchSummary<T> {
    pub mean_reward: T,
    pub per_layer: Vec<LayerMetrics<T>>,
    pub degenerate_sequences: usize,
}

fn mean<T: Scalar>(xs: impl Iterator<Item = T>) -> T {
    let (sum, n) = xs.fold((T::zero(), 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        T::zero()
    } else {
        sum / T::from_usize_lossy(n)
    }
}

impl<T: Scalar> MicrobatchSummary<T> {
    /// `f_norms` is `[layer][sequence]` as returned by the Fisher-norm estimator;
    /// `ntk_eigen_means` is given by the interacting variant only.
    pub fn new(
        batch: &Microbatch<T>,
        f_norms: &[Vec<Option<T>>],
        ntk_eigen_means: Option<&[T]>,
        degenerate_sequences: usize,
    ) -> Self {
        let per_layer = f_norms
            .iter()
            .enumerate()
            .map(|(l, layer)| LayerMetrics {
                mean_f_norm: mean(layer.iter().flatten().copied()),
                mean_grad_norm: mean(batch.records().map(|r| r.per_layer_seq_grad[l].frobenius_norm())),
                ntk_eigen_mean: ntk_eigen_means.map(|m| m[l]),
            })
            .collect();
        Self {
            mean_reward: batch.mean_reward(),
            per_layer,
            degenerate_sequences,
        }
    }
}

/// Assembles the metrics row for `step`. `kl_streams` should be derived from the run seed
/// and the step. Neither policy is modified.
pub fn collect<T: Scalar>(
    step: usize,
    net: &PolicyNet<T>,
    init_net: &PolicyNet<T>,
    heldout: &[Prompt<T>],
    summary: MicrobatchSummary<T>,
    kl_streams: Streams,
) -> Result<StepMetrics<T>, PolicyError> {
    let kl_prompts = &heldout[..heldout.len().min(KL_PROMPTS)];
    let kl_from_init = kl_from_reference(net, init_net, kl_prompts, KL_SAMPLES_PER_PROMPT, kl_streams)?;
    Ok(StepMetrics {
        step,
        mean_reward: summary.mean_reward,
        validation: validation_score(net, heldout)?,
        kl_from_init,
        per_layer: summary.per_layer,
        degenerate_sequences: summary.degenerate_sequences,
    })
}
