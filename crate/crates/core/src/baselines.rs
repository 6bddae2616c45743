//! Reference algorithms: REINFORCE, PPO-style clipped GRPO with a sequence-level
//! importance ratio, and the SGD / AdamW parameter updates shared by every algorithm.

use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::policy::{evaluate_sequence, sequence_logprob, PolicyError, PolicyNet, SequenceRecord};
use crate::tasks::Microbatch;
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("non-finite gradient in layer {layer} at flat index {index}: {value}")]
    NonFinite { layer: usize, index: usize, value: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// `Σ_o A(o|q) ∇_{θ_l} log π(o|q)` for every layer.
pub fn reinforce_grad<T: Scalar>(records: &[&SequenceRecord<T>], advantages: &[T]) -> Result<Vec<Matrix<T>>, BaselineError> {
    if records.len() != advantages.len() {
        return Err(BaselineError::InvalidInput(format!(
            "{} sequences but {} advantages",
            records.len(),
            advantages.len()
        )));
    }
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let mut grads: Vec<Matrix<T>> = first
        .per_layer_seq_grad
        .iter()
        .map(|g| Matrix::zeros(g.rows(), g.cols()))
        .collect();
    for (rec, &a) in records.iter().zip(advantages) {
        for (acc, v) in grads.iter_mut().zip(&rec.per_layer_seq_grad) {
            acc.axpy(a, v)?;
        }
    }
    Ok(grads)
}

/// `Σ_o A(o|q) log π(o|q)` under `net`: the objective whose gradient is [`reinforce_grad`].
pub fn reinforce_objective<T: Scalar>(net: &PolicyNet<T>, batch: &Microbatch<T>) -> Result<T, BaselineError> {
    let mut total = T::zero();
    for g in &batch.groups {
        for (rec, &a) in g.records.iter().zip(&g.advantages) {
            total = total + a * sequence_logprob(net, &g.prompt.features, &rec.tokens)?;
        }
    }
    Ok(total)
}

/// Log-probabilities of every sampled sequence under the sampling policy `π_old`.
#[derive(Debug, Clone, PartialEq)]
pub struct OldPolicySnapshot<T> {
    pub logprobs: Vec<T>,
}

impl<T: Scalar> OldPolicySnapshot<T> {
    pub fn from_microbatch(batch: &Microbatch<T>) -> Self {
        Self {
            logprobs: batch.records().map(|r| r.logprob).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoGrad<T> {
    pub grads: Vec<Matrix<T>>,
    /// Importance ratio of each sequence.
    pub ratios: Vec<T>,
    /// Sequences whose contribution was clipped to zero.
    pub clipped: usize,
}

fn is_clipped<T: Scalar>(ratio: T, advantage: T, clip_eps: T) -> bool {
    (advantage > T::zero() && ratio > T::one() + clip_eps) || (advantage < T::zero() && ratio < T::one() - clip_eps)
}

/// Gradient of `Σ_o min(ρ_o A_o, clip(ρ_o, 1-ε, 1+ε) A_o)` with
/// `ρ_o = exp(log π_θ(o) - log π_old(o))`, re-evaluating every sequence under `net`.
pub fn grpo_clipped_grad<T: Scalar>(
    net: &PolicyNet<T>,
    batch: &Microbatch<T>,
    snapshot: &OldPolicySnapshot<T>,
    clip_eps: T,
) -> Result<GrpoGrad<T>, BaselineError> {
    if snapshot.logprobs.len() != batch.n_sequences() {
        return Err(BaselineError::InvalidInput(format!(
            "snapshot has {} log-probabilities for {} sequences",
            snapshot.logprobs.len(),
            batch.n_sequences()
        )));
    }
    let mut grads = net.zeros_like();
    let mut ratios = Vec::with_capacity(batch.n_sequences());
    let mut clipped = 0;
    let mut k = 0;
    for g in &batch.groups {
        for (rec, &a) in g.records.iter().zip(&g.advantages) {
            let current = evaluate_sequence(net, &g.prompt, &rec.tokens)?;
            let ratio = (current.logprob - snapshot.logprobs[k]).exp();
            k += 1;
            ratios.push(ratio);
            if is_clipped(ratio, a, clip_eps) {
                clipped += 1;
                continue;
            }
            for (acc, v) in grads.iter_mut().zip(&current.per_layer_seq_grad) {
                acc.axpy(a * ratio, v)?;
            }
        }
    }
    Ok(GrpoGrad { grads, ratios, clipped })
}

/// The clipped surrogate objective itself (for finite-difference checks).
pub fn grpo_surrogate<T: Scalar>(
    net: &PolicyNet<T>,
    batch: &Microbatch<T>,
    snapshot: &OldPolicySnapshot<T>,
    clip_eps: T,
) -> Result<T, BaselineError> {
    let mut total = T::zero();
    let mut k = 0;
    for g in &batch.groups {
        for (rec, &a) in g.records.iter().zip(&g.advantages) {
            let lp = sequence_logprob(net, &g.prompt.features, &rec.tokens)?;
            let ratio = (lp - snapshot.logprobs[k]).exp();
            k += 1;
            let clipped_ratio = ratio.max(T::one() - clip_eps).min(T::one() + clip_eps);
            total = total + (ratio * a).min(clipped_ratio * a);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

/// SGD or AdamW (bias-corrected moments, decoupled weight decay). Gradients passed to
/// [`optimizer_step`] are loss gradients: parameters move against them.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    pub step: u64,
    first_moment: Vec<Matrix<T>>,
    second_moment: Vec<Matrix<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn sgd(lr: T) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: T::zero(),
            beta2: T::zero(),
            eps: T::zero(),
            weight_decay: T::zero(),
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn adamw(lr: T, beta1: T, beta2: T, weight_decay: T) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr,
            beta1,
            beta2,
            eps: T::lit(1e-8),
            weight_decay,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }
}

/// Applies one update in place. Non-finite gradient entries abort the step before any
/// parameter or moment is touched.
pub fn optimizer_step<T: Scalar>(
    state: &mut OptimizerState<T>,
    net: &mut PolicyNet<T>,
    grads: &[Matrix<T>],
) -> Result<(), BaselineError> {
    if grads.len() != net.n_layers() {
        return Err(BaselineError::InvalidInput(format!(
            "{} gradient matrices for {} layers",
            grads.len(),
            net.n_layers()
        )));
    }
    for (l, (g, layer)) in grads.iter().zip(net.layers()).enumerate() {
        if g.shape() != layer.weight.shape() {
            return Err(BaselineError::InvalidInput(format!(
                "layer {l} gradient is {:?}, weights are {:?}",
                g.shape(),
                layer.weight.shape()
            )));
        }
        if let Some((index, value)) = g.as_slice().iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(BaselineError::NonFinite {
                layer: l,
                index,
                value: value.as_f64(),
            });
        }
    }

    state.step += 1;
    match state.kind {
        OptimizerKind::Sgd => {
            for (layer, g) in net.layers_mut().iter_mut().zip(grads) {
                layer.weight.axpy(-state.lr, g)?;
            }
        }
        OptimizerKind::AdamW => {
            if state.first_moment.is_empty() {
                state.first_moment = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
                state.second_moment = state.first_moment.clone();
            }
            let t = i32::try_from(state.step).unwrap_or(i32::MAX);
            let bc1 = T::one() - state.beta1.powi(t);
            let bc2 = T::one() - state.beta2.powi(t);
            for (l, layer) in net.layers_mut().iter_mut().enumerate() {
                let g = grads[l].as_slice();
                let m = state.first_moment[l].as_mut_slice();
                let v = state.second_moment[l].as_mut_slice();
                for (i, w) in layer.weight.as_mut_slice().iter_mut().enumerate() {
                    m[i] = state.beta1 * m[i] + (T::one() - state.beta1) * g[i];
                    v[i] = state.beta2 * v[i] + (T::one() - state.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    *w = *w - state.lr * (m_hat / (v_hat.sqrt() + state.eps) + state.weight_decay * *w);
                }
            }
        }
    }
    Ok(())
}
