use log::debug;

use super::fisher::{fisher_norm_estimate, fisher_norm_estimate_excluding, OverlapSamples};
use super::rescaling::{rescaling, RescalingParams};
use super::IsopoError;
use crate::linalg::Matrix;
use crate::policy::SequenceRecord;
use crate::Scalar;

/// Per-layer microbatch gradient of the non-interacting variant plus the estimates that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NonInteractingUpdate<T> {
    /// `u_l` for each layer (ascent direction).
    pub grads: Vec<Matrix<T>>,
    /// `[layer][sequence]`; `None` where the estimator was degenerate.
    pub f_norms: Vec<Vec<Option<T>>>,
    /// Sequences that fell back to the unrescaled gradient in at least one layer.
    pub degenerate_sequences: usize,
}

/// Fisher-norm estimate of every sequence gradient in every layer.
pub fn estimate_fisher_norms<T: Scalar>(
    records: &[&SequenceRecord<T>],
    samples: &OverlapSamples<T>,
    exclude_self: bool,
) -> Result<Vec<Vec<Option<T>>>, IsopoError> {
    let n_layers = records.first().map_or(0, |r| r.n_layers());
    if samples.layers.len() != n_layers {
        return Err(IsopoError::InvalidInput(format!(
            "overlap samples cover {} layers, records have {n_layers}",
            samples.layers.len()
        )));
    }
    let mut out = Vec::with_capacity(n_layers);
    for (l, layer_samples) in samples.layers.iter().enumerate() {
        let mut per_seq = Vec::with_capacity(records.len());
        for (s, rec) in records.iter().enumerate() {
            let v = &rec.per_layer_seq_grad[l];
            let est = if exclude_self {
                fisher_norm_estimate_excluding(v, layer_samples, s)
            } else {
                fisher_norm_estimate(v, layer_samples)
            };
            match est {
                Ok(f) => per_seq.push(Some(f)),
                Err(IsopoError::Degenerate(msg)) => {
                    debug!("layer {l}, sequence {s}: {msg}; using unrescaled gradient");
                    per_seq.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        out.push(per_seq);
    }
    Ok(out)
}

fn mean<T: Scalar>(xs: &[T]) -> Option<T> {
    (!xs.is_empty()).then(|| xs.iter().copied().sum::<T>() / T::from_usize_lossy(xs.len()))
}

/// `u_l = Σ_o A(o|q) · rescaling(∇_{θ_l} log π(o|q), ‖·‖_F)` for every layer `l`.
///
/// Trailing expectations used by the regularizer are read before this minibatch is folded
/// into `params.ema` (on the very first minibatch the current means seed the average).
pub fn noninteracting_update<T: Scalar>(
    records: &[&SequenceRecord<T>],
    advantages: &[T],
    params: &mut RescalingParams<T>,
    samples: &OverlapSamples<T>,
    exclude_self: bool,
) -> Result<NonInteractingUpdate<T>, IsopoError> {
    if records.len() != advantages.len() {
        return Err(IsopoError::InvalidInput(format!(
            "{} sequences but {} advantages",
            records.len(),
            advantages.len()
        )));
    }
    if records.is_empty() {
        return Ok(NonInteractingUpdate {
            grads: Vec::new(),
            f_norms: Vec::new(),
            degenerate_sequences: 0,
        });
    }
    let f_norms = estimate_fisher_norms(records, samples, exclude_self)?;
    let n_layers = f_norms.len();
    let mut grads = Vec::with_capacity(n_layers);
    let mut degenerate = vec![false; records.len()];

    for (l, layer_norms) in f_norms.iter().enumerate() {
        let mut f_sq = Vec::new();
        let mut g_sq = Vec::new();
        let mut rel_sq = Vec::new();
        for (rec, f) in records.iter().zip(layer_norms) {
            if let Some(f) = *f {
                let gn = rec.per_layer_seq_grad[l].frobenius_norm();
                f_sq.push(f * f);
                g_sq.push(gn * gn);
                if gn > T::zero() {
                    rel_sq.push((f / gn) * (f / gn));
                }
            }
        }
        let means = [mean(&f_sq), mean(&g_sq), mean(&rel_sq)];
        let ema = params.ema.layer_mut(l);
        let mut slots = [&mut ema.f_norm_sq, &mut ema.grad_norm_sq, &mut ema.rel_norm_sq];
        let was_initialized = slots.each_ref().map(|e| e.is_initialized());
        for (slot, m) in slots.iter_mut().zip(means) {
            if let (false, Some(m)) = (slot.is_initialized(), m) {
                slot.update(m);
            }
        }

        let (rows, cols) = records[0].per_layer_seq_grad[l].shape();
        let mut u = Matrix::zeros(rows, cols);
        for (s, (rec, &a)) in records.iter().zip(advantages).enumerate() {
            let v = &rec.per_layer_seq_grad[l];
            match layer_norms[s] {
                Some(f) => u.axpy(a, &rescaling(v, f, params, l))?,
                None => {
                    degenerate[s] = true;
                    u.axpy(a, v)?;
                }
            }
        }
        grads.push(u);

        let ema = params.ema.layer_mut(l);
        let slots = [&mut ema.f_norm_sq, &mut ema.grad_norm_sq, &mut ema.rel_norm_sq];
        for ((slot, m), init) in slots.into_iter().zip(means).zip(was_initialized) {
            if let (true, Some(m)) = (init, m) {
                slot.update(m);
            }
        }
    }

    Ok(NonInteractingUpdate {
        grads,
        f_norms,
        degenerate_sequences: degenerate.iter().filter(|&&d| d).count(),
    })
}
