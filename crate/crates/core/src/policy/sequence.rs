use rand::Rng;

use super::{log_softmax_at, ForwardTrace, PolicyError, PolicyNet};
use crate::linalg::Matrix;
use crate::rng::Streams;
use crate::tasks::Prompt;
use crate::Scalar;

/// Factors of one position's unreduced gradient `grad_out act_inᵀ` for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGradFactors<T> {
    /// Layer input with the trailing bias entry 1.
    pub act_in: Vec<T>,
    pub grad_out: Vec<T>,
}

impl<T: Scalar> PositionGradFactors<T> {
    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix::outer(&self.grad_out, &self.act_in)
    }
}

/// Teacher-forced forward pass over a whole sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTrace<T> {
    pub tokens: Vec<usize>,
    pub steps: Vec<ForwardTrace<T>>,
}

impl<T: Scalar> SequenceTrace<T> {
    pub fn logprob(&self) -> T {
        self.steps
            .iter()
            .zip(&self.tokens)
            .map(|(s, &tok)| log_softmax_at(&s.logits, tok))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceGrads<T> {
    /// `[layer][position]`.
    pub per_layer_positions: Vec<Vec<PositionGradFactors<T>>>,
    /// Reduced `∇_{θ_l} log π(o|q)` per layer.
    pub per_layer_seq_grad: Vec<Matrix<T>>,
}

/// A sampled (or re-evaluated) output sequence with its log-probability gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord<T> {
    pub prompt_id: u64,
    pub tokens: Vec<usize>,
    pub logprob: T,
    pub per_layer_positions: Vec<Vec<PositionGradFactors<T>>>,
    pub per_layer_seq_grad: Vec<Matrix<T>>,
}

impl<T: Scalar> SequenceRecord<T> {
    pub fn n_positions(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer_seq_grad.len()
    }
}

fn check_tokens<T: Scalar>(net: &PolicyNet<T>, tokens: &[usize]) -> Result<(), PolicyError> {
    if tokens.len() > net.horizon() {
        return Err(PolicyError::Dimension {
            what: "sequence length",
            expected: net.horizon(),
            got: tokens.len(),
        });
    }
    if let Some(&token) = tokens.iter().find(|&&t| t >= net.vocab_size()) {
        return Err(PolicyError::TokenOutOfRange {
            token,
            vocab: net.vocab_size(),
        });
    }
    Ok(())
}

fn check_features<T: Scalar>(net: &PolicyNet<T>, features: &[T]) -> Result<(), PolicyError> {
    if features.len() != net.layout().n_features {
        return Err(PolicyError::Dimension {
            what: "prompt features",
            expected: net.layout().n_features,
            got: features.len(),
        });
    }
    Ok(())
}

/// Runs the net over a fixed token sequence, feeding each token into the next context.
pub fn trace_tokens<T: Scalar>(
    net: &PolicyNet<T>,
    features: &[T],
    tokens: &[usize],
) -> Result<SequenceTrace<T>, PolicyError> {
    check_features(net, features)?;
    check_tokens(net, tokens)?;
    let layout = net.layout();
    let mut steps = Vec::with_capacity(tokens.len());
    let mut prev = None;
    for (t, &tok) in tokens.iter().enumerate() {
        let ctx = layout.build(prev, t, features);
        steps.push(net.forward_logits(&ctx)?);
        prev = Some(tok);
    }
    Ok(SequenceTrace {
        tokens: tokens.to_vec(),
        steps,
    })
}

/// Log-probability of a token sequence, forward only.
pub fn sequence_logprob<T: Scalar>(net: &PolicyNet<T>, features: &[T], tokens: &[usize]) -> Result<T, PolicyError> {
    let layout = net.layout();
    check_features(net, features)?;
    check_tokens(net, tokens)?;
    let mut total = T::zero();
    let mut prev = None;
    for (t, &tok) in tokens.iter().enumerate() {
        let ctx = layout.build(prev, t, features);
        total = total + log_softmax_at(&net.forward_logits(&ctx)?.logits, tok);
        prev = Some(tok);
    }
    Ok(total)
}

/// Gradient of `Σ_t log π(token_t)` with respect to every layer, keeping the rank-one
/// factors of each position.
pub fn backward_logprob<T: Scalar>(net: &PolicyNet<T>, trace: &SequenceTrace<T>) -> Result<SequenceGrads<T>, PolicyError> {
    let ones = vec![T::one(); trace.tokens.len()];
    backward_weighted(net, trace, &ones)
}

/// Gradient of `Σ_t w_t log π(token_t)`.
///
/// Context only carries sampled tokens (not activations) forward, so the `grad_out` of
/// position `t` depends on the loss at position `t` alone.
pub fn backward_weighted<T: Scalar>(
    net: &PolicyNet<T>,
    trace: &SequenceTrace<T>,
    weights: &[T],
) -> Result<SequenceGrads<T>, PolicyError> {
    if trace.steps.len() != trace.tokens.len() {
        return Err(PolicyError::TraceMismatch(format!(
            "{} recorded steps for {} tokens",
            trace.steps.len(),
            trace.tokens.len()
        )));
    }
    if weights.len() != trace.tokens.len() {
        return Err(PolicyError::TraceMismatch(format!(
            "{} loss weights for {} tokens",
            weights.len(),
            trace.tokens.len()
        )));
    }
    check_tokens(net, &trace.tokens)?;
    let n_layers = net.n_layers();
    for step in &trace.steps {
        if step.layer_inputs.len() != n_layers || step.probs.len() != net.vocab_size() {
            return Err(PolicyError::TraceMismatch("trace recorded with a different architecture".into()));
        }
    }

    let mut per_layer_positions: Vec<Vec<PositionGradFactors<T>>> =
        (0..n_layers).map(|_| Vec::with_capacity(trace.tokens.len())).collect();
    let mut per_layer_seq_grad = net.zeros_like();

    for ((step, &tok), &w) in trace.steps.iter().zip(&trace.tokens).zip(weights) {
        // d/dlogits of w·log softmax(logits)[tok] = w (e_tok - p)
        let mut grad: Vec<T> = step.probs.iter().map(|&p| -w * p).collect();
        grad[tok] = grad[tok] + w;

        let mut layer_grads: Vec<Vec<T>> = vec![Vec::new(); n_layers];
        for l in (0..n_layers).rev() {
            layer_grads[l] = grad.clone();
            if l == 0 {
                break;
            }
            let weight = &net.layers()[l].weight;
            let h = &step.layer_inputs[l];
            let in_dim = weight.cols() - 1;
            let mut below = vec![T::zero(); in_dim];
            for (i, &g) in grad.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                for (b, &wij) in below.iter_mut().zip(&weight.row(i)[..in_dim]) {
                    *b = *b + wij * g;
                }
            }
            for (b, &hj) in below.iter_mut().zip(&h[..in_dim]) {
                *b = *b * (T::one() - hj * hj);
            }
            grad = below;
        }

        for (l, grad_out) in layer_grads.into_iter().enumerate() {
            let act_in = step.layer_inputs[l].clone();
            per_layer_seq_grad[l].add_outer(T::one(), &grad_out, &act_in)?;
            per_layer_positions[l].push(PositionGradFactors { act_in, grad_out });
        }
    }

    Ok(SequenceGrads {
        per_layer_positions,
        per_layer_seq_grad,
    })
}

/// Re-evaluates a fixed token sequence under `net`: log-probability and gradients.
pub fn evaluate_sequence<T: Scalar>(
    net: &PolicyNet<T>,
    prompt: &Prompt<T>,
    tokens: &[usize],
) -> Result<SequenceRecord<T>, PolicyError> {
    let trace = trace_tokens(net, &prompt.features, tokens)?;
    let logprob = trace.logprob();
    let grads = backward_logprob(net, &trace)?;
    Ok(SequenceRecord {
        prompt_id: prompt.id,
        tokens: trace.tokens,
        logprob,
        per_layer_positions: grads.per_layer_positions,
        per_layer_seq_grad: grads.per_layer_seq_grad,
    })
}

fn draw_categorical<T: Scalar, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Samples `horizon` tokens autoregressively and returns the tokens with the trace.
fn sample_trace<T: Scalar, R: Rng + ?Sized>(
    net: &PolicyNet<T>,
    features: &[T],
    rng: &mut R,
) -> Result<SequenceTrace<T>, PolicyError> {
    check_features(net, features)?;
    let layout = net.layout();
    let mut tokens = Vec::with_capacity(layout.horizon);
    let mut steps = Vec::with_capacity(layout.horizon);
    let mut prev = None;
    for t in 0..layout.horizon {
        let ctx = layout.build(prev, t, features);
        let step = net.forward_logits(&ctx)?;
        let tok = draw_categorical(&step.probs, rng);
        tokens.push(tok);
        steps.push(step);
        prev = Some(tok);
    }
    Ok(SequenceTrace { tokens, steps })
}

/// Draws `o ~ π(·|q)` and records log-probability, position factors and reduced gradients.
pub fn sample_sequence<T: Scalar, R: Rng + ?Sized>(
    net: &PolicyNet<T>,
    prompt: &Prompt<T>,
    rng: &mut R,
) -> Result<SequenceRecord<T>, PolicyError> {
    let trace = sample_trace(net, &prompt.features, rng)?;
    let logprob = trace.logprob();
    let grads = backward_logprob(net, &trace)?;
    Ok(SequenceRecord {
        prompt_id: prompt.id,
        tokens: trace.tokens,
        logprob,
        per_layer_positions: grads.per_layer_positions,
        per_layer_seq_grad: grads.per_layer_seq_grad,
    })
}

/// Samples tokens only, returning `(tokens, log π(tokens))`.
pub fn sample_tokens<T: Scalar, R: Rng + ?Sized>(
    net: &PolicyNet<T>,
    features: &[T],
    rng: &mut R,
) -> Result<(Vec<usize>, T), PolicyError> {
    let trace = sample_trace(net, features, rng)?;
    let lp = trace.logprob();
    Ok((trace.tokens, lp))
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode<T: Scalar>(net: &PolicyNet<T>, features: &[T]) -> Result<Vec<usize>, PolicyError> {
    check_features(net, features)?;
    let layout = net.layout();
    let mut tokens = Vec::with_capacity(layout.horizon);
    let mut prev = None;
    for t in 0..layout.horizon {
        let ctx = layout.build(prev, t, features);
        let logits = net.forward_logits(&ctx)?.logits;
        let mut best = 0;
        for (k, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = k;
            }
        }
        tokens.push(best);
        prev = Some(best);
    }
    Ok(tokens)
}

/// Monte Carlo estimate of `KL(π_net ‖ π_ref)`: the mean over `o ~ π_net` of
/// `log π_net(o|q) - log π_ref(o|q)`, with `samples_per_prompt` draws for each prompt.
///
/// Each prompt draws from its own stream (keyed by prompt id) and per-prompt sums are
/// combined in id order, so the estimate does not depend on the order of `prompts`.
pub fn kl_from_reference<T: Scalar>(
    net: &PolicyNet<T>,
    reference: &PolicyNet<T>,
    prompts: &[Prompt<T>],
    samples_per_prompt: usize,
    streams: Streams,
) -> Result<T, PolicyError> {
    if !net.same_architecture(reference) {
        return Err(PolicyError::Architecture("KL needs nets with identical architecture".into()));
    }
    if prompts.is_empty() || samples_per_prompt == 0 {
        return Ok(T::zero());
    }
    let mut per_prompt = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let mut rng = streams.index(prompt.id).rng();
        let mut sum = T::zero();
        for _ in 0..samples_per_prompt {
            let (tokens, lp) = sample_tokens(net, &prompt.features, &mut rng)?;
            let lp_ref = sequence_logprob(reference, &prompt.features, &tokens)?;
            sum = sum + (lp - lp_ref);
        }
        per_prompt.push((prompt.id, sum));
    }
    per_prompt.sort_by_key(|&(id, _)| id);
    let total: T = per_prompt.iter().map(|&(_, s)| s).sum();
    Ok(total / T::from_usize_lossy(prompts.len() * samples_per_prompt))
}
