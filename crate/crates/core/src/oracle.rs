//! Brute-force references on policies small enough to enumerate every output sequence:
//! the exact Fisher matrix, dense natural gradients and materialized position gradients.

use thiserror::Error;

use crate::linalg::{dot, lu_solve, LinalgError, Matrix};
use crate::policy::{evaluate_sequence, ParamLayout, PolicyError, PolicyNet, SequenceRecord};
use crate::tasks::Prompt;
use crate::Scalar;

/// Largest output space `vocab^horizon` that [`exact_fisher`] will enumerate.
pub const MAX_OUTPUTS: usize = 10_000;
/// Largest parameter count for which a dense `P×P` Fisher is formed.
pub const MAX_PARAMS: usize = 1_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("{what} = {got} exceeds the enumeration budget of {limit}")]
    Budget { what: &'static str, limit: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate estimator: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Dense Fisher matrix over the flattened parameters (layer by layer, row-major weights).
#[derive(Debug, Clone, PartialEq)]
pub struct ExactFisher<T> {
    pub f: Matrix<T>,
    pub param_layout: ParamLayout,
}

impl<T: Scalar> ExactFisher<T> {
    /// Wraps an arbitrary square matrix as a single-block Fisher.
    pub fn from_matrix(f: Matrix<T>) -> Result<Self, OracleError> {
        if !f.is_square() {
            return Err(OracleError::InvalidInput(format!("Fisher must be square, got {:?}", f.shape())));
        }
        let n = f.rows();
        Ok(Self {
            f,
            param_layout: ParamLayout {
                shapes: vec![(n, 1)],
                offsets: vec![0],
                total: n,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.f.rows()
    }

    /// `vᵀ F v`.
    pub fn quadratic(&self, v: &[T]) -> T {
        self.f.bilinear(v, v).expect("vector matches Fisher dimension")
    }

    /// Diagonal block of one layer.
    pub fn layer_block(&self, layer: usize) -> Matrix<T> {
        let range = self.param_layout.layer_range(layer);
        let n = range.len();
        Matrix::from_fn(n, n, |i, j| self.f[(range.start + i, range.start + j)])
    }

    /// `vᵀ F_ll v / tr(F_ll)` for a layer update `v`: the population value of the
    /// normalized overlap estimator squared.
    pub fn layer_normalized_quadratic(&self, layer: usize, v: &Matrix<T>) -> T {
        let block = self.layer_block(layer);
        block.bilinear(v.as_slice(), v.as_slice()).expect("layer shape") / block.trace()
    }
}

/// Every token sequence of length `horizon` over `vocab`, in lexicographic order.
pub fn enumerate_outputs(vocab: usize, horizon: usize) -> Result<Vec<Vec<usize>>, OracleError> {
    let count = u32::try_from(horizon)
        .ok()
        .and_then(|h| vocab.checked_pow(h))
        .filter(|&c| c <= MAX_OUTPUTS)
        .ok_or(OracleError::Budget {
            what: "vocab^horizon",
            limit: MAX_OUTPUTS,
            got: vocab.saturating_pow(u32::try_from(horizon).unwrap_or(u32::MAX)),
        })?;
    Ok((0..count)
        .map(|mut code| {
            let mut seq = vec![0; horizon];
            for slot in seq.iter_mut().rev() {
                *slot = code % vocab;
                code /= vocab;
            }
            seq
        })
        .collect())
}

fn check_budget<T: Scalar>(net: &PolicyNet<T>, prompts: &[Prompt<T>]) -> Result<Vec<Vec<usize>>, OracleError> {
    if prompts.is_empty() {
        return Err(OracleError::InvalidInput("at least one prompt is required".into()));
    }
    let p = net.n_params();
    if p > MAX_PARAMS {
        return Err(OracleError::Budget {
            what: "parameters",
            limit: MAX_PARAMS,
            got: p,
        });
    }
    enumerate_outputs(net.vocab_size(), net.horizon())
}

/// `F = E_q Σ_o π(o|q) ∇log π(o|q) ∇log π(o|q)ᵀ`, prompts weighted uniformly.
pub fn exact_fisher<T: Scalar>(net: &PolicyNet<T>, prompts: &[Prompt<T>]) -> Result<ExactFisher<T>, OracleError> {
    let outputs = check_budget(net, prompts)?;
    let layout = net.param_layout();
    let mut f = Matrix::zeros(layout.total, layout.total);
    let weight = T::one() / T::from_usize_lossy(prompts.len());
    for prompt in prompts {
        for tokens in &outputs {
            let rec = evaluate_sequence(net, prompt, tokens)?;
            let g = layout.flatten(&rec.per_layer_seq_grad);
            f.add_outer(weight * rec.logprob.exp(), &g, &g)?;
        }
    }
    Ok(ExactFisher { f, param_layout: layout })
}

/// `E_q Σ_o π(o|q) (∇log π(o|q) · v)²` summed directly, without forming `F`.
pub fn fisher_quadratic_by_enumeration<T: Scalar>(
    net: &PolicyNet<T>,
    prompts: &[Prompt<T>],
    v: &[T],
) -> Result<T, OracleError> {
    let outputs = check_budget(net, prompts)?;
    let layout = net.param_layout();
    if v.len() != layout.total {
        return Err(OracleError::InvalidInput(format!(
            "vector has {} entries, net has {} parameters",
            v.len(),
            layout.total
        )));
    }
    let mut total = T::zero();
    for prompt in prompts {
        for tokens in &outputs {
            let rec = evaluate_sequence(net, prompt, tokens)?;
            let s = dot(&layout.flatten(&rec.per_layer_seq_grad), v);
            total = total + rec.logprob.exp() * s * s;
        }
    }
    Ok(total / T::from_usize_lossy(prompts.len()))
}

/// Exact policy gradient `E_q Σ_o π(o|q) R(q,o) ∇log π(o|q)`, flattened.
pub fn exact_policy_gradient<T: Scalar>(
    net: &PolicyNet<T>,
    prompts: &[Prompt<T>],
    reward: impl Fn(&Prompt<T>, &[usize]) -> T,
) -> Result<Vec<T>, OracleError> {
    let outputs = check_budget(net, prompts)?;
    let layout = net.param_layout();
    let mut g = vec![T::zero(); layout.total];
    let weight = T::one() / T::from_usize_lossy(prompts.len());
    for prompt in prompts {
        for tokens in &outputs {
            let rec = evaluate_sequence(net, prompt, tokens)?;
            let w = weight * rec.logprob.exp() * reward(prompt, tokens);
            for (acc, x) in g.iter_mut().zip(layout.flatten(&rec.per_layer_seq_grad)) {
                *acc = *acc + w * x;
            }
        }
    }
    Ok(g)
}

/// Solves `(F + damping·I) v = g` densely.
pub fn exact_npg<T: Scalar>(fisher: &ExactFisher<T>, g: &[T], damping: T) -> Result<Vec<T>, OracleError> {
    if !(damping >= T::zero()) || !damping.is_finite() {
        return Err(OracleError::InvalidInput(format!("damping must be finite and nonnegative, got {damping}")));
    }
    Ok(lu_solve(&damped(&fisher.f, damping), g)?)
}

/// `1e-6 · tr(F) / P`.
pub fn default_damping<T: Scalar>(fisher: &ExactFisher<T>) -> T {
    T::lit(1e-6) * fisher.f.trace() / T::from_usize_lossy(fisher.dim().max(1))
}

fn damped<T: Scalar>(f: &Matrix<T>, damping: T) -> Matrix<T> {
    let mut out = f.clone();
    for i in 0..out.rows() {
        out[(i, i)] = out[(i, i)] + damping;
    }
    out
}

/// `(λv − n)ᵀ F_d (λv − n)` with `F_d = F + damping·I` and `n = F_d⁻¹ g`: squared Fisher
/// distance between a scalar multiple of `v` and the natural gradient.
pub fn npg_projection_objective<T: Scalar>(
    fisher: &ExactFisher<T>,
    damping: T,
    v: &[T],
    g: &[T],
    lambda: T,
) -> Result<T, OracleError> {
    let n = exact_npg(fisher, g, damping)?;
    let diff: Vec<T> = v.iter().zip(&n).map(|(&vi, &ni)| lambda * vi - ni).collect();
    Ok(damped(&fisher.f, damping).bilinear(&diff, &diff)?)
}

/// Minimizer of [`npg_projection_objective`] when `g = A·v`: `λ* = A‖v‖² / vᵀF_d v`.
pub fn optimal_projection_scale<T: Scalar>(fisher: &ExactFisher<T>, damping: T, v: &[T], advantage: T) -> T {
    let fv = fisher.quadratic(v) + damping * dot(v, v);
    advantage * dot(v, v) / fv
}

/// The position-wise rank-one gradients `g_out,j a_in,jᵀ` of one layer.
pub fn materialize_position_grads<T: Scalar>(record: &SequenceRecord<T>, layer: usize) -> Vec<Matrix<T>> {
    record.per_layer_positions[layer]
        .iter()
        .map(|f| f.to_matrix())
        .collect()
}

/// `sqrt(Σ_j ⟨g_j, V⟩²) / sqrt(Σ_j ‖g_j‖²)` on fully materialized matrices.
pub fn naive_fisher_norm_estimate<T: Scalar>(v: &Matrix<T>, position_grads: &[Matrix<T>]) -> Result<T, OracleError> {
    let mut num = T::zero();
    let mut den = T::zero();
    for g in position_grads {
        let o = g.frobenius_dot(v)?;
        num = num + o * o;
        let n = g.frobenius_norm();
        den = den + n * n;
    }
    if den == T::zero() {
        return Err(OracleError::Degenerate("all sampled position gradients are zero".into()));
    }
    Ok(num.sqrt() / den.sqrt())
}

/// Cosine similarity of two flat vectors (zero if either vanishes).
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    dot(a, b) / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isopo::{draw_overlap_samples, fisher_norm_estimate, LayerSamples};
    use crate::linalg::sym_eigh;
    use crate::policy::{ContextLayout, LayerWeights};
    use crate::rng::Streams;
    use crate::tasks::{sample_microbatch, SeqTask, Task};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle_task() -> Task {
        Task::Seq(SeqTask {
            modulus: 4,
            horizon: 3,
            exact_match: false,
        })
    }

    fn oracle_net(seed: u64) -> PolicyNet<f64> {
        PolicyNet::new(oracle_task().layout(), &[4], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn prompts() -> Vec<Prompt<f64>> {
        [1, 6, 11].iter().map(|&i| oracle_task().prompt(i)).collect()
    }

    #[test]
    fn enumerates_in_order() {
        let outs = enumerate_outputs(3, 2).unwrap();
        assert_eq!(outs.len(), 9);
        assert_eq!(outs[0], vec![0, 0]);
        assert_eq!(outs[5], vec![1, 2]);
        assert!(matches!(enumerate_outputs(10, 5), Err(OracleError::Budget { .. })));
        assert!(matches!(enumerate_outputs(2, 200), Err(OracleError::Budget { .. })));
    }

    #[test]
    fn refuses_large_nets() {
        let task = oracle_task();
        let net = PolicyNet::<f64>::zeros(task.layout(), &[64]);
        assert!(matches!(
            exact_fisher(&net, &prompts()),
            Err(OracleError::Budget { what: "parameters", .. })
        ));
    }

    #[test]
    fn two_class_closed_form() {
        // one step, vocab 2: ∇_{W_ij} log p_k = (δ_ik − p_i) x_j, so F = p(1−p)[[1,−1],[−1,1]] ⊗ xxᵀ
        let layout = ContextLayout {
            vocab: 2,
            horizon: 1,
            n_features: 0,
        };
        for b in [0.0f64, 0.8, -2.0] {
            let w = Matrix::from_rows(&[[0.0, 0.0, 0.0, b], [0.0, 0.0, 0.0, 0.0]]);
            let net = PolicyNet::from_layers(layout, vec![LayerWeights { weight: w }]).unwrap();
            let prompt = Prompt {
                id: 0,
                features: vec![],
                target: vec![0],
            };
            let fisher = exact_fisher(&net, &[prompt]).unwrap();
            let p = 1.0 / (1.0 + (-b).exp());
            let x = [0.0, 0.0, 1.0, 1.0];
            let expected = Matrix::from_fn(8, 8, |r, c| {
                let (i, j) = (r / 4, r % 4);
                let (k, l) = (c / 4, c % 4);
                let sign = if i == k { 1.0 } else { -1.0 };
                sign * p * (1.0 - p) * x[j] * x[l]
            });
            assert!(fisher.f.sub(&expected).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn fisher_is_symmetric_psd() {
        let fisher = exact_fisher(&oracle_net(1), &prompts()).unwrap();
        fisher.f.check_symmetric(1e-14).unwrap();
        let eig = sym_eigh(&fisher.f).unwrap();
        assert!(eig.eigenvalues[0] >= -1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let v: Vec<f64> = (0..fisher.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert!(fisher.quadratic(&v) >= 0.0);
        }
    }

    #[test]
    fn quadratic_form_matches_direct_enumeration() {
        let net = oracle_net(3);
        let fisher = exact_fisher(&net, &prompts()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let v: Vec<f64> = (0..fisher.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let direct = fisher_quadratic_by_enumeration(&net, &prompts(), &v).unwrap();
            assert!((fisher.quadratic(&v) - direct).abs() <= 1e-12 * direct.max(1.0));
        }
    }

    #[test]
    fn npg_examples() {
        let eye = ExactFisher::from_matrix(Matrix::<f64>::identity(3)).unwrap();
        assert_eq!(exact_npg(&eye, &[1.0, -2.0, 3.0], 0.0).unwrap(), vec![1.0, -2.0, 3.0]);
        let diag = ExactFisher::from_matrix(Matrix::from_diag(&[2.0, 4.0])).unwrap();
        assert_eq!(exact_npg(&diag, &[2.0, 4.0], 0.0).unwrap(), vec![1.0, 1.0]);
        let singular = ExactFisher::from_matrix(Matrix::from_diag(&[1.0, 0.0])).unwrap();
        assert!(matches!(
            exact_npg(&singular, &[1.0, 1.0], 0.0),
            Err(OracleError::Linalg(LinalgError::Singular(_)))
        ));
        assert!(exact_npg(&singular, &[1.0, 1.0], 1e-3).is_ok());
        assert!(exact_npg(&eye, &[1.0, 1.0, 1.0], -1.0).is_err());
    }

    #[test]
    fn npg_residual_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [3, 10, 40] {
            let b = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let mut spd = b.transpose().matmul(&b).unwrap();
            for i in 0..n {
                spd[(i, i)] += 0.1;
            }
            let fisher = ExactFisher::from_matrix(spd.clone()).unwrap();
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d = 1e-3;
            let v = exact_npg(&fisher, &g, d).unwrap();
            let fv = spd.matvec(&v).unwrap();
            let resid: Vec<f64> = fv.iter().zip(&v).zip(&g).map(|((a, x), b)| a + d * x - b).collect();
            assert!(dot(&resid, &resid).sqrt() <= 1e-9 * dot(&g, &g).sqrt());

            // vanishing damping on a well-conditioned matrix agrees with the undamped solve
            let tiny = exact_npg(&fisher, &g, 1e-14).unwrap();
            let exact = lu_solve(&spd, &g).unwrap();
            let scale = exact.iter().fold(0.0f64, |s, x| s.max(x.abs()));
            assert!(tiny.iter().zip(&exact).all(|(a, b)| (a - b).abs() <= 1e-9 * scale));
        }
    }

    #[test]
    fn projection_scale_minimizes_objective() {
        let net = oracle_net(7);
        let fisher = exact_fisher(&net, &prompts()).unwrap();
        let d = default_damping(&fisher);
        let rec = evaluate_sequence(&net, &prompts()[0], &[1, 0, 3]).unwrap();
        let v = fisher.param_layout.flatten(&rec.per_layer_seq_grad);
        let a = 0.6;
        let g: Vec<f64> = v.iter().map(|x| a * x).collect();
        let lambda = optimal_projection_scale(&fisher, d, &v, a);
        let at = |l: f64| npg_projection_objective(&fisher, d, &v, &g, l).unwrap();
        let best = at(lambda);
        assert!(at(lambda * 1.01) > best && at(lambda * 0.99) > best);
    }

    #[test]
    fn position_grads_sum_and_rank() {
        let net = oracle_net(9);
        let rec = evaluate_sequence(&net, &prompts()[1], &[2, 2, 0]).unwrap();
        for l in 0..net.n_layers() {
            let mats = materialize_position_grads(&rec, l);
            assert_eq!(mats.len(), 3);
            let mut sum = Matrix::zeros(mats[0].rows(), mats[0].cols());
            for m in &mats {
                sum.axpy(1.0, m).unwrap();
                // Σ (2×2 minors)² = Σ_{i<j} σ_i²σ_j² ≥ σ₁²σ₂², so σ₂/σ₁ ≤ sqrt(Σ minors²)/σ₁²
                let mut minors = 0.0;
                for i in 0..m.rows() {
                    for k in (i + 1)..m.rows() {
                        for j in 0..m.cols() {
                            for l in (j + 1)..m.cols() {
                                let d = m[(i, j)] * m[(k, l)] - m[(i, l)] * m[(k, j)];
                                minors += d * d;
                            }
                        }
                    }
                }
                let s1_sq = sym_eigh(&m.matmul(&m.transpose()).unwrap()).unwrap().eigenvalues[m.rows() - 1];
                if s1_sq > 0.0 {
                    assert!(minors.sqrt() / s1_sq < 1e-10);
                }
            }
            assert!(sum.sub(&rec.per_layer_seq_grad[l]).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn naive_estimator_matches_factor_form() {
        let net = oracle_net(10);
        let task = oracle_task();
        let mb = sample_microbatch(&net, &task, &prompts(), 4, false, Streams::new(10)).unwrap();
        let recs = mb.record_refs();
        let samples = draw_overlap_samples(&recs, 16, &mut ChaCha8Rng::seed_from_u64(0));
        for (l, layer) in samples.layers.iter().enumerate() {
            let mats: Vec<_> = layer.factors.iter().map(|f| f.to_matrix()).collect();
            for rec in &recs {
                let v = &rec.per_layer_seq_grad[l];
                let fast = fisher_norm_estimate(v, layer).unwrap();
                let slow = naive_fisher_norm_estimate(v, &mats).unwrap();
                assert!((fast - slow).abs() <= 1e-10 * slow.max(1e-300));
            }
        }
        let empty = LayerSamples::<f64>::new(vec![], vec![]);
        assert!(empty.is_empty());
        assert!(naive_fisher_norm_estimate(&Matrix::<f64>::zeros(2, 2), &[]).is_err());
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[2.0, 0.0]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }
}
