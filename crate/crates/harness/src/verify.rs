//! Verification suites behind the `gradcheck` and `oracle-check` subcommands.
//!
//! Each suite records a per-check error against a fixed tolerance. A suite fails when any
//! check exceeds its tolerance, produces a non-finite error, or cannot be set up.

use std::fmt;

use rand::Rng;

use isopo_lab::baselines::{
    grpo_clipped_grad, grpo_surrogate, reinforce_grad, reinforce_objective, OldPolicySnapshot,
};
use isopo_lab::isopo::{
    build_ntk, draw_overlap_samples, estimate_fisher_norms, fisher_norm_estimate, interacting_update,
    noninteracting_update, rescaling, LayerSamples, RescalingParams,
};
use isopo_lab::linalg::{dot, lu_solve, norm, sym_eigh, Matrix};
use isopo_lab::oracle::{
    cosine, default_damping, exact_fisher, exact_npg, fisher_quadratic_by_enumeration,
    materialize_position_grads, naive_fisher_norm_estimate, npg_projection_objective, optimal_projection_scale,
    ExactFisher,
};
use isopo_lab::policy::{
    backward_logprob, sample_sequence, sequence_logprob, trace_tokens, PolicyError, PolicyNet, SequenceGrads,
    SequenceTrace,
};
use isopo_lab::rng::Streams;
use isopo_lab::tasks::{choose_prompts, sample_microbatch, Microbatch, Prompt, SeqTask, Task};

use crate::config::{Algo, RunConfig, TaskKind};
use crate::train::setup;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;
pub const RANK_ONE_TOL: f64 = 1e-10;
pub const RANK_ONE_TRIALS: usize = 100;
pub const INTERACTING_TOL: f64 = 1e-9;
pub const INTERACTING_SIZES: [usize; 4] = [1, 2, 8, 32];
pub const IDENTITY_RESCALING_TOL: f64 = 1e-12;
pub const GRPO_UNIT_RATIO_TOL: f64 = 1e-10;
pub const LARGE_C_ANGLE_TOL: f64 = 1e-3;
pub const PSD_EIGEN_TOL: f64 = 1e-12;
pub const QUADRATIC_TOL: f64 = 1e-12;
pub const CONSISTENCY_TOL: f64 = 0.25;
pub const CONSISTENCY_OVERLAP: usize = 512;
pub const CONSISTENCY_REDRAWS: usize = 20;
pub const NPG_DAMPING_TOL: f64 = 1e-9;
pub const MINIMIZER_INSTANCES: usize = 20;
pub const NPG_TRIALS: usize = 50;
/// Fraction of trials in which the interacting direction must beat the vanilla gradient.
pub const NPG_MIN_WIN_RATE: f64 = 0.8;
pub const SELF_NORMALIZATION_TOL: f64 = 1e-9;

/// Tiny enumerable policy: vocab 4, three tokens, one hidden layer of width 4.
pub const ORACLE_TASK: SeqTask = SeqTask {
    modulus: 4,
    horizon: 3,
    exact_match: false,
};
pub const ORACLE_HIDDEN: [usize; 1] = [4];
pub const ORACLE_PROMPTS: [u64; 3] = [1, 6, 11];

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub layer: Option<usize>,
    pub detail: String,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub checks: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub failures: Vec<Failure>,
    /// Set when the suite could not run to completion.
    pub setup_error: Option<String>,
}

impl SuiteResult {
    pub fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            checks: 0,
            max_error: 0.0,
            tolerance,
            failures: Vec::new(),
            setup_error: None,
        }
    }

    pub fn record(&mut self, layer: Option<usize>, detail: impl FnOnce() -> String, error: f64) {
        self.checks += 1;
        if error.is_nan() || error > self.max_error {
            self.max_error = error;
        }
        if !(error <= self.tolerance) {
            self.failures.push(Failure {
                layer,
                detail: detail(),
                error,
            });
        }
    }

    pub fn passed(&self) -> bool {
        self.setup_error.is_none() && self.failures.is_empty() && self.checks > 0
    }

    fn finish<E: fmt::Display>(mut self, outcome: Result<(), E>) -> Self {
        if let Err(e) = outcome {
            self.setup_error = Some(e.to_string());
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub suites: Vec<SuiteResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }
}

const MAX_LISTED_FAILURES: usize = 10;

pub fn print_report(report: &Report) {
    for s in &report.suites {
        println!(
            "{} {:<36} checks {:>6}  max error {:.3e}  tolerance {:.1e}",
            if s.passed() { "PASS" } else { "FAIL" },
            s.name,
            s.checks,
            s.max_error,
            s.tolerance
        );
        if let Some(e) = &s.setup_error {
            println!("     error: {e}");
        }
        for f in s.failures.iter().take(MAX_LISTED_FAILURES) {
            match f.layer {
                Some(l) => println!("     layer {l}: {} (error {:.3e})", f.detail, f.error),
                None => println!("     {} (error {:.3e})", f.detail, f.error),
            }
        }
        if s.failures.len() > MAX_LISTED_FAILURES {
            println!("     ... {} more", s.failures.len() - MAX_LISTED_FAILURES);
        }
    }
}

/// Reverse-mode gradient under test.
pub type Backward<'a> = &'a dyn Fn(&PolicyNet<f64>, &SequenceTrace<f64>) -> Result<SequenceGrads<f64>, PolicyError>;

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn rel_vec_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(f64::MIN_POSITIVE)
}

fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn max_abs_diff(a: &[Matrix<f64>], b: &[Matrix<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.sub(y).map_or(f64::INFINITY, |d| d.max_abs()))
        .fold(0.0, f64::max)
}

/// Default gradcheck configuration: the sequence task at its default size.
pub fn default_check_config() -> RunConfig {
    RunConfig::new(TaskKind::SeqTask, Algo::Reinforce)
}

fn check_batch(cfg: &RunConfig, net: &PolicyNet<f64>, task: &Task, label: &str) -> Result<Microbatch<f64>, PolicyError> {
    let streams = Streams::new(cfg.seed).fork(label);
    let prompts = choose_prompts(&task.train_prompts(), 2, &mut streams.fork("prompts").rng());
    sample_microbatch(net, task, &prompts, 4, false, streams.fork("policy"))
}

/// Central differences of `f` against a flattened analytic gradient, one record per layer
/// holding the worst parameter of that layer.
fn fd_layers(
    suite: &mut SuiteResult,
    net: &PolicyNet<f64>,
    analytic: &[Matrix<f64>],
    what: &str,
    f: impl Fn(&PolicyNet<f64>) -> Result<f64, String>,
) -> Result<(), String> {
    let layout = net.param_layout();
    if analytic.len() != net.n_layers() {
        return Err(format!("{what}: {} gradient layers for {} net layers", analytic.len(), net.n_layers()));
    }
    let flat = layout.flatten(analytic);
    let theta = net.params_flat();
    let mut probe = net.clone();
    for l in 0..net.n_layers() {
        let mut worst = (0.0f64, 0usize, 0.0, 0.0);
        for i in layout.layer_range(l) {
            let mut t = theta.clone();
            t[i] += FD_STEP;
            probe.set_params_flat(&t);
            let up = f(&probe)?;
            t[i] = theta[i] - FD_STEP;
            probe.set_params_flat(&t);
            let down = f(&probe)?;
            let fd = (up - down) / (2.0 * FD_STEP);
            let err = rel_error(fd, flat[i]);
            if err.is_nan() || err > worst.0 {
                worst = (err, i, fd, flat[i]);
            }
        }
        let (err, i, fd, an) = worst;
        suite.record(
            Some(l),
            || format!("{what}: parameter {} finite difference {fd:.6e} vs analytic {an:.6e}", i - layout.layer_range(l).start),
            err,
        );
    }
    Ok(())
}

/// Reverse-mode `∇ log π(o|q)` against central differences on a few sampled sequences.
pub fn policy_fd_suite(net: &PolicyNet<f64>, prompts: &[Prompt<f64>], streams: &Streams, backward: Backward) -> SuiteResult {
    let mut suite = SuiteResult::new("policy log-prob gradient", FD_TOL);
    let outcome = (|| -> Result<(), String> {
        for (k, p) in prompts.iter().enumerate() {
            let rec = sample_sequence(net, p, &mut streams.index(k as u64).rng()).map_err(|e| e.to_string())?;
            let trace = trace_tokens(net, &p.features, &rec.tokens).map_err(|e| e.to_string())?;
            let grads = backward(net, &trace).map_err(|e| e.to_string())?;
            fd_layers(&mut suite, net, &grads.per_layer_seq_grad, &format!("prompt {}", p.id), |n| {
                sequence_logprob(n, &p.features, &rec.tokens).map_err(|e| e.to_string())
            })?;
        }
        Ok(())
    })();
    suite.finish(outcome)
}

pub fn reinforce_fd_suite(net: &PolicyNet<f64>, batch: &Microbatch<f64>) -> SuiteResult {
    let mut suite = SuiteResult::new("reinforce surrogate gradient", FD_TOL);
    let outcome = (|| -> Result<(), String> {
        let g = reinforce_grad(&batch.record_refs(), &batch.advantages()).map_err(|e| e.to_string())?;
        fd_layers(&mut suite, net, &g, "surrogate", |n| {
            reinforce_objective(n, batch).map_err(|e| e.to_string())
        })
    })();
    suite.finish(outcome)
}

/// Clipped surrogate at a policy moved away from the sampling policy, so that ratios differ
/// from one and some sequences are clipped. Perturbations that put a ratio within reach of a
/// clipping kink are redrawn.
pub fn grpo_fd_suite(net: &PolicyNet<f64>, batch: &Microbatch<f64>, streams: &Streams) -> SuiteResult {
    const CLIP_EPS: f64 = 0.02;
    const KINK_MARGIN: f64 = 1e-3;
    let mut suite = SuiteResult::new("grpo clipped surrogate gradient", FD_TOL);
    let outcome = (|| -> Result<(), String> {
        let snapshot = OldPolicySnapshot::from_microbatch(batch);
        for attempt in 0..20u64 {
            let mut rng = streams.index(attempt).rng();
            let theta: Vec<f64> = net.params_flat().iter().map(|&t| t + 0.01 * rng.gen_range(-1.0..1.0)).collect();
            let mut moved = net.clone();
            moved.set_params_flat(&theta);
            let out = grpo_clipped_grad(&moved, batch, &snapshot, CLIP_EPS).map_err(|e| e.to_string())?;
            let near_kink = out
                .ratios
                .iter()
                .any(|&r| (r - 1.0 - CLIP_EPS).abs() < KINK_MARGIN || (r - 1.0 + CLIP_EPS).abs() < KINK_MARGIN);
            if near_kink {
                continue;
            }
            return fd_layers(&mut suite, &moved, &out.grads, "surrogate", |n| {
                grpo_surrogate(n, batch, &snapshot, CLIP_EPS).map_err(|e| e.to_string())
            });
        }
        Err("every perturbation left a ratio next to a clipping kink".into())
    })();
    suite.finish(outcome)
}

/// Factored overlap estimator against the naive estimator on materialized rank-one matrices,
/// over random update matrices and random position subsets.
pub fn rank_one_suite(batch: &Microbatch<f64>, streams: &Streams) -> SuiteResult {
    let mut suite = SuiteResult::new("rank-one overlap estimator", RANK_ONE_TOL);
    let outcome = (|| -> Result<(), String> {
        let records = batch.record_refs();
        let positions: Vec<(usize, usize)> = records
            .iter()
            .enumerate()
            .flat_map(|(s, r)| (0..r.n_positions()).map(move |t| (s, t)))
            .collect();
        let n_layers = records.first().map_or(0, |r| r.n_layers());
        for l in 0..n_layers {
            let materialized: Vec<Vec<Matrix<f64>>> = records.iter().map(|r| materialize_position_grads(r, l)).collect();
            let (rows, cols) = records[0].per_layer_seq_grad[l].shape();
            let mut rng = streams.index(l as u64).rng();
            for trial in 0..RANK_ONE_TRIALS {
                let v = random_matrix(rows, cols, &mut rng);
                let k = rng.gen_range(1..=positions.len());
                let picked = rand::seq::index::sample(&mut rng, positions.len(), k).into_vec();
                let factors = picked
                    .iter()
                    .map(|&i| records[positions[i].0].per_layer_positions[l][positions[i].1].clone())
                    .collect();
                let owners = picked.iter().map(|&i| positions[i].0).collect();
                let full: Vec<Matrix<f64>> = picked
                    .iter()
                    .map(|&i| materialized[positions[i].0][positions[i].1].clone())
                    .collect();
                let fast = fisher_norm_estimate(&v, &LayerSamples::new(factors, owners)).map_err(|e| e.to_string())?;
                let naive = naive_fisher_norm_estimate(&v, &full).map_err(|e| e.to_string())?;
                let err = (fast - naive).abs() / naive.abs().max(f64::MIN_POSITIVE);
                suite.record(Some(l), || format!("trial {trial} ({k} positions): {fast:.12e} vs {naive:.12e}"), err);
            }
        }
        Ok(())
    })();
    suite.finish(outcome)
}

/// `Jᵀ(JJᵀ + cI)⁻¹A` built densely from flattened gradients and solved by LU.
pub fn dense_interacting(seq_grads: &[&Matrix<f64>], advantages: &[f64], c: f64) -> Result<Vec<f64>, String> {
    let m = seq_grads.len();
    let rows: Vec<&[f64]> = seq_grads.iter().map(|g| g.as_slice()).collect();
    let mut k = Matrix::from_fn(m, m, |i, j| dot(rows[i], rows[j]));
    for i in 0..m {
        k[(i, i)] += c;
    }
    let y = lu_solve(&k, advantages).map_err(|e| e.to_string())?;
    let p = rows.first().map_or(0, |r| r.len());
    Ok((0..p).map(|j| (0..m).map(|i| y[i] * rows[i][j]).sum()).collect())
}

/// Layer-wise interacting update against the dense solve, for several microbatch sizes and a
/// rank-deficient kernel built from duplicated gradients.
pub fn interacting_suite(shapes: &[(usize, usize)], streams: &Streams) -> SuiteResult {
    let mut suite = SuiteResult::new("interacting update vs dense solve", INTERACTING_TOL);
    let outcome = (|| -> Result<(), String> {
        for (l, &(rows, cols)) in shapes.iter().enumerate() {
            let mut rng = streams.index(l as u64).rng();
            let cases = INTERACTING_SIZES.iter().map(|&m| (m, false)).chain([(8, true)]);
            for (m, duplicated) in cases {
                let mut grads: Vec<Matrix<f64>> = (0..m).map(|_| random_matrix(rows, cols, &mut rng)).collect();
                if duplicated {
                    for i in (1..m).step_by(2) {
                        grads[i] = grads[i - 1].clone();
                    }
                }
                let adv: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let refs: Vec<&Matrix<f64>> = grads.iter().collect();
                let mean_k = refs.iter().map(|g| g.frobenius_norm().powi(2)).sum::<f64>() / m as f64;
                for c in [1e-2 * mean_k, mean_k] {
                    let u = interacting_update(&refs, &adv, c).map_err(|e| e.to_string())?;
                    let dense = dense_interacting(&refs, &adv, c)?;
                    let err = rel_vec_error(u.as_slice(), &dense);
                    let tag = if duplicated { " duplicated" } else { "" };
                    suite.record(Some(l), || format!("m = {m}{tag}, c = {c:.3e}"), err);
                }
            }
        }
        Ok(())
    })();
    suite.finish(outcome)
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b).clamp(-1.0, 1.0).acos()
}

/// Settings under which the ISOPO variants reduce to the baselines.
pub fn degeneracy_suites(net: &PolicyNet<f64>, batch: &Microbatch<f64>, streams: &Streams) -> Vec<SuiteResult> {
    let records = batch.record_refs();
    let adv = batch.advantages();
    let vanilla = reinforce_grad(&records, &adv);

    let mut identity = SuiteResult::new("identity rescaling equals reinforce", IDENTITY_RESCALING_TOL);
    let outcome = (|| -> Result<(), String> {
        let vanilla = vanilla.as_ref().map_err(|e| e.to_string())?;
        let samples = draw_overlap_samples(&records, 64, &mut streams.fork("overlap").rng());
        let mut params = RescalingParams::identity();
        let u = noninteracting_update(&records, &adv, &mut params, &samples, false).map_err(|e| e.to_string())?;
        for (l, (a, b)) in u.grads.iter().zip(vanilla).enumerate() {
            identity.record(Some(l), || "max abs difference".into(), max_abs_diff(std::slice::from_ref(a), std::slice::from_ref(b)));
        }
        Ok(())
    })();
    let identity = identity.finish(outcome);

    let mut unit_ratio = SuiteResult::new("grpo at unit ratio equals reinforce", GRPO_UNIT_RATIO_TOL);
    let outcome = (|| -> Result<(), String> {
        let vanilla = vanilla.as_ref().map_err(|e| e.to_string())?;
        let snapshot = OldPolicySnapshot::from_microbatch(batch);
        let out = grpo_clipped_grad(net, batch, &snapshot, 0.2).map_err(|e| e.to_string())?;
        for (l, (a, b)) in out.grads.iter().zip(vanilla).enumerate() {
            unit_ratio.record(Some(l), || "max abs difference".into(), max_abs_diff(std::slice::from_ref(a), std::slice::from_ref(b)));
        }
        Ok(())
    })();
    let unit_ratio = unit_ratio.finish(outcome);

    let mut large_c = SuiteResult::new("interacting at large c follows reinforce", LARGE_C_ANGLE_TOL);
    let outcome = (|| -> Result<(), String> {
        let vanilla = vanilla.as_ref().map_err(|e| e.to_string())?;
        for (l, v) in vanilla.iter().enumerate() {
            let sg: Vec<&Matrix<f64>> = records.iter().map(|r| &r.per_layer_seq_grad[l]).collect();
            let ntk = build_ntk(&sg).map_err(|e| e.to_string())?;
            let k_norm = ntk.eig.eigenvalues.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            let u = interacting_update(&sg, &adv, 1e6 * k_norm).map_err(|e| e.to_string())?;
            large_c.record(Some(l), || "angle to vanilla gradient (rad)".into(), angle(u.as_slice(), v.as_slice()));
        }
        Ok(())
    })();
    let large_c = large_c.finish(outcome);

    vec![identity, unit_ratio, large_c]
}

/// With `p = −1` and no regularization every rescaled sequence gradient has unit estimated
/// Fisher norm under the sample set that produced its scale.
pub fn self_normalization_suite(batch: &Microbatch<f64>, n_overlap: usize, streams: &Streams) -> SuiteResult {
    let mut suite = SuiteResult::new("fisher-normalized rescaling", SELF_NORMALIZATION_TOL);
    let outcome = (|| -> Result<(), String> {
        let records = batch.record_refs();
        let samples = draw_overlap_samples(&records, n_overlap, &mut streams.rng());
        let f_norms = estimate_fisher_norms(&records, &samples, false).map_err(|e| e.to_string())?;
        let params = RescalingParams::fisher_normalized();
        for (l, per_seq) in f_norms.iter().enumerate() {
            for (s, f) in per_seq.iter().enumerate() {
                let Some(f) = *f else { continue };
                let w = rescaling(&records[s].per_layer_seq_grad[l], f, &params, l);
                let fw = fisher_norm_estimate(&w, &samples.layers[l]).map_err(|e| e.to_string())?;
                suite.record(Some(l), || format!("sequence {s}: estimate {f:.6e} rescaled to {fw:.15}"), (fw - 1.0).abs());
            }
        }
        Ok(())
    })();
    suite.finish(outcome)
}

/// Finite-difference and equivalence suites on the policy of `cfg` (defaults when `None`).
pub fn gradcheck(cfg: Option<&RunConfig>) -> Report {
    gradcheck_with(cfg, &backward_logprob)
}

pub fn gradcheck_with(cfg: Option<&RunConfig>, backward: Backward) -> Report {
    let cfg = cfg.cloned().unwrap_or_else(default_check_config);
    let (task, net) = setup(&cfg);
    let streams = Streams::new(cfg.seed).fork("gradcheck");
    let prompts = choose_prompts(&task.train_prompts(), 2, &mut streams.fork("fd-prompts").rng());
    let mut suites = vec![policy_fd_suite(&net, &prompts, &streams.fork("fd"), backward)];
    match check_batch(&cfg, &net, &task, "gradcheck-batch") {
        Ok(batch) => {
            suites.push(reinforce_fd_suite(&net, &batch));
            suites.push(grpo_fd_suite(&net, &batch, &streams.fork("grpo")));
            suites.push(rank_one_suite(&batch, &streams.fork("rank-one")));
            suites.extend(degeneracy_suites(&net, &batch, &streams.fork("degenerate")));
        }
        Err(e) => {
            for name in [
                "reinforce surrogate gradient",
                "grpo clipped surrogate gradient",
                "rank-one overlap estimator",
                "identity rescaling equals reinforce",
                "grpo at unit ratio equals reinforce",
                "interacting at large c follows reinforce",
            ] {
                let mut s = SuiteResult::new(name, 0.0);
                s.setup_error = Some(format!("sampling microbatch: {e}"));
                suites.push(s);
            }
        }
    }
    let shapes: Vec<(usize, usize)> = net.zeros_like().iter().map(Matrix::shape).collect();
    suites.push(interacting_suite(&shapes, &streams.fork("interacting")));
    Report { suites }
}

/// The enumerable oracle policy for seed `seed`, with its prompts and exact Fisher.
pub struct OracleFixture {
    pub task: Task,
    pub net: PolicyNet<f64>,
    pub prompts: Vec<Prompt<f64>>,
    pub fisher: ExactFisher<f64>,
}

impl OracleFixture {
    pub fn new(seed: u64) -> Result<Self, String> {
        let task = Task::Seq(ORACLE_TASK);
        let net = PolicyNet::new(task.layout(), &ORACLE_HIDDEN, &mut Streams::new(seed).fork("oracle-init").rng());
        let prompts: Vec<Prompt<f64>> = ORACLE_PROMPTS.iter().map(|&id| task.prompt(id)).collect();
        let fisher = exact_fisher(&net, &prompts).map_err(|e| e.to_string())?;
        Ok(Self {
            task,
            net,
            prompts,
            fisher,
        })
    }

    pub fn microbatch(&self, group_size: usize, streams: Streams) -> Result<Microbatch<f64>, String> {
        sample_microbatch(&self.net, &self.task, &self.prompts, group_size, false, streams).map_err(|e| e.to_string())
    }
}

fn random_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn fisher_psd_suite(fixture: &OracleFixture, streams: &Streams) -> SuiteResult {
    let mut suite = SuiteResult::new("exact fisher is PSD", PSD_EIGEN_TOL);
    let outcome = (|| -> Result<(), String> {
        let eig = sym_eigh(&fixture.fisher.f).map_err(|e| e.to_string())?;
        let min = eig.eigenvalues.first().copied().unwrap_or(0.0);
        suite.record(None, || format!("smallest eigenvalue {min:.3e}"), (-min).max(0.0));
        let mut rng = streams.rng();
        for k in 0..100 {
            let v = random_vec(fixture.fisher.dim(), &mut rng);
            let q = fixture.fisher.quadratic(&v);
            suite.record(None, || format!("vector {k}: vᵀFv = {q:.3e}"), (-q).max(0.0) / dot(&v, &v));
        }
        Ok(())
    })();
    suite.finish(outcome)
}

pub fn fisher_quadratic_suite(fixture: &OracleFixture, streams: &Streams) -> SuiteResult {
    let mut suite = SuiteResult::new("fisher quadratic vs enumeration", QUADRATIC_TOL);
    let outcome = (|| -> Result<(), String> {
        let mut rng = streams.rng();
        for k in 0..20 {
            let v = random_vec(fixture.fisher.dim(), &mut rng);
            let direct = fisher_quadratic_by_enumeration(&fixture.net, &fixture.prompts, &v).map_err(|e| e.to_string())?;
            let q = fixture.fisher.quadratic(&v);
            suite.record(None, || format!("vector {k}: {q:.15e} vs {direct:.15e}"), (q - direct).abs() / direct.abs().max(f64::MIN_POSITIVE));
        }
        Ok(())
    })();
    suite.finish(outcome)
}

/// Mean squared overlap estimate of a fixed update against `vᵀF_ll v / tr(F_ll)`.
pub fn consistency_suite(fixture: &OracleFixture, streams: &Streams) -> SuiteResult {
    let mut suite = SuiteResult::new("overlap estimator consistency", CONSISTENCY_TOL);
    let outcome = (|| -> Result<(), String> {
        let mut rng = streams.fork("updates").rng();
        let updates: Vec<Matrix<f64>> = fixture
            .net
            .zeros_like()
            .iter()
            .map(|z| random_matrix(z.rows(), z.cols(), &mut rng))
            .collect();
        let mut sums = vec![0.0; updates.len()];
        for r in 0..CONSISTENCY_REDRAWS as u64 {
            let batch = fixture.microbatch(64, streams.fork("policy").index(r))?;
            let records = batch.record_refs();
            let samples = draw_overlap_samples(&records, CONSISTENCY_OVERLAP, &mut streams.fork("overlap").index(r).rng());
            for (l, v) in updates.iter().enumerate() {
                let f = fisher_norm_estimate(v, &samples.layers[l]).map_err(|e| e.to_string())?;
                sums[l] += f * f;
            }
        }
        for (l, v) in updates.iter().enumerate() {
            let est = sums[l] / CONSISTENCY_REDRAWS as f64;
            let oracle = fixture.fisher.layer_normalized_quadratic(l, v);
            suite.record(Some(l), || format!("estimate {est:.6e} vs oracle {oracle:.6e}"), (est - oracle).abs() / oracle);
        }
        Ok(())
    })();
    suite.finish(outcome)
}

/// Damped natural gradient against an undamped dense solve on a well-conditioned Fisher.
pub fn npg_damping_suite(fixture: &OracleFixture, streams: &Streams) -> SuiteResult {
    let mut suite = SuiteResult::new("natural gradient at vanishing damping", NPG_DAMPING_TOL);
    let outcome = (|| -> Result<(), String> {
        let n = fixture.fisher.dim();
        let shift = fixture.fisher.f.trace() / n as f64;
        let mut shifted = fixture.fisher.f.clone();
        for i in 0..n {
            shifted[(i, i)] += shift;
        }
        let well = ExactFisher::from_matrix(shifted.clone()).map_err(|e| e.to_string())?;
        let mut rng = streams.rng();
        for k in 0..5 {
            let g = random_vec(n, &mut rng);
            let reference = lu_solve(&shifted, &g).map_err(|e| e.to_string())?;
            let v = exact_npg(&well, &g, 1e-14 * shift).map_err(|e| e.to_string())?;
            suite.record(None, || format!("gradient {k}"), rel_vec_error(&v, &reference));
        }
        Ok(())
    })();
    suite.finish(outcome)
}

/// `λ* = A‖v‖² / vᵀF_d v` minimizes the Fisher distance to the natural gradient of `A·v`;
/// moving it by ±1% must increase the objective. Error is 1 per instance where it does not.
pub fn projection_minimizer_suite(streams: &Streams) -> SuiteResult {
    let mut suite = SuiteResult::new("projection scale minimizer", 0.0);
    let outcome = (|| -> Result<(), String> {
        for k in 0..MINIMIZER_INSTANCES as u64 {
            let fixture = OracleFixture::new(streams.index(k).key())?;
            let batch = fixture.microbatch(2, streams.fork("policy").index(k))?;
            let rec = batch.records().next().ok_or("empty microbatch")?;
            let layout = fixture.net.param_layout();
            let v = layout.flatten(&rec.per_layer_seq_grad);
            let a = streams.fork("advantage").index(k).rng().gen_range(0.1..2.0) * if k % 2 == 0 { 1.0 } else { -1.0 };
            let g: Vec<f64> = v.iter().map(|x| a * x).collect();
            let damping = default_damping(&fixture.fisher);
            let lambda = optimal_projection_scale(&fixture.fisher, damping, &v, a);
            let obj = |l: f64| npg_projection_objective(&fixture.fisher, damping, &v, &g, l).map_err(|e| e.to_string());
            let at = obj(lambda)?;
            let (lo, hi) = (obj(0.99 * lambda)?, obj(1.01 * lambda)?);
            let ok = lo > at && hi > at;
            suite.record(
                None,
                || format!("instance {k}: λ* = {lambda:.6e}, objective {at:.6e}, at ±1% {lo:.6e} / {hi:.6e}"),
                if ok { 0.0 } else { 1.0 },
            );
        }
        Ok(())
    })();
    suite.finish(outcome)
}

/// Cosines of the interacting direction and of the vanilla gradient with the exact natural
/// gradient of the vanilla gradient, for one oracle seed. The interacting update treats the
/// whole parameter vector as one block.
pub fn npg_direction_trial(seed: u64, group_size: usize, c_factor: f64) -> Result<(f64, f64), String> {
    let fixture = OracleFixture::new(seed)?;
    let batch = fixture.microbatch(group_size, Streams::new(seed).fork("npg"))?;
    let records = batch.record_refs();
    let adv = batch.advantages();
    let layout = fixture.net.param_layout();
    let flat: Vec<Matrix<f64>> = records
        .iter()
        .map(|r| {
            let f = layout.flatten(&r.per_layer_seq_grad);
            Matrix::from_vec(1, f.len(), f).expect("row vector")
        })
        .collect();
    let refs: Vec<&Matrix<f64>> = flat.iter().collect();
    let ntk = build_ntk(&refs).map_err(|e| e.to_string())?;
    let u = interacting_update(&refs, &adv, c_factor * ntk.eig.mean_eigenvalue()).map_err(|e| e.to_string())?;
    let mut g = vec![0.0; layout.flatten(&fixture.net.zeros_like()).len()];
    for (row, &a) in flat.iter().zip(&adv) {
        for (gi, &x) in g.iter_mut().zip(row.as_slice()) {
            *gi += a * x;
        }
    }
    let npg = exact_npg(&fixture.fisher, &g, default_damping(&fixture.fisher)).map_err(|e| e.to_string())?;
    Ok((cosine(u.as_slice(), &npg), cosine(&g, &npg)))
}

pub const NPG_GROUP_SIZE: usize = 16;
pub const NPG_C_FACTOR: f64 = 1e-3;

/// Error is the shortfall of the win rate below [`NPG_MIN_WIN_RATE`].
pub fn npg_direction_suite(streams: &Streams) -> SuiteResult {
    let mut suite = SuiteResult::new("interacting direction vs natural gradient", 0.0);
    let outcome = (|| -> Result<(), String> {
        let mut wins = 0;
        for k in 0..NPG_TRIALS as u64 {
            let (ci, cv) = npg_direction_trial(streams.index(k).key(), NPG_GROUP_SIZE, NPG_C_FACTOR)?;
            if ci > cv {
                wins += 1;
            }
        }
        let rate = wins as f64 / NPG_TRIALS as f64;
        suite.record(
            None,
            || format!("interacting closer in {wins} of {NPG_TRIALS} trials"),
            (NPG_MIN_WIN_RATE - rate).max(0.0),
        );
        Ok(())
    })();
    suite.finish(outcome)
}

/// Brute-force oracle suites on the enumerable policy, plus self-normalization on the
/// default sequence-task policy.
pub fn oracle_check() -> Report {
    let streams = Streams::new(0).fork("oracle-check");
    let mut suites = Vec::new();
    match OracleFixture::new(0) {
        Ok(fixture) => {
            suites.push(fisher_psd_suite(&fixture, &streams.fork("psd")));
            suites.push(fisher_quadratic_suite(&fixture, &streams.fork("quadratic")));
            suites.push(consistency_suite(&fixture, &streams.fork("consistency")));
            suites.push(npg_damping_suite(&fixture, &streams.fork("damping")));
        }
        Err(e) => {
            let mut s = SuiteResult::new("oracle fixture", 0.0);
            s.setup_error = Some(e);
            suites.push(s);
        }
    }
    suites.push(projection_minimizer_suite(&streams.fork("minimizer")));
    suites.push(npg_direction_suite(&streams.fork("npg")));

    let cfg = default_check_config();
    let (task, net) = setup(&cfg);
    match check_batch(&cfg, &net, &task, "self-normalization") {
        Ok(batch) => suites.push(self_normalization_suite(&batch, cfg.n_overlap, &streams.fork("self-normalization"))),
        Err(e) => {
            let mut s = SuiteResult::new("fisher-normalized rescaling", SELF_NORMALIZATION_TOL);
            s.setup_error = Some(e.to_string());
            suites.push(s);
        }
    }
    Report { suites }
}
