//! Seeded training loop shared by every algorithm.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use isopo_lab::baselines::{
    grpo_clipped_grad, optimizer_step, reinforce_grad, BaselineError, OldPolicySnapshot, OptimizerState,
};
use isopo_lab::isopo::{
    draw_overlap_samples, estimate_fisher_norms, interacting_microbatch_update, noninteracting_update,
    InteractingParams, IsopoError, RescalingParams,
};
use isopo_lab::linalg::Matrix;
use isopo_lab::metrics::{collect, LayerMetrics, MicrobatchSummary};
use isopo_lab::policy::{save_checkpoint, CheckpointError, PolicyError, PolicyNet};
use isopo_lab::rng::Streams;
use isopo_lab::tasks::{choose_prompts, sample_microbatch, BanditTask, Microbatch, Prompt, SeqTask, Task};
use log::{debug, info, warn};
use thiserror::Error;

use crate::config::{Algo, OptimizerChoice, RunConfig, TaskKind};
use crate::csvlog::{write_rows, CsvError, MetricsRow};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const ABORT_FILE: &str = "ABORTED";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Why a run stopped early. The run's rows up to and including the failing step are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct Abort {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub rows: Vec<MetricsRow>,
    pub final_net: PolicyNet<f64>,
    pub n_layers: usize,
    pub with_ntk: bool,
    pub aborted: Option<Abort>,
}

pub fn build_task(cfg: &RunConfig, streams: &Streams) -> Task {
    match cfg.task {
        TaskKind::Bandit => Task::Bandit(BanditTask::random(
            cfg.bandit_prompts,
            cfg.bandit_arms,
            &mut streams.fork("bandit-table").rng(),
        )),
        TaskKind::SeqTask => Task::Seq(SeqTask {
            modulus: cfg.modulus,
            horizon: cfg.seq_len,
            exact_match: cfg.exact_match,
        }),
    }
}

/// Task and freshly initialized policy of a run, as seen at step 0.
pub fn setup(cfg: &RunConfig) -> (Task, PolicyNet<f64>) {
    let streams = Streams::new(cfg.seed);
    let task = build_task(cfg, &streams);
    let net = PolicyNet::new(task.layout(), &cfg.hidden, &mut streams.fork("init").rng());
    (task, net)
}

enum Update {
    Ascent(Vec<Matrix<f64>>),
    Failed(String),
}

struct StepOutput {
    update: Update,
    summary: MicrobatchSummary<f64>,
}

fn negated(grads: &[Matrix<f64>]) -> Vec<Matrix<f64>> {
    grads.iter().map(|g| g.scaled(-1.0)).collect()
}

/// Sequences with a degenerate Fisher-norm estimate in at least one layer.
fn count_degenerate(f_norms: &[Vec<Option<f64>>]) -> usize {
    let n = f_norms.first().map_or(0, Vec::len);
    (0..n).filter(|&s| f_norms.iter().any(|layer| layer[s].is_none())).count()
}

struct Algorithm {
    algo: Algo,
    exclude_self: bool,
    rescaling: RescalingParams<f64>,
    interacting: InteractingParams<f64>,
}

impl Algorithm {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            algo: cfg.algo,
            exclude_self: cfg.exclude_self,
            rescaling: RescalingParams::new(cfg.p, cfg.q, cfg.r).with_regularization(cfg.reg_strength, cfg.ema_decay),
            interacting: InteractingParams::new(cfg.reg_factor, cfg.ema_decay),
        }
    }

    fn step(&mut self, batch: &Microbatch<f64>, streams: &Streams, n_overlap: usize) -> Result<StepOutput, IsopoError> {
        let records = batch.record_refs();
        let advantages = batch.advantages();
        let samples = draw_overlap_samples(&records, n_overlap, &mut streams.rng());
        let fail = |e: &dyn std::fmt::Display| Update::Failed(e.to_string());
        Ok(match self.algo {
            Algo::IsopoNi => {
                let out = noninteracting_update(&records, &advantages, &mut self.rescaling, &samples, self.exclude_self)?;
                StepOutput {
                    summary: MicrobatchSummary::new(batch, &out.f_norms, None, out.degenerate_sequences),
                    update: Update::Ascent(out.grads),
                }
            }
            Algo::IsopoInt => {
                let f_norms = estimate_fisher_norms(&records, &samples, false)?;
                let degenerate = count_degenerate(&f_norms);
                match interacting_microbatch_update(&records, &advantages, &mut self.interacting) {
                    Ok(out) => StepOutput {
                        summary: MicrobatchSummary::new(batch, &f_norms, Some(&out.eigen_means), degenerate),
                        update: Update::Ascent(out.grads),
                    },
                    Err(e) => StepOutput {
                        summary: MicrobatchSummary::new(batch, &f_norms, None, degenerate),
                        update: fail(&e),
                    },
                }
            }
            Algo::Reinforce | Algo::Grpo => {
                let f_norms = estimate_fisher_norms(&records, &samples, false)?;
                let degenerate = count_degenerate(&f_norms);
                let update = match reinforce_grad(&records, &advantages) {
                    Ok(g) => Update::Ascent(g),
                    Err(e) => fail(&e),
                };
                StepOutput {
                    summary: MicrobatchSummary::new(batch, &f_norms, None, degenerate),
                    update,
                }
            }
        })
    }
}

fn check_reward_provenance(task: &Task, batch: &Microbatch<f64>) -> Result<(), String> {
    for g in &batch.groups {
        for (rec, &r) in g.records.iter().zip(&g.rewards) {
            let verified = task.reward(&g.prompt, &rec.tokens);
            if verified.to_bits() != r.to_bits() {
                return Err(format!(
                    "reward of prompt {} differs from the task's verifiable reward ({r} vs {verified})",
                    g.prompt.id
                ));
            }
        }
    }
    Ok(())
}

fn apply_update(
    cfg: &RunConfig,
    opt: &mut OptimizerState<f64>,
    net: &mut PolicyNet<f64>,
    batch: &Microbatch<f64>,
    first: Vec<Matrix<f64>>,
) -> Result<(), String> {
    optimizer_step(opt, net, &negated(&first)).map_err(|e| e.to_string())?;
    if cfg.algo == Algo::Grpo {
        let snapshot = OldPolicySnapshot::from_microbatch(batch);
        for epoch in 1..cfg.inner_epochs {
            let out = grpo_clipped_grad(net, batch, &snapshot, cfg.clip_eps).map_err(|e| e.to_string())?;
            debug!("grpo epoch {epoch}: {} of {} sequences clipped", out.clipped, out.ratios.len());
            optimizer_step(opt, net, &negated(&out.grads)).map_err(|e: BaselineError| e.to_string())?;
        }
    }
    Ok(())
}

/// Runs training in memory. `observer` sees the policy after initialization and after every
/// update.
pub fn run_with(cfg: &RunConfig, mut observer: impl FnMut(usize, &PolicyNet<f64>)) -> Result<RunResult, TrainError> {
    cfg.validate().map_err(|e| TrainError::Setup(e.to_string()))?;
    let streams = Streams::new(cfg.seed);
    let (task, mut net) = setup(cfg);
    let train: Vec<Prompt<f64>> = task.train_prompts();
    let heldout: Vec<Prompt<f64>> = task.heldout_prompts();
    if train.iter().any(|p| heldout.iter().any(|h| h.id == p.id)) {
        return Err(TrainError::Setup("train and heldout prompts overlap".into()));
    }
    if train.is_empty() {
        return Err(TrainError::Setup("no training prompts".into()));
    }

    let init_net = net.clone();
    let n_layers = net.n_layers();
    let with_ntk = cfg.algo == Algo::IsopoInt;
    let mut opt = match cfg.optimizer {
        OptimizerChoice::Sgd => OptimizerState::sgd(cfg.lr),
        OptimizerChoice::AdamW => OptimizerState::adamw(cfg.lr, 0.9, 0.999, cfg.weight_decay),
    };
    let mut algorithm = Algorithm::new(cfg);
    let mut rows = Vec::new();
    let mut aborted = None;
    observer(0, &net);

    for step in 0..=cfg.steps {
        let prompts = choose_prompts(&train, cfg.groups_per_microbatch, &mut streams.fork("prompts").index(step as u64).rng());
        let batch = sample_microbatch(
            &net,
            &task,
            &prompts,
            cfg.group_size,
            cfg.normalize_std,
            streams.fork("policy").index(step as u64),
        )?;
        if let Err(reason) = check_reward_provenance(&task, &batch) {
            return Err(TrainError::Setup(reason));
        }
        let overlap_stream = streams.fork("overlap").index(step as u64);
        let (update, summary) = match algorithm.step(&batch, &overlap_stream, cfg.n_overlap) {
            Ok(out) => (out.update, Some(out.summary)),
            Err(e) => (Update::Failed(e.to_string()), None),
        };
        let summary = summary.unwrap_or_else(|| MicrobatchSummary {
            mean_reward: batch.mean_reward(),
            per_layer: Vec::new(),
            degenerate_sequences: 0,
        });

        let make_row = |net: &PolicyNet<f64>, summary: MicrobatchSummary<f64>| -> Result<MetricsRow, TrainError> {
            let m = collect(step, net, &init_net, &heldout, summary, streams.fork("kl").index(step as u64))?;
            info!(
                "{} seed {} step {step}: reward {:.4} validation {:.4} kl {:.3e}",
                cfg.label(),
                cfg.seed,
                m.mean_reward,
                m.validation,
                m.kl_from_init
            );
            let mut row = MetricsRow::from_metrics(&m, cfg.algo.as_str(), cfg.task.as_str(), cfg.seed);
            if row.per_layer.len() != n_layers {
                row.per_layer = vec![
                    LayerMetrics {
                        mean_f_norm: f64::NAN,
                        mean_grad_norm: f64::NAN,
                        ntk_eigen_mean: None,
                    };
                    n_layers
                ];
            }
            Ok(row)
        };
        // metrics describe the policy that sampled this microbatch
        let eval_now = step % cfg.eval_every == 0 || step == cfg.steps;
        let pre_update_net = (!eval_now).then(|| net.clone());
        if eval_now {
            rows.push(make_row(&net, summary.clone())?);
        }

        let failure = match update {
            Update::Failed(reason) => Some(reason),
            Update::Ascent(grads) if step < cfg.steps => apply_update(cfg, &mut opt, &mut net, &batch, grads).err(),
            Update::Ascent(_) => None,
        };
        if let (Some(_), Some(before)) = (&failure, &pre_update_net) {
            rows.push(make_row(before, summary)?);
        }
        if let Some(reason) = failure {
            warn!("{} seed {} aborted at step {step}: {reason}", cfg.label(), cfg.seed);
            aborted = Some(Abort { step, reason });
            break;
        }
        if step < cfg.steps {
            observer(step + 1, &net);
        }
    }

    Ok(RunResult {
        rows,
        final_net: net,
        n_layers,
        with_ntk,
        aborted,
    })
}

pub fn run(cfg: &RunConfig) -> Result<RunResult, TrainError> {
    run_with(cfg, |_, _| {})
}

/// Runs and writes `metrics.csv`, `final.ckpt` and `config.txt` (plus `ABORTED` on failure)
/// into `out_dir`.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<RunResult, TrainError> {
    let result = run(cfg)?;
    write_run(cfg, &result, out_dir)?;
    Ok(result)
}

pub fn write_run(cfg: &RunConfig, result: &RunResult, out_dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(out_dir)?;
    let csv = BufWriter::new(fs::File::create(out_dir.join(METRICS_FILE))?);
    write_rows(csv, result.n_layers, result.with_ntk, &result.rows)?;
    save_checkpoint(&result.final_net, BufWriter::new(fs::File::create(out_dir.join(CHECKPOINT_FILE))?))?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.serialize())?;
    let abort_path = out_dir.join(ABORT_FILE);
    match &result.aborted {
        Some(a) => fs::write(abort_path, format!("step {}: {}\n", a.step, a.reason))?,
        None if abort_path.exists() => fs::remove_file(abort_path)?,
        None => {}
    }
    Ok(())
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join(METRICS_FILE)
}
