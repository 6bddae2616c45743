//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("key `{key}` is not used by {context}")]
    Irrelevant { key: String, context: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Bandit,
    SeqTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Reinforce,
    Grpo,
    IsopoNi,
    IsopoInt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerChoice {
    Sgd,
    AdamW,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Bandit => "bandit",
            TaskKind::SeqTask => "seqtask",
        }
    }
}

impl Algo {
    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Reinforce => "reinforce",
            Algo::Grpo => "grpo",
            Algo::IsopoNi => "isopo-ni",
            Algo::IsopoInt => "isopo-int",
        }
    }
}

impl OptimizerChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerChoice::Sgd => "sgd",
            OptimizerChoice::AdamW => "adamw",
        }
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bandit" => Ok(TaskKind::Bandit),
            "seqtask" => Ok(TaskKind::SeqTask),
            _ => Err(format!("expected bandit or seqtask, got `{s}`")),
        }
    }
}

impl FromStr for Algo {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reinforce" => Ok(Algo::Reinforce),
            "grpo" => Ok(Algo::Grpo),
            "isopo-ni" => Ok(Algo::IsopoNi),
            "isopo-int" => Ok(Algo::IsopoInt),
            _ => Err(format!("expected reinforce, grpo, isopo-ni or isopo-int, got `{s}`")),
        }
    }
}

impl FromStr for OptimizerChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerChoice::Sgd),
            "adamw" => Ok(OptimizerChoice::AdamW),
            _ => Err(format!("expected sgd or adamw, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Free-form label used by `compare` and `plot`; defaults to the algorithm name.
    pub name: Option<String>,
    pub task: TaskKind,
    pub algo: Algo,
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub reg_strength: f64,
    pub reg_factor: f64,
    pub clip_eps: f64,
    pub inner_epochs: usize,
    pub group_size: usize,
    pub groups_per_microbatch: usize,
    pub n_overlap: usize,
    pub exclude_self: bool,
    pub ema_decay: f64,
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub normalize_std: bool,
    pub hidden: Vec<usize>,
    pub modulus: usize,
    pub seq_len: usize,
    pub exact_match: bool,
    pub bandit_prompts: usize,
    pub bandit_arms: usize,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(task: TaskKind, algo: Algo) -> Self {
        Self {
            name: None,
            task,
            algo,
            p: 0.0,
            q: 0.0,
            r: 0.0,
            reg_strength: 0.0,
            reg_factor: 1.0,
            clip_eps: 0.2,
            inner_epochs: if algo == Algo::Grpo { 4 } else { 1 },
            group_size: 8,
            groups_per_microbatch: 4,
            n_overlap: 64,
            exclude_self: false,
            ema_decay: 0.9,
            optimizer: OptimizerChoice::AdamW,
            lr: 3e-4,
            weight_decay: 0.0,
            steps: 200,
            eval_every: 5,
            seed: 0,
            normalize_std: false,
            hidden: vec![32, 32],
            modulus: 16,
            seq_len: 3,
            exact_match: false,
            bandit_prompts: 64,
            bandit_arms: 8,
            out_dir: PathBuf::from("runs"),
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.algo.as_str().to_string())
    }

    /// Keys that mean something for this task / algorithm / optimizer.
    fn relevant(&self, key: &str) -> bool {
        match key {
            "p" | "q" | "r" | "reg_strength" | "exclude_self" => self.algo == Algo::IsopoNi,
            "reg_factor" => self.algo == Algo::IsopoInt,
            "ema_decay" => matches!(self.algo, Algo::IsopoNi | Algo::IsopoInt),
            "clip_eps" | "inner_epochs" => self.algo == Algo::Grpo,
            "weight_decay" => self.optimizer == OptimizerChoice::AdamW,
            "modulus" | "seq_len" | "exact_match" => self.task == TaskKind::SeqTask,
            "bandit_prompts" | "bandit_arms" => self.task == TaskKind::Bandit,
            _ => true,
        }
    }

    fn context_of(&self, key: &str) -> String {
        match key {
            "weight_decay" => format!("optimizer {}", self.optimizer.as_str()),
            "modulus" | "seq_len" | "exact_match" | "bandit_prompts" | "bandit_arms" => {
                format!("task {}", self.task.as_str())
            }
            _ => format!("algo {}", self.algo.as_str()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts = [
            ("inner_epochs", self.inner_epochs),
            ("group_size", self.group_size),
            ("groups_per_microbatch", self.groups_per_microbatch),
            ("n_overlap", self.n_overlap),
            ("eval_every", self.eval_every),
            ("modulus", self.modulus),
            ("seq_len", self.seq_len),
            ("bandit_prompts", self.bandit_prompts),
            ("bandit_arms", self.bandit_arms),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("{k} must be at least 1")));
        }
        if self.hidden.contains(&0) {
            return Err(ConfigError::Invalid("hidden widths must be at least 1".into()));
        }
        let finite = [
            ("p", self.p),
            ("q", self.q),
            ("r", self.r),
            ("reg_strength", self.reg_strength),
            ("reg_factor", self.reg_factor),
            ("clip_eps", self.clip_eps),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
        ];
        if let Some((k, v)) = finite.iter().find(|(_, v)| !v.is_finite()) {
            return Err(ConfigError::Invalid(format!("{k} must be finite, got {v}")));
        }
        for (k, v) in [
            ("reg_strength", self.reg_strength),
            ("reg_factor", self.reg_factor),
            ("weight_decay", self.weight_decay),
        ] {
            if v < 0.0 {
                return Err(ConfigError::Invalid(format!("{k} must be nonnegative")));
            }
        }
        if !(self.clip_eps > 0.0) {
            return Err(ConfigError::Invalid("clip_eps must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(ConfigError::Invalid("lr must be positive".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(ConfigError::Invalid("ema_decay must lie in (0, 1)".into()));
        }
        if self.task == TaskKind::SeqTask && self.modulus < 2 {
            return Err(ConfigError::Invalid("modulus must be at least 2".into()));
        }
        if self.task == TaskKind::SeqTask
            && (self.modulus as f64).powi(2) > 1e6
        {
            return Err(ConfigError::Invalid("modulus too large for an enumerated prompt set".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    msg: "empty key".into(),
                });
            }
            if !KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey { line, key: k.into() });
            }
            if entries.iter().any(|(_, key, _)| key == k) {
                return Err(ConfigError::DuplicateKey { line, key: k.into() });
            }
            entries.push((line, k.to_string(), v.to_string()));
        }
        let find = |key: &str| entries.iter().find(|(_, k, _)| k == key);

        let (task_line, _, task) = find("task").ok_or(ConfigError::Missing("task"))?;
        let (algo_line, _, algo) = find("algo").ok_or(ConfigError::Missing("algo"))?;
        let bad = |line: usize, key: &str, msg: String| ConfigError::BadValue {
            line,
            key: key.into(),
            msg,
        };
        let task: TaskKind = task.parse().map_err(|m| bad(*task_line, "task", m))?;
        let algo: Algo = algo.parse().map_err(|m| bad(*algo_line, "algo", m))?;
        let mut cfg = RunConfig::new(task, algo);
        if let Some((line, _, v)) = find("optimizer") {
            cfg.optimizer = v.parse().map_err(|m| bad(*line, "optimizer", m))?;
        }

        for (line, key, value) in &entries {
            let line = *line;
            if !cfg.relevant(key) {
                return Err(ConfigError::Irrelevant {
                    key: key.clone(),
                    context: cfg.context_of(key),
                });
            }
            let num = |v: &str| v.parse::<f64>().map_err(|e| bad(line, key, e.to_string()));
            let count = |v: &str| v.parse::<usize>().map_err(|e| bad(line, key, e.to_string()));
            let flag = |v: &str| match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(bad(line, key, format!("expected true or false, got `{v}`"))),
            };
            match key.as_str() {
                "task" | "algo" | "optimizer" => {}
                "name" => cfg.name = Some(value.clone()),
                "p" => cfg.p = num(value)?,
                "q" => cfg.q = num(value)?,
                "r" => cfg.r = num(value)?,
                "reg_strength" => cfg.reg_strength = num(value)?,
                "reg_factor" => cfg.reg_factor = num(value)?,
                "clip_eps" => cfg.clip_eps = num(value)?,
                "inner_epochs" => cfg.inner_epochs = count(value)?,
                "group_size" => cfg.group_size = count(value)?,
                "groups_per_microbatch" => cfg.groups_per_microbatch = count(value)?,
                "n_overlap" => cfg.n_overlap = count(value)?,
                "exclude_self" => cfg.exclude_self = flag(value)?,
                "ema_decay" => cfg.ema_decay = num(value)?,
                "lr" => cfg.lr = num(value)?,
                "weight_decay" => cfg.weight_decay = num(value)?,
                "steps" => cfg.steps = count(value)?,
                "eval_every" => cfg.eval_every = count(value)?,
                "seed" => cfg.seed = value.parse().map_err(|e: std::num::ParseIntError| bad(line, key, e.to_string()))?,
                "normalize_std" => cfg.normalize_std = flag(value)?,
                "hidden" => {
                    cfg.hidden = if value.is_empty() {
                        Vec::new()
                    } else {
                        value.split(',').map(|w| count(w.trim())).collect::<Result<_, _>>()?
                    }
                }
                "modulus" => cfg.modulus = count(value)?,
                "seq_len" => cfg.seq_len = count(value)?,
                "exact_match" => cfg.exact_match = flag(value)?,
                "bandit_prompts" => cfg.bandit_prompts = count(value)?,
                "bandit_arms" => cfg.bandit_arms = count(value)?,
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                _ => unreachable!("checked against KEYS"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key relevant to this configuration, one per line, in a fixed order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for &key in KEYS {
            if !self.relevant(key) {
                continue;
            }
            let value = match key {
                "name" => match &self.name {
                    Some(n) => n.clone(),
                    None => continue,
                },
                "task" => self.task.as_str().into(),
                "algo" => self.algo.as_str().into(),
                "p" => format!("{:?}", self.p),
                "q" => format!("{:?}", self.q),
                "r" => format!("{:?}", self.r),
                "reg_strength" => format!("{:?}", self.reg_strength),
                "reg_factor" => format!("{:?}", self.reg_factor),
                "clip_eps" => format!("{:?}", self.clip_eps),
                "inner_epochs" => self.inner_epochs.to_string(),
                "group_size" => self.group_size.to_string(),
                "groups_per_microbatch" => self.groups_per_microbatch.to_string(),
                "n_overlap" => self.n_overlap.to_string(),
                "exclude_self" => self.exclude_self.to_string(),
                "ema_decay" => format!("{:?}", self.ema_decay),
                "optimizer" => self.optimizer.as_str().into(),
                "lr" => format!("{:?}", self.lr),
                "weight_decay" => format!("{:?}", self.weight_decay),
                "steps" => self.steps.to_string(),
                "eval_every" => self.eval_every.to_string(),
                "seed" => self.seed.to_string(),
                "normalize_std" => self.normalize_std.to_string(),
                "hidden" => self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
                "modulus" => self.modulus.to_string(),
                "seq_len" => self.seq_len.to_string(),
                "exact_match" => self.exact_match.to_string(),
                "bandit_prompts" => self.bandit_prompts.to_string(),
                "bandit_arms" => self.bandit_arms.to_string(),
                "out_dir" => self.out_dir.display().to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}

const KEYS: &[&str] = &[
    "name",
    "task",
    "algo",
    "p",
    "q",
    "r",
    "reg_strength",
    "reg_factor",
    "clip_eps",
    "inner_epochs",
    "group_size",
    "groups_per_microbatch",
    "n_overlap",
    "exclude_self",
    "ema_decay",
    "optimizer",
    "lr",
    "weight_decay",
    "steps",
    "eval_every",
    "seed",
    "normalize_std",
    "hidden",
    "modulus",
    "seq_len",
    "exact_match",
    "bandit_prompts",
    "bandit_arms",
    "out_dir",
];
