//! Experiment harness: configuration, seeded training runs, multi-seed comparison,
//! verification suites and static SVG plots.

pub mod compare;
pub mod config;
pub mod csvlog;
pub mod plot;
pub mod train;
pub mod verify;

pub use config::{Algo, ConfigError, OptimizerChoice, RunConfig, TaskKind};
pub use train::{run, run_with, train, RunResult, TrainError};
