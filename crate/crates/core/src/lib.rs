//! Isometric policy optimization (ISOPO) on small autoregressive softmax policies.
//!
//! The crate contains both ISOPO variants (per-sequence Fisher-norm rescaling and the
//! layer-wise NTK preconditioner), REINFORCE and clipped-GRPO baselines, toy tasks with
//! verifiable rewards and exact brute-force Fisher oracles. All numerics are generic over
//! [`Scalar`] (`f32`/`f64`); the `*F64` aliases below are what the harness uses.

pub mod baselines;
pub mod isopo;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod tasks;

pub use scalar::Scalar;

pub type MatrixF64 = linalg::Matrix<f64>;
pub type MatrixF32 = linalg::Matrix<f32>;
pub type SymEigF64 = linalg::SymEig<f64>;
pub type PolicyNetF64 = policy::PolicyNet<f64>;
pub type PolicyNetF32 = policy::PolicyNet<f32>;
pub type SequenceRecordF64 = policy::SequenceRecord<f64>;
pub type PromptF64 = tasks::Prompt<f64>;
pub type MicrobatchF64 = tasks::Microbatch<f64>;
pub type RescalingParamsF64 = isopo::RescalingParams<f64>;
pub type NtkDecompositionF64 = isopo::NtkDecomposition<f64>;
pub type OptimizerStateF64 = baselines::OptimizerState<f64>;
pub type ExactFisherF64 = oracle::ExactFisher<f64>;
pub type StepMetricsF64 = metrics::StepMetrics<f64>;
