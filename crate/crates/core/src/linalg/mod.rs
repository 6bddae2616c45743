//! Small dense linear algebra: row-major matrices, Frobenius products, a cyclic Jacobi
//! eigensolver for symmetric matrices and the solves built on top of it.
//!
//! Everything here is sized for microbatch kernels (tens of rows) and tiny exact-Fisher
//! oracles (a few hundred rows). No attempt is made at cache blocking.

mod eigen;
mod matrix;
mod solve;

pub use eigen::{sym_eigh, SymEig};
pub use matrix::{dot, norm, Matrix};
pub use solve::{lu_solve, solve_tikhonov};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: {op} got {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: expected a square matrix, got {rows}x{cols}")]
    NotSquare { op: &'static str, rows: usize, cols: usize },
    #[error("matrix is not symmetric: |M[{i},{j}] - M[{j},{i}]| = {gap:e}")]
    NotSymmetric { i: usize, j: usize, gap: f64 },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("Jacobi iteration did not converge after {sweeps} sweeps (off-diagonal norm {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },
}
