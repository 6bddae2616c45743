use super::{LinalgError, Matrix, SymEig};
use crate::Scalar;

/// Solves `(M + cI) x = b` given the eigendecomposition of `M`:
/// `x = U diag(1 / (D_i + c)) Uᵀ b`.
///
/// With `c = 0` every eigenvalue must be bounded away from zero (relative to the
/// largest one), otherwise the system is reported singular.
pub fn solve_tikhonov<T: Scalar>(eig: &SymEig<T>, c: T, b: &[T]) -> Result<Vec<T>, LinalgError> {
    if !(c >= T::zero()) || !c.is_finite() {
        return Err(LinalgError::InvalidArgument(format!(
            "Tikhonov constant must be finite and nonnegative, got {c}"
        )));
    }
    if b.len() != eig.dim() {
        return Err(LinalgError::ShapeMismatch {
            op: "solve_tikhonov",
            left: (eig.dim(), eig.dim()),
            right: (b.len(), 1),
        });
    }
    let spread = eig.eigenvalues.iter().fold(T::zero(), |m, d| m.max(d.abs()));
    let floor = T::rel_tol() * spread;
    let mut coeffs = eig.project(b)?;
    for (k, (coef, &d)) in coeffs.iter_mut().zip(&eig.eigenvalues).enumerate() {
        let shifted = d + c;
        if c == T::zero() && d.abs() <= floor {
            return Err(LinalgError::Singular(format!(
                "eigenvalue {k} is {d:e} and no regularization was given"
            )));
        }
        if shifted <= T::zero() {
            return Err(LinalgError::Singular(format!(
                "eigenvalue {k} shifted by {c:e} is {shifted:e}"
            )));
        }
        *coef = *coef / shifted;
    }
    eig.expand(&coeffs)
}

/// Dense solve `A x = b` by Gaussian elimination with partial pivoting.
pub fn lu_solve<T: Scalar>(a: &Matrix<T>, b: &[T]) -> Result<Vec<T>, LinalgError> {
    let n = a.rows();
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            op: "lu_solve",
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if b.len() != n {
        return Err(LinalgError::ShapeMismatch {
            op: "lu_solve",
            left: a.shape(),
            right: (b.len(), 1),
        });
    }
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = m.max_abs();
    let tiny = T::epsilon() * T::from_usize_lossy(n.max(1)) * scale;

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().partial_cmp(&m[(j, col)].abs()).expect("finite"))
            .expect("non-empty range");
        let pivot = m[(pivot_row, col)];
        if pivot.abs() <= tiny || pivot == T::zero() {
            return Err(LinalgError::Singular(format!(
                "zero pivot in column {col} ({pivot:e})"
            )));
        }
        if pivot_row != col {
            for j in 0..n {
                let tmp = m[(col, j)];
                m[(col, j)] = m[(pivot_row, j)];
                m[(pivot_row, j)] = tmp;
            }
            x.swap(col, pivot_row);
        }
        for i in (col + 1)..n {
            let factor = m[(i, col)] / pivot;
            if factor == T::zero() {
                continue;
            }
            for j in col..n {
                m[(i, j)] = m[(i, j)] - factor * m[(col, j)];
            }
            x[i] = x[i] - factor * x[col];
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in (i + 1)..n {
            s = s - m[(i, j)] * x[j];
        }
        x[i] = s / m[(i, i)];
    }
    Ok(x)
}
