use super::{LinalgError, Matrix};
use crate::Scalar;

const MAX_SWEEPS: usize = 100;

/// Eigendecomposition `M = U diag(D) Uᵀ` of a real symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig<T> {
    /// Ascending.
    pub eigenvalues: Vec<T>,
    /// Orthonormal eigenvectors stored as columns, in the order of `eigenvalues`.
    pub eigenvectors: Matrix<T>,
}

impl<T: Scalar> SymEig<T> {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn reconstruct(&self) -> Matrix<T> {
        let n = self.dim();
        let u = &self.eigenvectors;
        Matrix::from_fn(n, n, |i, j| {
            (0..n).map(|k| u[(i, k)] * self.eigenvalues[k] * u[(j, k)]).sum()
        })
    }

    /// `Uᵀ x`.
    pub fn project(&self, x: &[T]) -> Result<Vec<T>, LinalgError> {
        self.eigenvectors.tr_matvec(x)
    }

    /// `U y`.
    pub fn expand(&self, y: &[T]) -> Result<Vec<T>, LinalgError> {
        self.eigenvectors.matvec(y)
    }

    pub fn mean_eigenvalue(&self) -> T {
        if self.eigenvalues.is_empty() {
            return T::zero();
        }
        self.eigenvalues.iter().copied().sum::<T>() / T::from_usize_lossy(self.dim())
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps over all `(p, q)` pairs until the off-diagonal Frobenius norm drops to
/// `1e-12 · ‖M‖_F` (double precision). Eigenvalues come back ascending.
pub fn sym_eigh<T: Scalar>(m: &Matrix<T>) -> Result<SymEig<T>, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare {
            op: "sym_eigh",
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    if !m.is_finite() {
        return Err(LinalgError::InvalidArgument("sym_eigh: non-finite entry".into()));
    }
    m.check_symmetric(T::rel_tol())?;

    let n = m.rows();
    let half = T::lit(0.5);
    let mut a = Matrix::from_fn(n, n, |i, j| half * (m[(i, j)] + m[(j, i)]));
    let mut v = Matrix::<T>::identity(n);
    let scale = a.frobenius_norm();
    let tol = T::rel_tol() * scale;

    let mut converged = scale == T::zero();
    for _ in 0..MAX_SWEEPS {
        if converged || off_diagonal_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }
    if !converged {
        let off = off_diagonal_norm(&a);
        if off > tol {
            return Err(LinalgError::NoConvergence {
                sweeps: MAX_SWEEPS,
                off: off.as_f64(),
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).expect("finite eigenvalues"));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |i, k| v[(i, order[k])]);
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm<T: Scalar>(a: &Matrix<T>) -> T {
    let n = a.rows();
    let mut s = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s = s + a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Applies the rotation that annihilates `a[p][q]`: `A ← JᵀAJ`, `V ← VJ`.
fn rotate<T: Scalar>(a: &mut Matrix<T>, v: &mut Matrix<T>, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq.abs() <= T::min_positive_value() {
        return;
    }
    let two = T::lit(2.0);
    let theta = (a[(q, q)] - a[(p, p)]) / (two * apq);
    let t = if theta >= T::zero() {
        T::one() / (theta + (theta * theta + T::one()).sqrt())
    } else {
        -T::one() / (-theta + (theta * theta + T::one()).sqrt())
    };
    let c = T::one() / (t * t + T::one()).sqrt();
    let s = t * c;
    let n = a.rows();

    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = T::zero();
    a[(q, p)] = T::zero();

    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn orthonormality_error(u: &Matrix<f64>) -> f64 {
        let utu = u.transpose().matmul(u).unwrap();
        utu.sub(&Matrix::identity(u.rows())).unwrap().max_abs()
    }

    fn residual(m: &Matrix<f64>, e: &SymEig<f64>) -> f64 {
        let mu = m.matmul(&e.eigenvectors).unwrap();
        let ud = e.eigenvectors.matmul(&Matrix::from_diag(&e.eigenvalues)).unwrap();
        mu.sub(&ud).unwrap().frobenius_norm()
    }

    #[test]
    fn identity() {
        let e = sym_eigh(&Matrix::<f64>::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
        assert!(orthonormality_error(&e.eigenvectors) < 1e-10);
    }

    #[test]
    fn two_by_two() {
        // det([[2-x,1],[1,2-x]]) = (2-x)^2 - 1 = 0  =>  x in {1, 3}
        let m = Matrix::from_rows(&[[2.0f64, 1.0], [1.0, 2.0]]);
        let e = sym_eigh(&m).unwrap();
        assert!((e.eigenvalues[0] - 1.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 3.0).abs() < 1e-14);
        let r = 0.5f64.sqrt();
        let u0 = e.eigenvectors.col(0);
        let u1 = e.eigenvectors.col(1);
        // columns determined up to sign
        assert!(((u0[0] - u0[1]).abs() - 2.0 * r).abs() < 1e-12);
        assert!(((u1[0] + u1[1]).abs() - 2.0 * r).abs() < 1e-12);
    }

    #[test]
    fn diagonal_is_sorted_permutation() {
        let m = Matrix::from_diag(&[5.0, 2.0, 9.0]);
        let e = sym_eigh(&m).unwrap();
        assert_eq!(e.eigenvalues, vec![2.0, 5.0, 9.0]);
        let expected = Matrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(e.eigenvectors, expected);
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        assert!(matches!(
            sym_eigh(&Matrix::<f64>::zeros(2, 3)),
            Err(LinalgError::NotSquare { .. })
        ));
        let m = Matrix::from_rows(&[[1.0, 2.0], [2.5, 1.0]]);
        assert!(matches!(sym_eigh(&m), Err(LinalgError::NotSymmetric { .. })));
    }

    #[test]
    fn zero_and_empty_matrices() {
        let e = sym_eigh(&Matrix::<f64>::zeros(4, 4)).unwrap();
        assert_eq!(e.eigenvalues, vec![0.0; 4]);
        let e = sym_eigh(&Matrix::<f64>::zeros(0, 0)).unwrap();
        assert_eq!(e.dim(), 0);
    }

    #[test]
    fn random_symmetric_residual_and_reconstruction() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for n in [1, 2, 5, 17, 40] {
            let b = Matrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let m = Matrix::from_fn(n, n, |i, j| b[(i, j)] + b[(j, i)]);
            let e = sym_eigh(&m).unwrap();
            let mnorm = m.frobenius_norm();
            assert!(residual(&m, &e) <= 1e-8 * mnorm);
            assert!(e.reconstruct().sub(&m).unwrap().frobenius_norm() <= 1e-8 * mnorm);
            assert!(orthonormality_error(&e.eigenvectors) < 1e-10);
            assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn single_precision_converges() {
        let m = Matrix::<f32>::from_rows(&[[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 1.0]]);
        let e = sym_eigh(&m).unwrap();
        let err = e.reconstruct().sub(&m).unwrap().frobenius_norm();
        assert!(err < 1e-5 * m.frobenius_norm());
    }
}
