use super::ema::Ema;
use super::IsopoError;
use crate::linalg::{solve_tikhonov, sym_eigh, Matrix, SymEig};
use crate::policy::SequenceRecord;
use crate::Scalar;

/// Empirical NTK `K = JJᵀ` of one layer over a microbatch, its eigendecomposition and the
/// Tikhonov constant `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct NtkDecomposition<T> {
    pub kernel: Matrix<T>,
    pub eig: SymEig<T>,
    pub c: T,
}

impl<T: Scalar> NtkDecomposition<T> {
    pub fn with_regularization(mut self, c: T) -> Self {
        self.c = c;
        self
    }

    /// `(K + cI)⁻¹ A`.
    pub fn precondition(&self, advantages: &[T]) -> Result<Vec<T>, IsopoError> {
        Ok(solve_tikhonov(&self.eig, self.c, advantages)?)
    }

    pub fn dim(&self) -> usize {
        self.kernel.rows()
    }
}

fn check_grads<T: Scalar>(seq_grads: &[&Matrix<T>]) -> Result<(usize, usize), IsopoError> {
    let first = seq_grads
        .first()
        .ok_or_else(|| IsopoError::InvalidInput("NTK needs at least one sequence".into()))?;
    let shape = first.shape();
    if let Some(bad) = seq_grads.iter().find(|g| g.shape() != shape) {
        return Err(IsopoError::InvalidInput(format!(
            "sequence gradients disagree in shape: {shape:?} vs {:?}",
            bad.shape()
        )));
    }
    Ok(shape)
}

/// `K_ij = ⟨seq_grad_i, seq_grad_j⟩_F`, eigendecomposed. `c` starts at zero.
pub fn build_ntk<T: Scalar>(seq_grads: &[&Matrix<T>]) -> Result<NtkDecomposition<T>, IsopoError> {
    check_grads(seq_grads)?;
    let m = seq_grads.len();
    let mut kernel = Matrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let k = seq_grads[i].frobenius_dot(seq_grads[j])?;
            kernel[(i, j)] = k;
            kernel[(j, i)] = k;
        }
    }
    let eig = sym_eigh(&kernel)?;
    Ok(NtkDecomposition {
        kernel,
        eig,
        c: T::zero(),
    })
}

fn combine<T: Scalar>(seq_grads: &[&Matrix<T>], coeffs: &[T]) -> Result<Matrix<T>, IsopoError> {
    let (rows, cols) = seq_grads[0].shape();
    let mut out = Matrix::zeros(rows, cols);
    for (g, &x) in seq_grads.iter().zip(coeffs) {
        out.axpy(x, g)?;
    }
    Ok(out)
}

/// `Jᵀ (K + cI)⁻¹ A` for one layer: `Σ_i [(K + cI)⁻¹A]_i · seq_grad_i`.
pub fn interacting_update<T: Scalar>(seq_grads: &[&Matrix<T>], advantages: &[T], c: T) -> Result<Matrix<T>, IsopoError> {
    if seq_grads.len() != advantages.len() {
        return Err(IsopoError::InvalidInput(format!(
            "{} sequences but {} advantages",
            seq_grads.len(),
            advantages.len()
        )));
    }
    let ntk = build_ntk(seq_grads)?.with_regularization(c);
    let coeffs = ntk.precondition(advantages)?;
    combine(seq_grads, &coeffs)
}

/// Regularization policy of the interacting variant: `c = reg_factor · EMA[mean(D)]`,
/// one average per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractingParams<T> {
    pub reg_factor: T,
    pub decay: T,
    pub eigen_mean_ema: Vec<Ema<T>>,
}

impl<T: Scalar> InteractingParams<T> {
    pub fn new(reg_factor: T, decay: T) -> Self {
        assert!(reg_factor >= T::zero(), "regularization factor must be nonnegative");
        // validates decay
        let _ = Ema::new(decay);
        Self {
            reg_factor,
            decay,
            eigen_mean_ema: Vec::new(),
        }
    }

    fn ema_mut(&mut self, layer: usize) -> &mut Ema<T> {
        while self.eigen_mean_ema.len() <= layer {
            self.eigen_mean_ema.push(Ema::new(self.decay));
        }
        &mut self.eigen_mean_ema[layer]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractingUpdate<T> {
    pub grads: Vec<Matrix<T>>,
    /// `mean(D)` of each layer's NTK in this microbatch.
    pub eigen_means: Vec<T>,
    /// Tikhonov constant applied in each layer.
    pub tikhonov: Vec<T>,
}

/// Layer-wise interacting update over a microbatch. The EMA of `mean(D)` is seeded by the
/// first microbatch and updated after each one.
pub fn interacting_microbatch_update<T: Scalar>(
    records: &[&SequenceRecord<T>],
    advantages: &[T],
    params: &mut InteractingParams<T>,
) -> Result<InteractingUpdate<T>, IsopoError> {
    if records.len() != advantages.len() {
        return Err(IsopoError::InvalidInput(format!(
            "{} sequences but {} advantages",
            records.len(),
            advantages.len()
        )));
    }
    let n_layers = records.first().map_or(0, |r| r.n_layers());
    let mut grads = Vec::with_capacity(n_layers);
    let mut eigen_means = Vec::with_capacity(n_layers);
    let mut tikhonov = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let seq_grads: Vec<&Matrix<T>> = records.iter().map(|r| &r.per_layer_seq_grad[l]).collect();
        let ntk = build_ntk(&seq_grads)?;
        let mean_d = ntk.eig.mean_eigenvalue().max(T::zero());
        let ema = params.ema_mut(l);
        let expectation = ema.get_or(mean_d);
        ema.update(mean_d);
        let c = params.reg_factor * expectation;

        let (rows, cols) = seq_grads[0].shape();
        let update = if ntk.kernel.trace() == T::zero() {
            Matrix::zeros(rows, cols)
        } else {
            let ntk = ntk.with_regularization(c);
            combine(&seq_grads, &ntk.precondition(advantages)?)?
        };
        grads.push(update);
        eigen_means.push(mean_d);
        tikhonov.push(c);
    }
    Ok(InteractingUpdate {
        grads,
        eigen_means,
        tikhonov,
    })
}
