use super::ema::RegEmaState;
use crate::linalg::Matrix;
use crate::Scalar;

/// Additive floor inside every regularized norm.
pub const REG_FLOOR: f64 = 1e-8;

/// Exponents and regularization of the generalized sequence rescaling
///
/// `scaling = reg2(F)^p · reg2(‖v‖)^q · reg2(F/‖v‖)^r`.
///
/// `(p, q, r) = (-1, 0, 0)` bounds the Fisher norm of each sequence update,
/// `(0, 0, -2)` is the Fisher-closest scalar multiple of `v` to the natural gradient and
/// `(0, -1, 0)` is plain Euclidean normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RescalingParams<T> {
    pub p: T,
    pub q: T,
    pub r: T,
    pub reg_strength: T,
    pub ema: RegEmaState<T>,
}

impl<T: Scalar> RescalingParams<T> {
    pub fn new(p: T, q: T, r: T) -> Self {
        Self {
            p,
            q,
            r,
            reg_strength: T::zero(),
            ema: RegEmaState::new(T::lit(0.9)),
        }
    }

    pub fn identity() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn fisher_normalized() -> Self {
        Self::new(-T::one(), T::zero(), T::zero())
    }

    pub fn euclidean_normalized() -> Self {
        Self::new(T::zero(), -T::one(), T::zero())
    }

    pub fn fisher_projection() -> Self {
        Self::new(T::zero(), T::zero(), T::lit(-2.0))
    }

    pub fn with_regularization(mut self, reg_strength: T, ema_decay: T) -> Self {
        assert!(reg_strength >= T::zero(), "regularization strength must be nonnegative");
        self.reg_strength = reg_strength;
        self.ema = RegEmaState::new(ema_decay);
        self
    }

    pub fn is_identity(&self) -> bool {
        self.p == T::zero() && self.q == T::zero() && self.r == T::zero()
    }
}

/// `sqrt(x² + reg_strength · E[x²] + 1e-8)`.
pub fn reg2<T: Scalar>(x: T, reg_strength: T, expectation_sq: T) -> T {
    (x * x + reg_strength * expectation_sq + T::lit(REG_FLOOR)).sqrt()
}

fn factor<T: Scalar>(x: T, exponent: T, reg_strength: T, expectation_sq: Option<T>) -> T {
    if exponent == T::zero() {
        return T::one();
    }
    reg2(x, reg_strength, expectation_sq.unwrap_or_else(T::zero)).powf(exponent)
}

/// Rescales one sequence's layer gradient given its estimated Fisher norm. The trailing
/// expectations for layer `layer` come from `params.ema` (zero until initialized).
pub fn rescaling<T: Scalar>(grad: &Matrix<T>, f_norm: T, params: &RescalingParams<T>, layer: usize) -> Matrix<T> {
    let grad_norm = grad.frobenius_norm();
    if grad_norm == T::zero() {
        return grad.clone();
    }
    let ema = params.ema.layer(layer);
    let reg = params.reg_strength;
    let scaling = factor(f_norm, params.p, reg, ema.and_then(|e| e.f_norm_sq.get()))
        * factor(grad_norm, params.q, reg, ema.and_then(|e| e.grad_norm_sq.get()))
        * factor(f_norm / grad_norm, params.r, reg, ema.and_then(|e| e.rel_norm_sq.get()));
    grad.scaled(scaling)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad() -> Matrix<f64> {
        Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]])
    }

    #[test]
    fn zero_exponents_are_identity() {
        let g = grad();
        assert_eq!(rescaling(&g, 0.7, &RescalingParams::identity(), 0), g);
    }

    #[test]
    fn fisher_normalization_divides_by_norm() {
        let g = grad();
        let f = 2.5;
        let out = rescaling(&g, f, &RescalingParams::fisher_normalized(), 0);
        let expected = g.scaled(1.0 / (f * f + REG_FLOOR).sqrt());
        assert_eq!(out, expected);
        let naive = g.scaled(1.0 / f);
        assert!(out.sub(&naive).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn relative_exponent_gives_npg_projection() {
        let g = grad();
        let f = 0.8;
        let out = rescaling(&g, f, &RescalingParams::fisher_projection(), 0);
        let gn2 = g.frobenius_norm().powi(2);
        let expected = g.scaled(gn2 / (f * f));
        assert!(out.sub(&expected).unwrap().max_abs() < 1e-6 * expected.max_abs());
    }

    #[test]
    fn euclidean_normalization() {
        let g = grad();
        let out = rescaling(&g, 123.0, &RescalingParams::euclidean_normalized(), 0);
        assert!((out.frobenius_norm() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn regularization_uses_layer_expectation() {
        let g = grad();
        let mut params = RescalingParams::fisher_normalized().with_regularization(1.0, 0.9);
        params.ema.layer_mut(1).f_norm_sq.update(9.0);
        let out0 = rescaling(&g, 4.0, &params, 0);
        let out1 = rescaling(&g, 4.0, &params, 1);
        assert!((out0.frobenius_norm() - g.frobenius_norm() / (16.0 + REG_FLOOR).sqrt()).abs() < 1e-12);
        assert!((out1.frobenius_norm() - g.frobenius_norm() / (25.0 + REG_FLOOR).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_stays_zero() {
        let z = Matrix::<f64>::zeros(2, 2);
        assert_eq!(rescaling(&z, 0.0, &RescalingParams::fisher_projection(), 0), z);
    }
}
