//! Floating point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the library is generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + LowerExp + Default + Sum + Send + Sync + 'static
{
    /// Name written into checkpoint headers.
    const DTYPE: &'static str;

    /// Converts an `f64` literal. Values outside the range of `Self` saturate to infinity.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(|| if x > 0.0 { Self::infinity() } else { Self::neg_infinity() })
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).unwrap_or_else(Self::infinity)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Relative tolerance used for symmetry checks and Jacobi convergence.
    ///
    /// `1e-12` in double precision, a few ulps above machine epsilon otherwise.
    #[inline]
    fn rel_tol() -> Self {
        let floor = Self::lit(1e-12);
        let ulps = Self::epsilon() * Self::lit(64.0);
        if ulps > floor {
            ulps
        } else {
            floor
        }
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_is_precision_aware() {
        assert_eq!(f64::rel_tol(), 1e-12);
        assert!(f32::rel_tol() > 1e-6);
    }

    #[test]
    fn lit_saturates() {
        assert_eq!(<f32 as Scalar>::lit(1e300), f32::INFINITY);
        assert_eq!(<f64 as Scalar>::lit(0.25), 0.25);
    }
}
