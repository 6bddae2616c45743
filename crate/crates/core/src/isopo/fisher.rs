use rand::seq::index;
use rand::Rng;

use super::IsopoError;
use crate::linalg::{dot, Matrix};
use crate::policy::{PositionGradFactors, SequenceRecord};
use crate::Scalar;

/// Position factors sampled for one layer, with the estimator's cached normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSamples<T> {
    pub factors: Vec<PositionGradFactors<T>>,
    /// Index (into the microbatch) of the sequence each factor came from.
    pub owners: Vec<usize>,
    /// `(‖g_out‖ ‖a_in‖)²` per factor.
    scale_sq: Vec<T>,
    /// `sqrt(Σ_j (‖g_out,j‖ ‖a_in,j‖)²)`
    pub denominator: T,
}

impl<T: Scalar> LayerSamples<T> {
    pub fn new(factors: Vec<PositionGradFactors<T>>, owners: Vec<usize>) -> Self {
        assert_eq!(factors.len(), owners.len());
        let scale_sq: Vec<T> = factors
            .iter()
            .map(|f| dot(&f.grad_out, &f.grad_out) * dot(&f.act_in, &f.act_in))
            .collect();
        let denominator = scale_sq.iter().copied().sum::<T>().sqrt();
        Self {
            factors,
            owners,
            scale_sq,
            denominator,
        }
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

/// Token positions drawn once per microbatch and shared by every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapSamples<T> {
    /// `(sequence, position)` pairs, sorted.
    pub positions: Vec<(usize, usize)>,
    pub layers: Vec<LayerSamples<T>>,
}

/// Uniform sample without replacement of `n_overlap` positions among all token positions
/// of the microbatch (clamped to the total). The same positions are used in every layer.
pub fn draw_overlap_samples<T: Scalar, R: Rng + ?Sized>(
    records: &[&SequenceRecord<T>],
    n_overlap: usize,
    rng: &mut R,
) -> OverlapSamples<T> {
    let flat: Vec<(usize, usize)> = records
        .iter()
        .enumerate()
        .flat_map(|(s, r)| (0..r.n_positions()).map(move |t| (s, t)))
        .collect();
    let n = n_overlap.min(flat.len());
    let mut picked: Vec<usize> = index::sample(rng, flat.len(), n).into_vec();
    picked.sort_unstable();
    let positions: Vec<(usize, usize)> = picked.into_iter().map(|i| flat[i]).collect();

    let n_layers = records.first().map_or(0, |r| r.n_layers());
    let layers = (0..n_layers)
        .map(|l| {
            let factors = positions
                .iter()
                .map(|&(s, t)| records[s].per_layer_positions[l][t].clone())
                .collect();
            let owners = positions.iter().map(|&(s, _)| s).collect();
            LayerSamples::new(factors, owners)
        })
        .collect();
    OverlapSamples { positions, layers }
}

/// `g_outᵀ V a_in` without forming the rank-one matrix.
fn overlap<T: Scalar>(v: &Matrix<T>, f: &PositionGradFactors<T>) -> T {
    f.grad_out
        .iter()
        .enumerate()
        .filter(|(_, &g)| g != T::zero())
        .fold(T::zero(), |s, (i, &g)| s + g * dot(v.row(i), &f.act_in))
}

fn check_shape<T: Scalar>(v: &Matrix<T>, samples: &LayerSamples<T>) -> Result<(), IsopoError> {
    if let Some(f) = samples.factors.first() {
        if v.shape() != (f.grad_out.len(), f.act_in.len()) {
            return Err(IsopoError::InvalidInput(format!(
                "matrix {:?} does not match layer shape {:?}",
                v.shape(),
                (f.grad_out.len(), f.act_in.len())
            )));
        }
    }
    Ok(())
}

/// Stochastic Fisher norm of a layer update `V`:
///
/// `‖V‖_F ≈ sqrt(Σ_j (g_out,j · V a_in,j)²) / sqrt(Σ_j (‖g_out,j‖ ‖a_in,j‖)²)`.
pub fn fisher_norm_estimate<T: Scalar>(v: &Matrix<T>, samples: &LayerSamples<T>) -> Result<T, IsopoError> {
    check_shape(v, samples)?;
    if samples.is_empty() || samples.denominator == T::zero() {
        return Err(IsopoError::Degenerate(format!(
            "{} sampled positions with zero total scale",
            samples.len()
        )));
    }
    let num: T = samples
        .factors
        .iter()
        .map(|f| {
            let o = overlap(v, f);
            o * o
        })
        .sum();
    Ok(num.sqrt() / samples.denominator)
}

/// Same estimate with the positions of sequence `owner` left out of the sample.
pub fn fisher_norm_estimate_excluding<T: Scalar>(
    v: &Matrix<T>,
    samples: &LayerSamples<T>,
    owner: usize,
) -> Result<T, IsopoError> {
    check_shape(v, samples)?;
    let mut num = T::zero();
    let mut den_sq = T::zero();
    let mut kept = 0usize;
    for ((f, &o), &s) in samples.factors.iter().zip(&samples.owners).zip(&samples.scale_sq) {
        if o == owner {
            continue;
        }
        let ov = overlap(v, f);
        num = num + ov * ov;
        den_sq = den_sq + s;
        kept += 1;
    }
    if den_sq == T::zero() {
        return Err(IsopoError::Degenerate(format!(
            "{kept} positions left after excluding sequence {owner}"
        )));
    }
    Ok(num.sqrt() / den_sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_factors(rng: &mut ChaCha8Rng, n: usize, rows: usize, cols: usize) -> Vec<PositionGradFactors<f64>> {
        (0..n)
            .map(|_| PositionGradFactors {
                act_in: (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                grad_out: (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn orthogonal_update_has_zero_norm() {
        // every sample lives in row 0, V only in row 1
        let factors = vec![
            PositionGradFactors {
                act_in: vec![1.0, 2.0, 1.0],
                grad_out: vec![1.0, 0.0],
            },
            PositionGradFactors {
                act_in: vec![-1.0, 0.5, 1.0],
                grad_out: vec![3.0, 0.0],
            },
        ];
        let samples = LayerSamples::new(factors, vec![0, 1]);
        let v = Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, -2.0, 4.0]]);
        assert_eq!(fisher_norm_estimate(&v, &samples).unwrap(), 0.0);
    }

    #[test]
    fn single_sample_gives_frobenius_norm() {
        // V = g aᵀ: numerator (‖g‖²‖a‖²)², denominator ‖g‖‖a‖  =>  ‖g‖‖a‖ = ‖V‖
        let g = vec![0.3f64, -1.2, 2.0];
        let a = vec![1.5, 0.25, 1.0];
        let samples = LayerSamples::new(
            vec![PositionGradFactors {
                act_in: a.clone(),
                grad_out: g.clone(),
            }],
            vec![0],
        );
        let v = Matrix::outer(&g, &a);
        let est = fisher_norm_estimate(&v, &samples).unwrap();
        let expected = dot(&g, &g).sqrt() * dot(&a, &a).sqrt();
        assert!((est - expected).abs() < 1e-12 * expected);
        assert!((est - v.frobenius_norm()).abs() < 1e-12 * expected);
    }

    #[test]
    fn zero_samples_are_degenerate() {
        let samples = LayerSamples::new(
            vec![PositionGradFactors {
                act_in: vec![0.0, 1.0],
                grad_out: vec![0.0],
            }],
            vec![0],
        );
        let v = Matrix::from_rows(&[[1.0, 1.0]]);
        assert!(matches!(fisher_norm_estimate(&v, &samples), Err(IsopoError::Degenerate(_))));
        let empty = LayerSamples::<f64>::new(vec![], vec![]);
        assert!(matches!(fisher_norm_estimate(&v, &empty), Err(IsopoError::Degenerate(_))));
    }

    #[test]
    fn factor_form_matches_materialized_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let factors = random_factors(&mut rng, 9, 4, 6);
            let v = Matrix::from_fn(4, 6, |_, _| rng.gen_range(-1.0..1.0));
            let mats: Vec<Matrix<f64>> = factors.iter().map(|f| f.to_matrix()).collect();
            let num: f64 = mats.iter().map(|g| v.frobenius_dot(g).unwrap().powi(2)).sum();
            let den: f64 = mats.iter().map(|g| g.frobenius_norm().powi(2)).sum();
            let naive = (num / den).sqrt();
            let samples = LayerSamples::new(factors, vec![0; 9]);
            let est = fisher_norm_estimate(&v, &samples).unwrap();
            assert!((est - naive).abs() <= 1e-10 * naive);
        }
    }

    #[test]
    fn exclusion_drops_own_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let factors = random_factors(&mut rng, 6, 3, 3);
        let owners = vec![0, 0, 1, 1, 2, 2];
        let all = LayerSamples::new(factors.clone(), owners);
        let v = Matrix::from_fn(3, 3, |i, j| (i + 2 * j) as f64 * 0.1);
        let without0 = fisher_norm_estimate_excluding(&v, &all, 0).unwrap();
        let manual = LayerSamples::new(factors[2..].to_vec(), vec![1, 1, 2, 2]);
        assert!((without0 - fisher_norm_estimate(&v, &manual).unwrap()).abs() < 1e-14);
        let nobody = fisher_norm_estimate_excluding(&v, &all, 99).unwrap();
        assert!((nobody - fisher_norm_estimate(&v, &all).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let samples = LayerSamples::new(
            vec![PositionGradFactors {
                act_in: vec![1.0, 1.0],
                grad_out: vec![1.0],
            }],
            vec![0],
        );
        let v = Matrix::<f64>::zeros(2, 2);
        assert!(matches!(fisher_norm_estimate(&v, &samples), Err(IsopoError::InvalidInput(_))));
    }
}
