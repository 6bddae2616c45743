//! Autoregressive softmax policy made of bias-augmented linear layers with `tanh` between
//! them, and a hand-written backward pass that keeps the per-position factors
//! `(act_in, grad_out)` of every layer.

mod checkpoint;
mod sequence;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use sequence::{
    backward_logprob, backward_weighted, evaluate_sequence, greedy_decode, kl_from_reference,
    sample_sequence, sample_tokens, sequence_logprob, trace_tokens, PositionGradFactors,
    SequenceGrads, SequenceRecord, SequenceTrace,
};

use rand::Rng;
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("trace does not match tokens: {0}")]
    TraceMismatch(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// How the input context of each decoding step is assembled:
/// `one-hot(previous token) ⊕ one-hot(position) ⊕ prompt features`.
///
/// At position 0 the previous-token slot is all zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextLayout {
    pub vocab: usize,
    pub horizon: usize,
    pub n_features: usize,
}

impl ContextLayout {
    pub fn dim(&self) -> usize {
        self.vocab + self.horizon + self.n_features
    }

    pub fn build<T: Scalar>(&self, prev_token: Option<usize>, position: usize, features: &[T]) -> Vec<T> {
        debug_assert_eq!(features.len(), self.n_features);
        let mut ctx = vec![T::zero(); self.dim()];
        if let Some(tok) = prev_token {
            ctx[tok] = T::one();
        }
        ctx[self.vocab + position] = T::one();
        ctx[self.vocab + self.horizon..].copy_from_slice(features);
        ctx
    }
}

/// One linear layer. The last column of `weight` is the bias; inputs are augmented with a
/// trailing constant 1 so every per-position gradient is exactly rank one.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub weight: Matrix<T>,
}

impl<T: Scalar> LayerWeights<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.cols() - 1
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `W [x; 1]`.
    pub fn apply(&self, augmented: &[T]) -> Vec<T> {
        self.weight.matvec(augmented).expect("checked by caller")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet<T> {
    layers: Vec<LayerWeights<T>>,
    layout: ContextLayout,
}

/// Offsets of each layer inside the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub shapes: Vec<(usize, usize)>,
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn flatten<T: Scalar>(&self, per_layer: &[Matrix<T>]) -> Vec<T> {
        assert_eq!(per_layer.len(), self.shapes.len());
        let mut out = Vec::with_capacity(self.total);
        for (m, &shape) in per_layer.iter().zip(&self.shapes) {
            assert_eq!(m.shape(), shape);
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    pub fn unflatten<T: Scalar>(&self, flat: &[T]) -> Vec<Matrix<T>> {
        assert_eq!(flat.len(), self.total);
        self.shapes
            .iter()
            .zip(&self.offsets)
            .map(|(&(r, c), &off)| Matrix::from_vec(r, c, flat[off..off + r * c].to_vec()).expect("sized"))
            .collect()
    }

    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let (r, c) = self.shapes[layer];
        self.offsets[layer]..self.offsets[layer] + r * c
    }
}

impl<T: Scalar> PolicyNet<T> {
    /// Random initialization: weights uniform in `(-s, s)` with `s = 1/√in_dim`, zero bias.
    pub fn new<R: Rng + ?Sized>(layout: ContextLayout, hidden: &[usize], rng: &mut R) -> Self {
        let dims = Self::dims(layout, hidden);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (inp, out) = (w[0], w[1]);
                let s = 1.0 / (inp.max(1) as f64).sqrt();
                let weight = Matrix::from_fn(out, inp + 1, |_, j| {
                    if j == inp {
                        T::zero()
                    } else {
                        T::lit(rng.gen_range(-s..s))
                    }
                });
                LayerWeights { weight }
            })
            .collect();
        Self { layers, layout }
    }

    pub fn zeros(layout: ContextLayout, hidden: &[usize]) -> Self {
        let dims = Self::dims(layout, hidden);
        let layers = dims
            .windows(2)
            .map(|w| LayerWeights {
                weight: Matrix::zeros(w[1], w[0] + 1),
            })
            .collect();
        Self { layers, layout }
    }

    pub fn from_layers(layout: ContextLayout, layers: Vec<LayerWeights<T>>) -> Result<Self, PolicyError> {
        if layers.is_empty() {
            return Err(PolicyError::Architecture("at least one layer is required".into()));
        }
        let mut expected_in = layout.dim();
        for (l, layer) in layers.iter().enumerate() {
            if layer.weight.cols() != expected_in + 1 {
                return Err(PolicyError::Architecture(format!(
                    "layer {l} expects {} inputs (with bias), has {}",
                    expected_in + 1,
                    layer.weight.cols()
                )));
            }
            if !layer.weight.is_finite() {
                return Err(PolicyError::Architecture(format!("layer {l} has non-finite weights")));
            }
            expected_in = layer.out_dim();
        }
        if expected_in != layout.vocab {
            return Err(PolicyError::Architecture(format!(
                "final layer emits {expected_in} logits for a vocabulary of {}",
                layout.vocab
            )));
        }
        Ok(Self { layers, layout })
    }

    fn dims(layout: ContextLayout, hidden: &[usize]) -> Vec<usize> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(layout.dim());
        dims.extend_from_slice(hidden);
        dims.push(layout.vocab);
        dims
    }

    pub fn layout(&self) -> ContextLayout {
        self.layout
    }

    pub fn vocab_size(&self) -> usize {
        self.layout.vocab
    }

    pub fn context_dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn horizon(&self) -> usize {
        self.layout.horizon
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerWeights<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerWeights<T>] {
        &mut self.layers
    }

    pub fn param_layout(&self) -> ParamLayout {
        let shapes: Vec<_> = self.layers.iter().map(|l| l.weight.shape()).collect();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut total = 0;
        for &(r, c) in &shapes {
            offsets.push(total);
            total += r * c;
        }
        ParamLayout { shapes, offsets, total }
    }

    pub fn n_params(&self) -> usize {
        self.param_layout().total
    }

    pub fn params_flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.n_params());
        let mut off = 0;
        for layer in &mut self.layers {
            let n = layer.weight.as_slice().len();
            layer.weight.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// A net with the same architecture whose weights are all zero.
    pub fn zeros_like(&self) -> Vec<Matrix<T>> {
        self.layers
            .iter()
            .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
            .collect()
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.layout == other.layout && self.param_layout() == other.param_layout()
    }

    /// Forward pass for a single context vector, recording each layer's augmented input.
    pub fn forward_logits(&self, context: &[T]) -> Result<ForwardTrace<T>, PolicyError> {
        if context.len() != self.context_dim() {
            return Err(PolicyError::Dimension {
                what: "context",
                expected: self.context_dim(),
                got: context.len(),
            });
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut x = context.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            x.push(T::one());
            let z = layer.apply(&x);
            layer_inputs.push(x);
            x = if l == last { z } else { z.into_iter().map(T::tanh).collect() };
        }
        let probs = softmax(&x);
        Ok(ForwardTrace {
            layer_inputs,
            logits: x,
            probs,
        })
    }
}

/// Activations recorded by one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    /// Input to each layer, with the trailing bias entry 1.
    pub layer_inputs: Vec<Vec<T>>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax_at<T: Scalar>(logits: &[T], k: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = logits.iter().map(|&z| (z - max).exp()).sum();
    logits[k] - max - total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn layout(vocab: usize, horizon: usize, n_features: usize) -> ContextLayout {
        ContextLayout {
            vocab,
            horizon,
            n_features,
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let net = PolicyNet::<f64>::zeros(layout(5, 2, 3), &[4]);
        let ctx = vec![0.3; net.context_dim()];
        assert!(net.forward_logits(&ctx).unwrap().logits.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn single_layer_is_affine() {
        let lay = layout(3, 1, 0);
        let w = Matrix::from_fn(3, lay.dim() + 1, |i, j| (i * 10 + j) as f64 * 0.1);
        let net = PolicyNet::from_layers(lay, vec![LayerWeights { weight: w.clone() }]).unwrap();
        let mut e1 = vec![0.0; lay.dim()];
        e1[0] = 1.0;
        let logits = net.forward_logits(&e1).unwrap().logits;
        for i in 0..3 {
            assert!((logits[i] - (w[(i, 0)] + w[(i, lay.dim())])).abs() < 1e-15);
        }
    }

    #[test]
    fn two_layer_matches_direct_evaluation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let lay = layout(4, 3, 2);
        let net = PolicyNet::<f64>::new(lay, &[6], &mut rng);
        let ctx: Vec<f64> = (0..lay.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let got = net.forward_logits(&ctx).unwrap().logits;

        let w0 = &net.layers()[0].weight;
        let w1 = &net.layers()[1].weight;
        let mut hidden = Vec::new();
        for i in 0..w0.rows() {
            let mut z = w0[(i, lay.dim())];
            for j in 0..lay.dim() {
                z += w0[(i, j)] * ctx[j];
            }
            hidden.push(z.tanh());
        }
        for i in 0..w1.rows() {
            let mut z = w1[(i, 6)];
            for j in 0..6 {
                z += w1[(i, j)] * hidden[j];
            }
            assert!((z - got[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn context_dimension_checked() {
        let net = PolicyNet::<f64>::zeros(layout(3, 1, 0), &[]);
        assert!(matches!(
            net.forward_logits(&[1.0]),
            Err(PolicyError::Dimension { .. })
        ));
    }

    #[test]
    fn initialization_bounds_and_zero_bias() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let lay = layout(16, 3, 32);
        let net = PolicyNet::<f64>::new(lay, &[32, 32], &mut rng);
        for layer in net.layers() {
            let s = 1.0 / (layer.in_dim() as f64).sqrt();
            for i in 0..layer.out_dim() {
                assert_eq!(layer.weight[(i, layer.in_dim())], 0.0);
                for j in 0..layer.in_dim() {
                    assert!(layer.weight[(i, j)].abs() < s);
                }
            }
        }
        let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        assert_eq!(net, PolicyNet::new(lay, &[32, 32], &mut rng2));
    }

    #[test]
    fn from_layers_validates_shapes() {
        let lay = layout(3, 1, 0);
        let bad = vec![LayerWeights {
            weight: Matrix::<f64>::zeros(2, lay.dim() + 1),
        }];
        assert!(PolicyNet::from_layers(lay, bad).is_err());
    }

    #[test]
    fn softmax_is_stable() {
        let p = softmax(&[1000.0f64, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        assert!((log_softmax_at(&[1000.0f64, 0.0], 1) + 1000.0).abs() < 1e-9);
    }
}
