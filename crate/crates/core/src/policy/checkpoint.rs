//! Plain-text checkpoint format.
//!
//! ```text
//! isopo-checkpoint v1
//! dtype f64
//! layout <vocab> <horizon> <n_features>
//! layers <n>
//! layer <rows> <cols>
//! <row 0, space separated>
//! ...
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so save/load is bit exact.

use std::io::{BufRead, Write};

use thiserror::Error;

use super::{ContextLayout, LayerWeights, PolicyError, PolicyNet};
use crate::linalg::Matrix;
use crate::Scalar;

const MAGIC: &str = "isopo-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint holds {found} weights, expected {expected}")]
    Dtype { found: String, expected: &'static str },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn save_checkpoint<T: Scalar, W: Write>(net: &PolicyNet<T>, mut out: W) -> Result<(), CheckpointError> {
    let layout = net.layout();
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "dtype {}", T::DTYPE)?;
    writeln!(out, "layout {} {} {}", layout.vocab, layout.horizon, layout.n_features)?;
    writeln!(out, "layers {}", net.n_layers())?;
    for layer in net.layers() {
        let w = &layer.weight;
        writeln!(out, "layer {} {}", w.rows(), w.cols())?;
        for i in 0..w.rows() {
            let row: Vec<String> = w.row(i).iter().map(|x| format!("{:?}", x.as_f64())).collect();
            writeln!(out, "{}", row.join(" "))?;
        }
    }
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<String, CheckpointError> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn err(&self, msg: impl Into<String>) -> CheckpointError {
        CheckpointError::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn keyed(&mut self, key: &str, n: usize) -> Result<Vec<usize>, CheckpointError> {
        let l = self.next()?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.err(format!("expected `{key}`")));
        }
        let vals: Result<Vec<usize>, _> = parts.map(str::parse).collect();
        match vals {
            Ok(v) if v.len() == n => Ok(v),
            _ => Err(self.err(format!("`{key}` needs {n} integer fields"))),
        }
    }
}

pub fn load_checkpoint<T: Scalar, R: BufRead>(input: R) -> Result<PolicyNet<T>, CheckpointError> {
    let mut lines = Lines {
        inner: input.lines(),
        line: 0,
    };
    if lines.next()?.trim() != MAGIC {
        return Err(lines.err("missing checkpoint header"));
    }
    let dtype = lines.next()?;
    let dtype = dtype
        .strip_prefix("dtype ")
        .ok_or_else(|| lines.err("expected `dtype`"))?
        .trim()
        .to_string();
    if dtype != T::DTYPE {
        return Err(CheckpointError::Dtype {
            found: dtype,
            expected: T::DTYPE,
        });
    }
    let l = lines.keyed("layout", 3)?;
    let layout = ContextLayout {
        vocab: l[0],
        horizon: l[1],
        n_features: l[2],
    };
    let n_layers = lines.keyed("layers", 1)?[0];
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let shape = lines.keyed("layer", 2)?;
        let (rows, cols) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = lines.next()?;
            let before = data.len();
            for tok in row.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| lines.err(format!("bad number `{tok}`")))?;
                data.push(T::lit(v));
            }
            if data.len() - before != cols {
                return Err(lines.err(format!("expected {cols} values")));
            }
        }
        let weight = Matrix::from_vec(rows, cols, data).map_err(PolicyError::from)?;
        layers.push(LayerWeights { weight });
    }
    Ok(PolicyNet::from_layers(layout, layers)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), hidden in 1usize..6, vocab in 2usize..6) {
            let layout = ContextLayout { vocab, horizon: 2, n_features: 3 };
            let net = PolicyNet::<f64>::new(layout, &[hidden], &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut buf = Vec::new();
            save_checkpoint(&net, &mut buf).unwrap();
            let back: PolicyNet<f64> = load_checkpoint(&buf[..]).unwrap();
            let bits = |n: &PolicyNet<f64>| n.params_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&net), bits(&back));
            prop_assert_eq!(net.layout(), back.layout());
        }
    }

    #[test]
    fn f32_round_trip_and_dtype_check() {
        let layout = ContextLayout {
            vocab: 3,
            horizon: 1,
            n_features: 1,
        };
        let net = PolicyNet::<f32>::new(layout, &[4], &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let mut buf = Vec::new();
        save_checkpoint(&net, &mut buf).unwrap();
        let back: PolicyNet<f32> = load_checkpoint(&buf[..]).unwrap();
        assert_eq!(net, back);
        assert!(matches!(load_checkpoint::<f64, _>(&buf[..]), Err(CheckpointError::Dtype { .. })));
    }

    #[test]
    fn truncated_file_reports_line() {
        let text = "isopo-checkpoint v1\ndtype f64\nlayout 3 1 0\nlayers 1\nlayer 3 5\n0 0 0 0 0\n";
        match load_checkpoint::<f64, _>(text.as_bytes()) {
            Err(CheckpointError::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
    }
}
