//! Metrics CSV: fixed header, 17-significant-digit floats, and a line-numbered reader.

use std::io::{Read, Write};

use isopo_lab::metrics::{LayerMetrics, StepMetrics};
use thiserror::Error;

pub const BASE_COLUMNS: [&str; 8] = [
    "step",
    "algo",
    "task",
    "seed",
    "mean_reward",
    "validation",
    "kl_from_init",
    "degenerate_sequences",
];

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn header(n_layers: usize, with_ntk: bool) -> Vec<String> {
    let mut cols: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    for l in 0..n_layers {
        cols.push(format!("l{l}_mean_F_norm"));
        cols.push(format!("l{l}_mean_grad_norm"));
        if with_ntk {
            cols.push(format!("l{l}_ntk_eigen_mean"));
        }
    }
    cols
}

pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

/// One parsed (or about to be written) metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub algo: String,
    pub task: String,
    pub seed: u64,
    pub mean_reward: f64,
    pub validation: f64,
    pub kl_from_init: f64,
    pub degenerate_sequences: usize,
    pub per_layer: Vec<LayerMetrics<f64>>,
}

impl MetricsRow {
    pub fn from_metrics(m: &StepMetrics<f64>, algo: &str, task: &str, seed: u64) -> Self {
        Self {
            step: m.step,
            algo: algo.into(),
            task: task.into(),
            seed,
            mean_reward: m.mean_reward,
            validation: m.validation,
            kl_from_init: m.kl_from_init,
            degenerate_sequences: m.degenerate_sequences,
            per_layer: m.per_layer.clone(),
        }
    }

    fn fields(&self, with_ntk: bool) -> Vec<String> {
        let mut out = vec![
            self.step.to_string(),
            self.algo.clone(),
            self.task.clone(),
            self.seed.to_string(),
            float(self.mean_reward),
            float(self.validation),
            float(self.kl_from_init),
            self.degenerate_sequences.to_string(),
        ];
        for l in &self.per_layer {
            out.push(float(l.mean_f_norm));
            out.push(float(l.mean_grad_norm));
            if with_ntk {
                out.push(float(l.ntk_eigen_mean.unwrap_or(f64::NAN)));
            }
        }
        out
    }
}

pub fn write_rows<W: Write>(out: W, n_layers: usize, with_ntk: bool, rows: &[MetricsRow]) -> Result<(), CsvError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header(n_layers, with_ntk))?;
    for row in rows {
        w.write_record(row.fields(with_ntk))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunCsv {
    pub n_layers: usize,
    pub with_ntk: bool,
    pub rows: Vec<MetricsRow>,
}

fn layer_count(cols: &[String]) -> Option<(usize, bool)> {
    if cols.len() < BASE_COLUMNS.len() || cols[..BASE_COLUMNS.len()].iter().zip(BASE_COLUMNS).any(|(a, b)| a != b) {
        return None;
    }
    let extra = cols.len() - BASE_COLUMNS.len();
    for (per, ntk) in [(2, false), (3, true)] {
        if extra.is_multiple_of(per) {
            let n = extra / per;
            if header(n, ntk) == cols {
                return Some((n, ntk));
            }
        }
    }
    None
}

pub fn read_rows<R: Read>(input: R) -> Result<RunCsv, CsvError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = rdr.records();
    let head = match records.next() {
        Some(r) => r?,
        None => {
            return Err(CsvError::Parse {
                line: 1,
                msg: "empty file, expected a header".into(),
            })
        }
    };
    let cols: Vec<String> = head.iter().map(str::to_string).collect();
    let (n_layers, with_ntk) = layer_count(&cols).ok_or_else(|| CsvError::Parse {
        line: 1,
        msg: format!("unrecognized header `{}`", cols.join(",")),
    })?;

    let mut rows = Vec::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != cols.len() {
            return Err(CsvError::Parse {
                line,
                msg: format!("expected {} fields, found {}", cols.len(), rec.len()),
            });
        }
        let field = |i: usize| &rec[i];
        let parse_f = |i: usize| {
            field(i).parse::<f64>().map_err(|e| CsvError::Parse {
                line,
                msg: format!("column `{}`: {e}", cols[i]),
            })
        };
        let parse_u = |i: usize| {
            field(i).parse::<u64>().map_err(|e| CsvError::Parse {
                line,
                msg: format!("column `{}`: {e}", cols[i]),
            })
        };
        let per = if with_ntk { 3 } else { 2 };
        let mut per_layer = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let base = BASE_COLUMNS.len() + l * per;
            per_layer.push(LayerMetrics {
                mean_f_norm: parse_f(base)?,
                mean_grad_norm: parse_f(base + 1)?,
                ntk_eigen_mean: if with_ntk { Some(parse_f(base + 2)?) } else { None },
            });
        }
        rows.push(MetricsRow {
            step: parse_u(0)? as usize,
            algo: field(1).to_string(),
            task: field(2).to_string(),
            seed: parse_u(3)?,
            mean_reward: parse_f(4)?,
            validation: parse_f(5)?,
            kl_from_init: parse_f(6)?,
            degenerate_sequences: parse_u(7)? as usize,
            per_layer,
        });
    }
    Ok(RunCsv {
        n_layers,
        with_ntk,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, ntk: bool) -> MetricsRow {
        MetricsRow {
            step,
            algo: "isopo-int".into(),
            task: "seqtask".into(),
            seed: 3,
            mean_reward: 0.1 + step as f64,
            validation: 1.0 / 3.0,
            kl_from_init: 1e-9,
            degenerate_sequences: 2,
            per_layer: (0..2)
                .map(|l| LayerMetrics {
                    mean_f_norm: 0.5 * l as f64,
                    mean_grad_norm: std::f64::consts::PI,
                    ntk_eigen_mean: ntk.then_some(7.25),
                })
                .collect(),
        }
    }

    #[test]
    fn exact_header() {
        assert_eq!(
            header(2, false).join(","),
            "step,algo,task,seed,mean_reward,validation,kl_from_init,degenerate_sequences,\
             l0_mean_F_norm,l0_mean_grad_norm,l1_mean_F_norm,l1_mean_grad_norm"
        );
        assert_eq!(
            header(1, true).join(","),
            "step,algo,task,seed,mean_reward,validation,kl_from_init,degenerate_sequences,\
             l0_mean_F_norm,l0_mean_grad_norm,l0_ntk_eigen_mean"
        );
    }

    #[test]
    fn seventeen_significant_digits_round_trip() {
        assert_eq!(float(0.1), "1.0000000000000001e-1");
        for ntk in [false, true] {
            let rows = vec![row(0, ntk), row(5, ntk)];
            let mut buf = Vec::new();
            write_rows(&mut buf, 2, ntk, &rows).unwrap();
            let back = read_rows(buf.as_slice()).unwrap();
            assert_eq!(back.rows, rows);
            assert_eq!(back.with_ntk, ntk);
        }
    }

    #[test]
    fn malformed_rows_report_line() {
        let mut buf = Vec::new();
        write_rows(&mut buf, 2, false, &[row(0, false)]).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("5,reinforce,seqtask,3,oops,0,0,0,0,0,0,0\n");
        match read_rows(text.as_bytes()) {
            Err(CsvError::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("mean_reward"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        match read_rows("step,algo\n".as_bytes()) {
            Err(CsvError::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        let short = format!("{}\n1,2\n", header(0, false).join(","));
        assert!(matches!(read_rows(short.as_bytes()), Err(CsvError::Parse { line: 2, .. })));
    }
}
