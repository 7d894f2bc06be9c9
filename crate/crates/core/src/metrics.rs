//! Confusion-matrix accuracy measures.
//!
//! Rows index the reference (ground truth) class, columns the predicted
//! class. Ratios whose denominator vanishes are reported as `0` with a
//! `degenerate` flag instead of NaN.

use std::io::Write;

use serde::Serialize;

use crate::encoder::{LabelMap, IGNORE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Ratio {
    pub value: f64,
    pub degenerate: bool,
}

impl Ratio {
    fn of(num: f64, den: f64) -> Ratio {
        if den == 0.0 {
            Ratio { value: 0.0, degenerate: true }
        } else {
            Ratio { value: num / den, degenerate: false }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassScores {
    pub precision: Ratio,
    pub recall: Ratio,
    pub f: Ratio,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix { n, counts: vec![0; n * n] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("confusion_matrix", "rows must form a square matrix"));
        }
        Ok(ConfusionMatrix { n, counts: rows.concat() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n.max(1)).map(<[u64]>::to_vec).collect()
    }

    /// Count `(truth, pred)` pairs, skipping [`IGNORE`] truth pixels.
    pub fn update(&mut self, pred: &[usize], truth: &[i16]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("confusion_update", truth.len(), pred.len()));
        }
        let n = self.n;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE {
                continue;
            }
            if t < 0 || t as usize >= n {
                return Err(Error::LabelOutOfRange { label: t as i64, n_classes: n });
            }
            if p >= n {
                return Err(Error::LabelOutOfRange { label: p as i64, n_classes: n });
            }
            self.counts[t as usize * n + p] += 1;
        }
        Ok(())
    }

    pub fn update_map(&mut self, pred: &[usize], truth: &LabelMap) -> Result<()> {
        self.update(pred, &truth.labels)
    }

    /// Entrywise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::shape("confusion_merge", self.n, other.n));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Reference total `n_i+`.
    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.n..(i + 1) * self.n].iter().sum()
    }

    /// Prediction total `n_+j`.
    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.n).map(|i| self.get(i, j)).sum()
    }

    fn diag(&self) -> u64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn overall_accuracy(&self) -> Ratio {
        Ratio::of(self.diag() as f64, self.total() as f64)
    }

    pub fn precision_recall_f(&self, i: usize) -> ClassScores {
        let hit = self.get(i, i) as f64;
        let precision = Ratio::of(hit, self.col_sum(i) as f64);
        let recall = Ratio::of(hit, self.row_sum(i) as f64);
        let f = if precision.degenerate || recall.degenerate {
            Ratio { value: 0.0, degenerate: true }
        } else {
            Ratio::of(2.0 * precision.value * recall.value, precision.value + recall.value)
        };
        ClassScores { precision, recall, f }
    }

    /// Cohen's kappa `(p_o − p_e) / (1 − p_e)`.
    pub fn cohen_kappa(&self) -> Ratio {
        let total = self.total() as f64;
        if total == 0.0 {
            return Ratio { value: 0.0, degenerate: true };
        }
        let p_o = self.diag() as f64 / total;
        let p_e = (0..self.n).map(|i| self.row_sum(i) as f64 * self.col_sum(i) as f64).sum::<f64>() / (total * total);
        if p_e == 1.0 {
            return Ratio { value: if p_o == 1.0 { 1.0 } else { 0.0 }, degenerate: true };
        }
        Ratio::of(p_o - p_e, 1.0 - p_e)
    }

    /// Conditional kappa of reference class `i` (recall side):
    /// `(N·n_ii − n_i+·n_+i) / (N·n_i+ − n_i+·n_+i)`.
    pub fn conditional_kappa(&self, i: usize) -> Ratio {
        let (total, row, col) = (self.total() as f64, self.row_sum(i) as f64, self.col_sum(i) as f64);
        Ratio::of(total * self.get(i, i) as f64 - row * col, total * row - row * col)
    }

    /// Conditional kappa of predicted class `i` (precision side):
    /// `(N·n_ii − n_i+·n_+i) / (N·n_+i − n_i+·n_+i)`.
    pub fn conditional_kappa_precision(&self, i: usize) -> Ratio {
        let (total, row, col) = (self.total() as f64, self.row_sum(i) as f64, self.col_sum(i) as f64);
        Ratio::of(total * self.get(i, i) as f64 - row * col, total * col - row * col)
    }

    pub fn row_normalize(&self) -> RowNormalized {
        let mut zero_rows = Vec::new();
        let rows = (0..self.n)
            .map(|i| {
                let s = self.row_sum(i);
                if s == 0 {
                    zero_rows.push(i);
                    vec![0.0; self.n]
                } else {
                    (0..self.n).map(|j| self.get(i, j) as f64 / s as f64).collect()
                }
            })
            .collect();
        RowNormalized { rows, zero_rows }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowNormalized {
    pub rows: Vec<Vec<f64>>,
    /// Reference classes without samples; their rows are all zero.
    pub zero_rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassRow {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub conditional_kappa: f64,
    pub support: u64,
    pub degenerate: bool,
}

/// Per-class table plus overall scores of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassRow>,
    pub overall_accuracy: f64,
    pub kappa: f64,
    pub pixels: u64,
    pub confusion: ConfusionMatrix,
    pub normalized: RowNormalized,
}

impl MetricsReport {
    /// `precision_side` switches the per-class kappa to the prediction-side form.
    pub fn new(cm: &ConfusionMatrix, precision_side: bool) -> Self {
        let classes = (0..cm.n())
            .map(|i| {
                let s = cm.precision_recall_f(i);
                let k = if precision_side { cm.conditional_kappa_precision(i) } else { cm.conditional_kappa(i) };
                ClassRow {
                    class: i,
                    precision: s.precision.value,
                    recall: s.recall.value,
                    f_measure: s.f.value,
                    conditional_kappa: k.value,
                    support: cm.row_sum(i),
                    degenerate: s.precision.degenerate || s.recall.degenerate || k.degenerate,
                }
            })
            .collect();
        MetricsReport {
            classes,
            overall_accuracy: cm.overall_accuracy().value,
            kappa: cm.cohen_kappa().value,
            pixels: cm.total(),
            confusion: cm.clone(),
            normalized: cm.row_normalize(),
        }
    }

    /// One row per class followed by `overall_accuracy` and `kappa` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.into());
        w.write_record(["row", "precision", "recall", "f_measure", "conditional_kappa", "support", "degenerate", "value"])
            .map_err(io)?;
        for c in &self.classes {
            w.write_record([
                c.class.to_string(),
                c.precision.to_string(),
                c.recall.to_string(),
                c.f_measure.to_string(),
                c.conditional_kappa.to_string(),
                c.support.to_string(),
                c.degenerate.to_string(),
                String::new(),
            ])
            .map_err(io)?;
        }
        for (name, v) in [("overall_accuracy", self.overall_accuracy), ("kappa", self.kappa)] {
            let mut rec = vec![String::new(); 8];
            rec[0] = name.to_string();
            rec[7] = v.to_string();
            w.write_record(&rec).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Row-normalized matrix: rows are reference classes, columns predictions.
    pub fn write_confusion_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.into());
        let n = self.normalized.rows.len();
        let mut header = vec!["reference\\prediction".to_string()];
        header.extend((0..n).map(|j| j.to_string()));
        w.write_record(&header).map_err(io)?;
        for (i, row) in self.normalized.rows.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}
