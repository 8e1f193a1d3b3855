//! Classification metrics and the sequential-batch continual-learning
//! metric suite.
//!
//! Conventions: precision/recall/F1 are 0 when their denominator vanishes;
//! the continual metrics work in percent units; forgetting ranges only over
//! post-update evaluations (row >= column), since entries above the
//! diagonal are pre-adaptation measurements.

use crate::error::{Error, Result};

// ── Confusion matrix ─────────────────────────────────────────────────

/// C x C count matrix; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<usize>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { counts: vec![0; classes * classes], classes }
    }

    pub fn from_pairs(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::dim(format!(
                "{} labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(pred.iter()) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::index(format!(
                "class pair ({truth},{pred}) out of range 0..{}",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: usize = (0..self.classes).map(|c| self.count(c, c)).sum();
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    /// Rows scaled to sum to 1; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<f64> {
        let c = self.classes;
        let mut out = vec![0.0; c * c];
        for t in 0..c {
            let row_sum: usize = (0..c).map(|p| self.count(t, p)).sum();
            if row_sum > 0 {
                for p in 0..c {
                    out[t * c + p] = self.count(t, p) as f64 / row_sum as f64;
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for t in 0..self.classes {
            let row: Vec<String> = (0..self.classes).map(|p| self.count(t, p).to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Per-class precision, recall, and F1 with the 0/0 -> 0 convention.
pub struct ClassScores {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
}

pub fn per_class_scores(cm: &ConfusionMatrix) -> Result<ClassScores> {
    if cm.total() == 0 {
        return Err(Error::contract("metrics on an empty confusion matrix"));
    }
    let c = cm.classes();
    let mut precision = vec![0.0; c];
    let mut recall = vec![0.0; c];
    let mut f1 = vec![0.0; c];
    for k in 0..c {
        let tp = cm.count(k, k) as f64;
        let fp: f64 = (0..c).filter(|&t| t != k).map(|t| cm.count(t, k) as f64).sum();
        let fne: f64 = (0..c).filter(|&p| p != k).map(|p| cm.count(k, p) as f64).sum();
        precision[k] = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        recall[k] = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
        f1[k] = if precision[k] + recall[k] > 0.0 {
            2.0 * precision[k] * recall[k] / (precision[k] + recall[k])
        } else {
            0.0
        };
    }
    Ok(ClassScores { precision, recall, f1 })
}

/// Unweighted mean, the macro aggregation rule.
pub fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-class F1s plus their macro average.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<(Vec<f64>, f64)> {
    let scores = per_class_scores(cm)?;
    let macro_v = macro_average(&scores.f1);
    Ok((scores.f1, macro_v))
}

// ── Continual-learning performance matrix ────────────────────────────

/// Square matrix F[t][b]: macro F1 (percent) on batch b after learning
/// through step t. Entries above the diagonal are pre-adaptation
/// evaluations of batches that arrive later.
#[derive(Clone, Debug, PartialEq)]
pub struct PerfMatrix {
    f: Vec<f64>,
    t: usize,
}

impl PerfMatrix {
    pub fn new(t: usize) -> Self {
        PerfMatrix { f: vec![0.0; t * t], t }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.len();
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::contract("performance matrix must be square"));
        }
        let mut pm = PerfMatrix::new(t);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                pm.set(i, j, v);
            }
        }
        Ok(pm)
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn set(&mut self, t: usize, b: usize, v: f64) {
        self.f[t * self.t + b] = v;
    }

    pub fn get(&self, t: usize, b: usize) -> f64 {
        self.f[t * self.t + b]
    }

    fn need_multiple_batches(&self) -> Result<()> {
        if self.t < 2 {
            return Err(Error::contract(
                "continual metrics need at least two batches",
            ));
        }
        Ok(())
    }

    /// Per-batch forgetting (for every batch except the last), its mean
    /// (MF) and max (MaxF): max over post-update rows t >= b of F[t][b],
    /// minus the final score F[T][b].
    pub fn forgetting(&self) -> Result<(Vec<f64>, f64, f64)> {
        self.need_multiple_batches()?;
        let t_last = self.t - 1;
        let mut per_batch = Vec::with_capacity(self.t - 1);
        for b in 0..t_last {
            let best = (b..self.t).map(|t| self.get(t, b)).fold(f64::NEG_INFINITY, f64::max);
            per_batch.push(best - self.get(t_last, b));
        }
        let mf = macro_average(&per_batch);
        let maxf = per_batch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok((per_batch, mf, maxf))
    }

    /// Backward transfer: mean over old batches of final minus just-learned
    /// score, F[T][b] - F[b][b].
    pub fn bwt(&self) -> Result<f64> {
        self.need_multiple_batches()?;
        let t_last = self.t - 1;
        let deltas: Vec<f64> = (0..t_last)
            .map(|b| self.get(t_last, b) - self.get(b, b))
            .collect();
        Ok(macro_average(&deltas))
    }

    /// Incoming-batch adaptation gain: mean over t > 0 of post-update minus
    /// pre-update score on the arriving batch, F[t][t] - F[t-1][t]. The
    /// first batch has no pre-update row and is excluded.
    pub fn iag(&self) -> Result<f64> {
        self.need_multiple_batches()?;
        let gains: Vec<f64> = (1..self.t)
            .map(|t| self.get(t, t) - self.get(t - 1, t))
            .collect();
        Ok(macro_average(&gains))
    }

    /// Mean of the final row: retained batch performance after the last
    /// update.
    pub fn avg_batch_f1(&self) -> f64 {
        let t_last = self.t - 1;
        let row: Vec<f64> = (0..self.t).map(|b| self.get(t_last, b)).collect();
        macro_average(&row)
    }

    /// Plain numeric grid, 4 decimal places.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for t in 0..self.t {
            let row: Vec<String> = (0..self.t).map(|b| format!("{:.4}", self.get(t, b))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Metric report: one `name,value` row per metric, 4 decimal places.
pub fn metrics_report_csv(rows: &[(&str, f64)]) -> String {
    let mut s = String::new();
    for (name, value) in rows {
        s.push_str(&format!("{name},{value:.4}\n"));
    }
    s
}

pub fn round_to(v: f64, decimals: u32) -> f64 {
    let p = 10f64.powi(decimals as i32);
    (v * p).round() / p
}
