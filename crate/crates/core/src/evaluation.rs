//! Next-step accuracy and the per-dataset metrics report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::models::{TokenBatch, TrajectoryModel};

/// Highest-scoring real token in a logit row; column 0 (padding) is never
/// chosen and ties go to the lowest ID.
pub fn argmax_token(row: &[f64]) -> usize {
    let mut best = 1;
    for j in 2..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

/// Anything that predicts one next token per input position.
pub trait Predictor {
    /// Returns `batch.batch × batch.len` predicted token IDs.
    fn predict(&self, batch: &TokenBatch) -> Result<Vec<usize>>;
}

impl Predictor for TrajectoryModel {
    fn predict(&self, batch: &TokenBatch) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok(logits.data().chunks(logits.last_dim()).map(argmax_token).collect())
    }
}

/// Always predicts the same token.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPredictor(pub usize);

impl Predictor for ConstantPredictor {
    fn predict(&self, batch: &TokenBatch) -> Result<Vec<usize>> {
        Ok(vec![self.0; batch.tokens.len()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccuracyMode {
    /// Correct positions over all target positions.
    Micro,
    /// Mean of per-sequence accuracies.
    Macro,
}

/// Correct/total counts per sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyCounts {
    pub per_sequence: Vec<(usize, usize)>,
}

impl AccuracyCounts {
    /// Scores one batch of predictions against shifted targets laid out
    /// `[batch, len]`; target 0 is skipped.
    pub fn record(&mut self, predictions: &[usize], targets: &[usize], len: usize) {
        for (p, t) in predictions.chunks(len).zip(targets.chunks(len)) {
            let mut c = (0, 0);
            for (&pi, &ti) in p.iter().zip(t) {
                if ti != 0 {
                    c.1 += 1;
                    c.0 += usize::from(pi == ti);
                }
            }
            self.per_sequence.push(c);
        }
    }

    pub fn correct(&self) -> usize {
        self.per_sequence.iter().map(|c| c.0).sum()
    }

    pub fn total(&self) -> usize {
        self.per_sequence.iter().map(|c| c.1).sum()
    }

    pub fn micro(&self) -> f64 {
        ratio(self.correct(), self.total())
    }

    /// Sequences without targets do not count toward the mean.
    pub fn macro_avg(&self) -> f64 {
        let scored: Vec<f64> = self
            .per_sequence
            .iter()
            .filter(|c| c.1 > 0)
            .map(|&(c, t)| c as f64 / t as f64)
            .collect();
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        }
    }

    pub fn get(&self, mode: AccuracyMode) -> f64 {
        match mode {
            AccuracyMode::Micro => self.micro(),
            AccuracyMode::Macro => self.macro_avg(),
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Counts for `predictor` over padded sequences, `batch_size` at a time.
pub fn score<P: Predictor + ?Sized>(predictor: &P, sequences: &[&[usize]], batch_size: usize) -> Result<AccuracyCounts> {
    if sequences.is_empty() {
        return Err(Error::config("no sequences to evaluate"));
    }
    let mut counts = AccuracyCounts::default();
    for chunk in sequences.chunks(batch_size.max(1)) {
        let (batch, targets) = TokenBatch::with_targets(chunk)?;
        let preds = predictor.predict(&batch)?;
        counts.record(&preds, &targets, batch.len);
    }
    Ok(counts)
}

pub fn next_step_accuracy<P: Predictor + ?Sized>(predictor: &P, sequences: &[&[usize]], mode: AccuracyMode) -> Result<f64> {
    Ok(score(predictor, sequences, 64)?.get(mode))
}

/// Most frequent non-padding target token, lowest ID on ties.
pub fn most_frequent_target(sequences: &[&[usize]]) -> Option<usize> {
    let mut freq: Vec<usize> = Vec::new();
    for s in sequences {
        for &t in s.iter().skip(1).filter(|&&t| t != 0) {
            if t >= freq.len() {
                freq.resize(t + 1, 0);
            }
            freq[t] += 1;
        }
    }
    let max = *freq.iter().max()?;
    (max > 0).then(|| freq.iter().position(|&f| f == max).unwrap())
}

/// Micro accuracy of always predicting the most frequent target.
pub fn unigram_baseline(sequences: &[&[usize]]) -> Result<f64> {
    let tok = most_frequent_target(sequences).ok_or(Error::EmptyTargets)?;
    next_step_accuracy(&ConstantPredictor(tok), sequences, AccuracyMode::Micro)
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub dataset: String,
    pub model: String,
    pub test_acc_micro: f64,
    pub test_acc_macro: f64,
    pub train_acc_micro: f64,
    pub mean_batch_ms: f64,
    pub std_batch_ms: f64,
}

impl MetricsRow {
    /// Train minus test micro accuracy.
    pub fn gap(&self) -> f64 {
        self.train_acc_micro - self.test_acc_micro
    }

    fn values(&self) -> [f64; 5] {
        [
            self.test_acc_micro,
            self.test_acc_macro,
            self.train_acc_micro,
            self.mean_batch_ms,
            self.std_batch_ms,
        ]
    }

    fn from_values(dataset: &str, model: &str, v: [f64; 5]) -> Self {
        MetricsRow {
            dataset: dataset.into(),
            model: model.into(),
            test_acc_micro: v[0],
            test_acc_macro: v[1],
            train_acc_micro: v[2],
            mean_batch_ms: v[3],
            std_batch_ms: v[4],
        }
    }
}

/// Per-dataset rows plus, for each model, a `mean` and a `std` row taken
/// across its datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub aggregates: Vec<MetricsRow>,
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "dataset",
    "model",
    "test_acc_micro",
    "test_acc_macro",
    "train_acc_micro",
    "mean_batch_ms",
    "std_batch_ms",
];

pub fn summarize(rows: Vec<MetricsRow>) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::config("no runs to summarize"));
    }
    let mut models: Vec<&str> = Vec::new();
    for r in &rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let mut aggregates = Vec::new();
    for m in models {
        let vals: Vec<[f64; 5]> = rows.iter().filter(|r| r.model == m).map(MetricsRow::values).collect();
        let mut mean = [0.0; 5];
        let mut std = [0.0; 5];
        for k in 0..5 {
            let col: Vec<f64> = vals.iter().map(|v| v[k]).collect();
            (mean[k], std[k]) = mean_std(&col);
        }
        aggregates.push(MetricsRow::from_values("mean", m, mean));
        aggregates.push(MetricsRow::from_values("std", m, std));
    }
    Ok(MetricsReport { rows, aggregates })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = REPORT_COLUMNS.join(",");
        s.push('\n');
        for r in self.rows.iter().chain(&self.aggregates) {
            let _ = write!(s, "{},{}", csv_field(&r.dataset), csv_field(&r.model));
            for v in r.values() {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// Fixed-width text table with a train−test gap column.
    pub fn render_table(&self) -> String {
        let header = ["dataset", "model", "test micro", "test macro", "train micro", "gap", "ms/batch", "std ms"];
        let mut lines: Vec<Vec<String>> = vec![header.iter().map(|h| h.to_string()).collect()];
        for r in self.rows.iter().chain(&self.aggregates) {
            lines.push(vec![
                r.dataset.clone(),
                r.model.clone(),
                format!("{:.4}", r.test_acc_micro),
                format!("{:.4}", r.test_acc_macro),
                format!("{:.4}", r.train_acc_micro),
                format!("{:+.4}", r.gap()),
                format!("{:.3}", r.mean_batch_ms),
                format!("{:.3}", r.std_batch_ms),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap())
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| if c < 2 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
