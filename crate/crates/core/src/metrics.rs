//! F2 scoring of multilabel predictions.
//!
//! Scores are binarized with an inclusive threshold (`score >= t`), then
//! each sample gets its own F2 and the report averages over samples.
//!
//! Empty-set conventions: prediction and truth both empty scores 1; exactly
//! one of them empty scores 0.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::tensor::Matrix;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Label set predicted for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sample_id: String,
    pub labels: LabelSet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub f2: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub samples: usize,
}

pub fn threshold_scores(scores: &Matrix, threshold: f64) -> Vec<LabelSet> {
    (0..scores.rows())
        .map(|r| {
            scores
                .row(r)
                .iter()
                .enumerate()
                .filter(|(_, &s)| s >= threshold)
                .map(|(c, _)| c)
                .collect()
        })
        .collect()
}

/// Precision and recall of one prediction, with the empty-set conventions.
pub fn precision_recall(pred: &LabelSet, truth: &LabelSet) -> (f64, f64) {
    match (pred.is_empty(), truth.is_empty()) {
        (true, true) => (1.0, 1.0),
        (true, false) | (false, true) => (0.0, 0.0),
        (false, false) => {
            let tp = pred.intersection_len(truth) as f64;
            (tp / pred.len() as f64, tp / truth.len() as f64)
        }
    }
}

pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

pub fn f2_sample(pred: &LabelSet, truth: &LabelSet) -> f64 {
    let (p, r) = precision_recall(pred, truth);
    f_beta(p, r, 2.0)
}

/// Sample-averaged F2, precision and recall.
pub fn evaluate(scores: &Matrix, truths: &[LabelSet], threshold: f64) -> Result<MetricsReport> {
    let preds = threshold_scores(scores, threshold);
    let mut report = evaluate_sets(&preds, truths)?;
    report.threshold = threshold;
    Ok(report)
}

pub fn evaluate_sets(preds: &[LabelSet], truths: &[LabelSet]) -> Result<MetricsReport> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth rows",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate".into()));
    }
    let (mut f2, mut precision, mut recall) = (0.0, 0.0, 0.0);
    for (pred, truth) in preds.iter().zip(truths) {
        let (p, r) = precision_recall(pred, truth);
        precision += p;
        recall += r;
        f2 += f_beta(p, r, 2.0);
    }
    let n = preds.len() as f64;
    Ok(MetricsReport {
        f2: f2 / n,
        precision: precision / n,
        recall: recall / n,
        threshold: f64::NAN,
        samples: preds.len(),
    })
}

/// Mean F2 only; the hot path of weight search and model selection.
pub fn mean_f2(scores: &Matrix, truths: &[LabelSet], threshold: f64) -> Result<f64> {
    if scores.rows() != truths.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} ground-truth rows",
            scores.rows(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for (r, truth) in truths.iter().enumerate() {
        let row = scores.row(r);
        let mut predicted = 0usize;
        let mut tp = 0usize;
        for (c, &s) in row.iter().enumerate() {
            if s >= threshold {
                predicted += 1;
                if truth.contains(c) {
                    tp += 1;
                }
            }
        }
        total += match (predicted == 0, truth.is_empty()) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            (false, false) => f_beta(
                tp as f64 / predicted as f64,
                tp as f64 / truth.len() as f64,
                2.0,
            ),
        };
    }
    Ok(total / truths.len() as f64)
}

/// Threshold with the highest mean F2; ties go to the smallest threshold.
pub fn tune_threshold(scores: &Matrix, truths: &[LabelSet], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Param("threshold grid is empty".into()));
    }
    if let Some(t) = grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Param(format!("threshold {t} outside (0, 1)")));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (f64::NEG_INFINITY, sorted[0]);
    for &t in &sorted {
        let f = mean_f2(scores, truths, t)?;
        if f > best.0 {
            best = (f, t);
        }
    }
    Ok(best.1)
}

/// `step, 2*step, ...` strictly inside `(0, 1)`.
pub fn threshold_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (1..n).map(|i| i as f64 / n as f64).collect()
}

/// Rows of per-split F2 scores laid out like a results table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub network: String,
    pub validation: f64,
    pub stage1: f64,
    pub stage2: f64,
}

impl ScoreTable {
    pub fn push(&mut self, network: impl Into<String>, validation: f64, stage1: f64, stage2: f64) {
        self.rows.push(ScoreRow {
            network: network.into(),
            validation,
            stage1,
            stage2,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("network,validation,stage1,stage2\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", r.network, r.validation, r.stage1, r.stage2);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.network.len())
            .chain(std::iter::once("network".len()))
            .max()
            .unwrap_or(7);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>10}  {:>10}",
            "network", "validation", "stage1", "stage2"
        );
        let _ = writeln!(out, "{}", "-".repeat(width + 36));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10.4}  {:>10.4}  {:>10.4}",
                r.network, r.validation, r.stage1, r.stage2
            );
        }
        out
    }
}
