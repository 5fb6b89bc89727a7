//! Classification and feature-selection metrics.
//!
//! Any ratio with a zero denominator evaluates to 0 and records a flag naming
//! the metric, so sums of metrics stay defined for degenerate classifiers.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{MfldaError, Result};
use crate::io::fmt_f64;

/// `counts[k * g + l]` = number of subjects of true class `k` predicted as `l`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    g: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(g: usize) -> Self {
        Self {
            g,
            counts: vec![0; g * g],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let g = rows.len();
        if rows.iter().any(|r| r.len() != g) {
            return Err(MfldaError::Argument("confusion matrix must be square".into()));
        }
        Ok(Self {
            g,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], g: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(MfldaError::Argument("truth and predictions differ in length".into()));
        }
        let mut cm = Self::new(g);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= g || p >= g {
                return Err(MfldaError::Argument(format!("class index out of range for {g} classes")));
            }
            cm.counts[t * g + p] += 1;
        }
        Ok(cm)
    }

    pub fn n_classes(&self) -> usize {
        self.g
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.g + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, k: usize) -> u64 {
        (0..self.g).map(|l| self.get(k, l)).sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        (0..self.g).map(|l| self.get(l, k)).sum()
    }
}

/// How one-vs-rest per-class metrics are averaged for `G > 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    /// Weighted by true-class prevalence.
    Prevalence,
    /// Unweighted mean over classes.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub mcc: f64,
    /// Metrics whose denominator was zero.
    pub flags: Vec<String>,
    pub selection: Option<SelectionMetrics>,
}

impl EvaluationReport {
    /// Sum of accuracy, balanced accuracy, F-1, precision, recall and MCC.
    pub fn combined(&self) -> f64 {
        self.accuracy + self.balanced_accuracy + self.f1 + self.precision + self.recall + self.mcc
    }

    pub fn key_values(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("accuracy".to_string(), fmt_f64(self.accuracy)),
            ("balanced_accuracy".to_string(), fmt_f64(self.balanced_accuracy)),
            ("f1".to_string(), fmt_f64(self.f1)),
            ("precision".to_string(), fmt_f64(self.precision)),
            ("recall".to_string(), fmt_f64(self.recall)),
            ("specificity".to_string(), fmt_f64(self.specificity)),
            ("mcc".to_string(), fmt_f64(self.mcc)),
            ("combined".to_string(), fmt_f64(self.combined())),
            ("flags".to_string(), self.flags.join(";")),
        ];
        if let Some(s) = &self.selection {
            out.push(("selection_sensitivity".to_string(), fmt_f64(s.sensitivity)));
            out.push(("selection_specificity".to_string(), fmt_f64(s.specificity)));
            out.push(("selection_f1".to_string(), fmt_f64(s.f1)));
        }
        out
    }

    /// Writes `key=value` lines.
    pub fn write_text<W: Write>(&self, w: W) -> Result<()> {
        crate::io::write_key_values(w, &self.key_values())
    }

    /// Values in the tuning-trace column order after `tau,fold`.
    pub fn trace_fields(&self) -> [String; 7] {
        [
            fmt_f64(self.accuracy),
            fmt_f64(self.balanced_accuracy),
            fmt_f64(self.f1),
            fmt_f64(self.precision),
            fmt_f64(self.recall),
            fmt_f64(self.mcc),
            fmt_f64(self.combined()),
        ]
    }
}

fn ratio(num: f64, den: f64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        if !flags.iter().any(|f| f == name) {
            flags.push(name.to_string());
        }
        0.0
    } else {
        num / den
    }
}

/// Binary metrics with class index 1 as the positive class.
pub fn binary_metrics(cm: &ConfusionMatrix) -> Result<EvaluationReport> {
    if cm.n_classes() != 2 {
        return Err(MfldaError::Argument(format!(
            "binary metrics need 2 classes, got {}",
            cm.n_classes()
        )));
    }
    if cm.total() == 0 {
        return Err(MfldaError::Argument("empty confusion matrix".into()));
    }
    let tp = cm.get(1, 1) as f64;
    let tn = cm.get(0, 0) as f64;
    let fp = cm.get(0, 1) as f64;
    let fneg = cm.get(1, 0) as f64;
    let mut flags = Vec::new();
    let accuracy = ratio(tp + tn, tp + tn + fp + fneg, "accuracy", &mut flags);
    let tpr = ratio(tp, tp + fneg, "balanced_accuracy", &mut flags);
    let tnr = ratio(tn, tn + fp, "balanced_accuracy", &mut flags);
    let f1 = ratio(tp, tp + (fp + fneg) / 2.0, "f1", &mut flags);
    let precision = ratio(tp, tp + fp, "precision", &mut flags);
    let recall = ratio(tp, tp + fneg, "recall", &mut flags);
    let specificity = ratio(tn, tn + fp, "specificity", &mut flags);
    let den = ((tp + fp) * (tp + fneg) * (tn + fp) * (tn + fneg)).sqrt();
    let mcc = ratio(tp * tn - fp * fneg, den, "mcc", &mut flags);
    Ok(EvaluationReport {
        accuracy,
        balanced_accuracy: 0.5 * (tpr + tnr),
        f1,
        precision,
        recall,
        specificity,
        mcc,
        flags,
        selection: None,
    })
}

/// Multi-class MCC via the Gorodkin triple sum.
pub fn gorodkin_mcc(cm: &ConfusionMatrix, flags: &mut Vec<String>) -> f64 {
    let g = cm.n_classes();
    let c = |k: usize, l: usize| cm.get(k, l) as f64;
    let mut num = 0.0;
    for k in 0..g {
        for l in 0..g {
            for m in 0..g {
                num += c(k, k) * c(l, m) - c(k, l) * c(m, k);
            }
        }
    }
    let total = cm.total() as f64;
    let mut den_true = 0.0;
    let mut den_pred = 0.0;
    for k in 0..g {
        let r = cm.row_sum(k) as f64;
        let s = cm.col_sum(k) as f64;
        den_true += r * (total - r);
        den_pred += s * (total - s);
    }
    ratio(num, den_true.sqrt() * den_pred.sqrt(), "mcc", flags)
}

/// One-vs-rest metrics averaged by `weighting`; MCC by the Gorodkin formula.
pub fn multiclass_metrics(cm: &ConfusionMatrix, weighting: Weighting) -> Result<EvaluationReport> {
    let g = cm.n_classes();
    if g < 2 || cm.total() == 0 {
        return Err(MfldaError::Argument("empty confusion matrix".into()));
    }
    let total = cm.total() as f64;
    let mut flags = Vec::new();
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut f1 = 0.0;
    let mut specificity = 0.0;
    let mut macro_recall = 0.0;
    for k in 0..g {
        let tp = cm.get(k, k) as f64;
        let row = cm.row_sum(k) as f64;
        let col = cm.col_sum(k) as f64;
        let fp = col - tp;
        let fneg = row - tp;
        let tn = total - tp - fp - fneg;
        let w = match weighting {
            Weighting::Prevalence => row / total,
            Weighting::Macro => 1.0 / g as f64,
        };
        let rec = ratio(tp, row, "recall", &mut flags);
        precision += w * ratio(tp, col, "precision", &mut flags);
        recall += w * rec;
        f1 += w * ratio(2.0 * tp, 2.0 * tp + fp + fneg, "f1", &mut flags);
        specificity += w * ratio(tn, tn + fp, "specificity", &mut flags);
        macro_recall += rec / g as f64;
    }
    let trace: f64 = (0..g).map(|k| cm.get(k, k) as f64).sum();
    let mcc = gorodkin_mcc(cm, &mut flags);
    Ok(EvaluationReport {
        accuracy: trace / total,
        balanced_accuracy: macro_recall,
        f1,
        precision,
        recall,
        specificity,
        mcc,
        flags,
        selection: None,
    })
}

/// Binary formulas for two classes, prevalence-weighted ones otherwise.
pub fn evaluate(cm: &ConfusionMatrix) -> Result<EvaluationReport> {
    if cm.n_classes() == 2 {
        binary_metrics(cm)
    } else {
        multiclass_metrics(cm, Weighting::Prevalence)
    }
}

/// Feature-selection sensitivity, specificity and F-1 against known signals.
pub fn selection_metrics(selected: &[usize], truth: &[usize], p: usize) -> Result<SelectionMetrics> {
    if truth.is_empty() {
        return Err(MfldaError::Argument("ground-truth signal set is empty".into()));
    }
    let truth: BTreeSet<usize> = truth.iter().copied().collect();
    let selected: BTreeSet<usize> = selected.iter().copied().collect();
    if truth.iter().chain(selected.iter()).any(|&j| j >= p) {
        return Err(MfldaError::Argument(format!("feature index out of range for p = {p}")));
    }
    let tp = truth.intersection(&selected).count() as f64;
    let fp = selected.difference(&truth).count() as f64;
    let fneg = truth.difference(&selected).count() as f64;
    let negatives = (p - truth.len()) as f64;
    let mut flags = Vec::new();
    let sensitivity = ratio(tp, truth.len() as f64, "selection_sensitivity", &mut flags);
    let specificity = ratio(negatives - fp, negatives, "selection_specificity", &mut flags);
    let f1 = if tp == 0.0 {
        flags.push("selection_f1".to_string());
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fneg)
    };
    Ok(SelectionMetrics {
        sensitivity,
        specificity,
        f1,
        flags,
    })
}
