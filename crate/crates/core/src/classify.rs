//! Discriminant scores, nearest-centroid classification and the
//! Kolmogorov–Smirnov separation check.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MfldaError, Result};
use crate::io::{csv_writer, fmt_f64};
use crate::tensor::Tensor;

/// Score curves `z_ic(t) = Σ_j Γ̂_c[j, t] · x_ij(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminantScores {
    pub n: usize,
    pub n_components: usize,
    pub t: usize,
    /// Indexed `(i * n_components + c) * t + h`.
    pub values: Vec<f64>,
}

impl DiscriminantScores {
    pub fn get(&self, i: usize, c: usize, h: usize) -> f64 {
        self.values[(i * self.n_components + c) * self.t + h]
    }

    /// All scores of subject `i`, components concatenated.
    pub fn curve(&self, i: usize) -> &[f64] {
        let len = self.n_components * self.t;
        &self.values[i * len..(i + 1) * len]
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(idx.len() * self.n_components * self.t);
        for &i in idx {
            values.extend_from_slice(self.curve(i));
        }
        Self {
            n: idx.len(),
            n_components: self.n_components,
            t: self.t,
            values,
        }
    }

    /// CSV `subject_id,component,time,score` (component 1-based).
    pub fn write_csv<W: Write>(&self, writer: W, subject_ids: &[String], grid: &[f64]) -> Result<()> {
        let mut w = csv_writer(writer);
        w.write_record(["subject_id", "component", "time", "score"])?;
        for i in 0..self.n {
            for c in 0..self.n_components {
                for h in 0..self.t {
                    w.write_record([
                        subject_ids[i].clone(),
                        (c + 1).to_string(),
                        fmt_f64(grid[h]),
                        fmt_f64(self.get(i, c, h)),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Projects each subject onto every `p × T` discriminant matrix.
pub fn project(x: &Tensor, gammas: &[&DMatrix<f64>]) -> Result<DiscriminantScores> {
    let (n, p, t) = (x.n_subjects(), x.n_features(), x.n_times());
    for g in gammas {
        if g.shape() != (p, t) {
            return Err(MfldaError::Argument(format!(
                "discriminant is {}x{}, data is p={p}, T={t}",
                g.nrows(),
                g.ncols()
            )));
        }
    }
    let nc = gammas.len();
    let mut values = vec![0.0; n * nc * t];
    for i in 0..n {
        for (c, g) in gammas.iter().enumerate() {
            for h in 0..t {
                let col = g.column(h);
                values[(i * nc + c) * t + h] = x.block(i, h).iter().zip(col.iter()).map(|(a, b)| a * b).sum();
            }
        }
    }
    Ok(DiscriminantScores {
        n,
        n_components: nc,
        t,
        values,
    })
}

/// Per-class mean score curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    pub n_classes: usize,
    pub n_components: usize,
    pub t: usize,
    /// Indexed `(k * n_components + c) * t + h`.
    pub values: Vec<f64>,
}

impl Centroids {
    pub fn from_scores(scores: &DiscriminantScores, labels: &[usize], n_classes: usize) -> Result<Self> {
        if labels.len() != scores.n {
            return Err(MfldaError::Argument("labels do not match scores".into()));
        }
        let len = scores.n_components * scores.t;
        let mut values = vec![0.0; n_classes * len];
        let mut counts = vec![0usize; n_classes];
        for (i, &k) in labels.iter().enumerate() {
            counts[k] += 1;
            for (v, s) in values[k * len..(k + 1) * len].iter_mut().zip(scores.curve(i)) {
                *v += s;
            }
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(MfldaError::DegenerateClass { class: k });
        }
        for k in 0..n_classes {
            for v in &mut values[k * len..(k + 1) * len] {
                *v /= counts[k] as f64;
            }
        }
        Ok(Self {
            n_classes,
            n_components: scores.n_components,
            t: scores.t,
            values,
        })
    }

    pub fn curve(&self, k: usize) -> &[f64] {
        let len = self.n_components * self.t;
        &self.values[k * len..(k + 1) * len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// Distance between whole score curves.
    Overall,
    /// Nearest centroid per time point, then a majority vote.
    TimeWise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub index: usize,
    pub predicted: usize,
    /// Per-time votes in time-wise mode.
    pub votes: Vec<usize>,
    /// Distance to the runner-up minus distance to the winner (averaged over
    /// time points in time-wise mode).
    pub margin: f64,
}

/// Index of the smallest value and the gap to the second smallest; ties go to
/// the lowest index.
fn argmin_with_margin(d: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for k in 1..d.len() {
        if d[k] < d[best] {
            best = k;
        }
    }
    let second = d
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != best)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let margin = if second.is_finite() { second - d[best] } else { 0.0 };
    (best, margin)
}

pub fn nearest_centroid(scores: &DiscriminantScores, centroids: &Centroids, mode: TimeMode) -> Result<Vec<Prediction>> {
    if scores.n_components != centroids.n_components || scores.t != centroids.t {
        return Err(MfldaError::Argument("scores and centroids differ in shape".into()));
    }
    let g = centroids.n_classes;
    let (nc, t) = (scores.n_components, scores.t);
    let out = (0..scores.n)
        .map(|i| match mode {
            TimeMode::Overall => {
                let d: Vec<f64> = (0..g)
                    .map(|k| {
                        scores
                            .curve(i)
                            .iter()
                            .zip(centroids.curve(k))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect();
                let (predicted, margin) = argmin_with_margin(&d);
                Prediction {
                    index: i,
                    predicted,
                    votes: Vec::new(),
                    margin,
                }
            }
            TimeMode::TimeWise => {
                let mut votes = Vec::with_capacity(t);
                let mut margin = 0.0;
                for h in 0..t {
                    let d: Vec<f64> = (0..g)
                        .map(|k| {
                            (0..nc)
                                .map(|c| {
                                    let diff = scores.get(i, c, h) - centroids.values[(k * nc + c) * t + h];
                                    diff * diff
                                })
                                .sum::<f64>()
                                .sqrt()
                        })
                        .collect();
                    let (k, m) = argmin_with_margin(&d);
                    votes.push(k);
                    margin += m / t as f64;
                }
                let predicted = majority_vote(&votes).expect("at least one time point");
                Prediction {
                    index: i,
                    predicted,
                    votes,
                    margin,
                }
            }
        })
        .collect();
    Ok(out)
}

/// Most frequent class; ties go to the lowest class index.
pub fn majority_vote(votes: &[usize]) -> Result<usize> {
    let max = *votes
        .iter()
        .max()
        .ok_or_else(|| MfldaError::Argument("no votes".into()))?;
    let mut counts = vec![0usize; max + 1];
    for &v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    for k in 1..counts.len() {
        if counts[k] > counts[best] {
            best = k;
        }
    }
    Ok(best)
}

/// CSV `subject_id,predicted,true,margin`.
pub fn write_predictions_csv<W: Write>(
    writer: W,
    predictions: &[Prediction],
    subject_ids: &[String],
    class_names: &[String],
    truth: Option<&[usize]>,
) -> Result<()> {
    let mut w = csv_writer(writer);
    w.write_record(["subject_id", "predicted", "true", "margin"])?;
    for p in predictions {
        let t = truth.map(|t| class_names[t[p.index]].clone()).unwrap_or_default();
        w.write_record([
            subject_ids[p.index].clone(),
            class_names[p.predicted].clone(),
            t,
            fmt_f64(p.margin),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution, `P(K > x)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.18 {
        // P(K <= x) = √(2π)/x · Σ exp(−(2k−1)²π²/(8x²)); converges fast for small x
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let s: f64 = (1..=20)
            .map(|k| {
                let m = (2 * k - 1) as f64;
                (-m * m * pi2 / (8.0 * x * x)).exp()
            })
            .sum();
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / x * s).clamp(0.0, 1.0)
    } else {
        let s: f64 = (1..=100)
            .map(|k| {
                let kf = k as f64;
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * kf * kf * x * x).exp()
            })
            .sum();
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// Two-sample KS statistic with the asymptotic p-value `Q_KS(√(nm/(n+m)) · D)`.
pub fn ks_separation(a: &[f64], b: &[f64]) -> Result<KsResult> {
    for (name, s) in [("group a", a), ("group b", b)] {
        if s.len() < 2 {
            return Err(MfldaError::InsufficientData {
                subject: name.to_string(),
                found: s.len(),
                required: 2,
            });
        }
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_sf(en * d),
    })
}
