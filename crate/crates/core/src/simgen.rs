//! Synthetic functional datasets: polynomial-plus-sinusoid base curves with
//! group shifts inside per-feature time windows, optional subject-specific
//! temporal effects and Gaussian noise.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MfldaError, Result};
use crate::fd_model::{FunctionalDataSet, Observation, Subject};
use crate::io::{csv_writer, fmt_f64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    AllTime,
    Window5To15,
    RandomWindowLen10,
    RandomWindowRandomLen,
    Window5To15WithSte,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::AllTime,
        Scenario::Window5To15,
        Scenario::RandomWindowLen10,
        Scenario::RandomWindowRandomLen,
        Scenario::Window5To15WithSte,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::AllTime => "all_time",
            Scenario::Window5To15 => "window_5_15",
            Scenario::RandomWindowLen10 => "random_window_len10",
            Scenario::RandomWindowRandomLen => "random_window_random_len",
            Scenario::Window5To15WithSte => "window_5_15_with_ste",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = MfldaError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| MfldaError::Argument(format!("unknown scenario `{s}`")))
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_per_group: Vec<usize>,
    pub p: usize,
    pub t: usize,
    pub sigma: f64,
    /// Group separations; group 1 is the reference.
    pub deltas: Vec<f64>,
    pub signal_fraction: f64,
    pub scenario: Scenario,
    pub rho: f64,
    pub seed: u64,
    /// Three groups only: the first signal block separates group 1 from the
    /// others and a second block separates group 2 from the others.
    pub disjoint_signals: bool,
    /// Per-(subject, time) probability of keeping an observation.
    pub keep_rate: f64,
}

pub const SIGMA_DEFAULT: f64 = 25.0;

impl SimConfig {
    /// Equal group sizes with the standard separations `0, 500, 1000, ...`.
    pub fn new(groups: usize, n_per_group: usize, p: usize, scenario: Scenario, seed: u64) -> Self {
        Self {
            n_per_group: vec![n_per_group; groups],
            p,
            t: 40,
            sigma: SIGMA_DEFAULT,
            deltas: (0..groups).map(|g| 500.0 * g as f64).collect(),
            signal_fraction: 0.10,
            scenario,
            rho: 0.0,
            seed,
            disjoint_signals: false,
            keep_rate: 1.0,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.n_per_group.len()
    }

    pub fn n_signal(&self) -> usize {
        (self.p as f64 * self.signal_fraction).round() as usize
    }

    fn effective_rho(&self) -> f64 {
        if self.scenario == Scenario::Window5To15WithSte {
            1.0
        } else {
            self.rho
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_groups() < 2 {
            problems.push("at least two groups are required".to_string());
        }
        if self.n_per_group.contains(&0) {
            problems.push("every group needs at least one subject".to_string());
        }
        if self.deltas.len() != self.n_groups() {
            problems.push(format!("{} deltas for {} groups", self.deltas.len(), self.n_groups()));
        }
        if self.p == 0 {
            problems.push("p must be positive".to_string());
        }
        if self.t < 2 {
            problems.push("T must be at least 2".to_string());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            problems.push(format!("sigma {} must be finite and non-negative", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.signal_fraction) {
            problems.push(format!("signal fraction {} outside [0, 1]", self.signal_fraction));
        }
        let blocks = if self.disjoint_signals { 2 } else { 1 };
        if self.n_signal() * blocks > self.p {
            problems.push("signal blocks exceed p".to_string());
        }
        if self.disjoint_signals && self.n_groups() != 3 {
            problems.push("disjoint signals need exactly three groups".to_string());
        }
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            problems.push(format!("keep rate {} outside (0, 1]", self.keep_rate));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(MfldaError::Config(problems))
        }
    }
}

/// Counter-based stream for one `(tag, feature, subject)` triple.
fn stream(seed: u64, tag: u64, feature: usize, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 56) | ((feature as u64) << 28) | subject as u64);
    rng
}

const TAG_BASE: u64 = 1;
const TAG_SIGN: u64 = 2;
const TAG_WINDOW: u64 = 3;
const TAG_NOISE: u64 = 4;
const TAG_STE: u64 = 5;
const TAG_KEEP: u64 = 6;

/// Base curve `η_0 + η_1 t + … + η_4 t^4 + η_5 sin(η_6 t)` of one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseCurve {
    /// `η_0..η_6`.
    pub eta: [f64; 7],
    pub knots_x: [f64; 6],
    pub knots_y: [f64; 6],
}

impl BaseCurve {
    pub fn polynomial(&self, t: f64) -> f64 {
        self.eta[..5].iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    pub fn value(&self, t: f64) -> f64 {
        self.polynomial(t) + self.eta[5] * (self.eta[6] * t).sin()
    }
}

/// Least-squares quartic through six random points plus the sinusoid terms.
pub fn base_curve_params(rng: &mut impl Rng, t_max: usize) -> BaseCurve {
    let mut xs = [0.0f64; 6];
    xs[5] = 10.0;
    for x in &mut xs[1..5] {
        *x = rng.random_range(0.0..10.0);
    }
    let mut ys = [0.0; 6];
    for y in &mut ys {
        *y = rng.random_range(50.0..100.0);
    }
    let v = DMatrix::from_fn(6, 5, |r, c| xs[r].powi(c as i32));
    let coef = v
        .svd(true, true)
        .solve(&DVector::from_column_slice(&ys), 1e-14)
        .expect("svd with both factors");
    let mut eta = [0.0; 7];
    eta[..5].copy_from_slice(coef.as_slice());
    let mut curve = BaseCurve {
        eta,
        knots_x: xs,
        knots_y: ys,
    };
    let (lo, hi) = (1..=t_max)
        .map(|t| curve.polynomial(t as f64))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    curve.eta[5] = hi - lo;
    curve.eta[6] = rng.random_range(0.0..10.0);
    curve
}

/// Inclusive 1-based separation window of one signal feature.
pub fn scenario_window(scenario: Scenario, t: usize, rng: &mut impl Rng) -> (usize, usize) {
    match scenario {
        Scenario::AllTime => (1, t),
        Scenario::Window5To15 | Scenario::Window5To15WithSte => (5.min(t), 15.min(t)),
        Scenario::RandomWindowLen10 => {
            let len = 10.min(t);
            let start = rng.random_range(1..=t - len + 1);
            (start, start + len - 1)
        }
        Scenario::RandomWindowRandomLen => {
            let len = rng.random_range(5..=40usize).min(t);
            let start = rng.random_range(1..=t - len + 1);
            (start, start + len - 1)
        }
    }
}

/// One discriminating feature: its window and the shift applied to each group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalFeature {
    pub feature: usize,
    pub window: (usize, usize),
    pub shifts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub signals: Vec<SignalFeature>,
}

impl GroundTruth {
    pub fn signal_features(&self) -> Vec<usize> {
        self.signals.iter().map(|s| s.feature).collect()
    }

    /// CSV `feature,window_start,window_end,shift_1,…,shift_G`.
    pub fn write_csv<W: Write>(&self, writer: W, feature_names: &[String], n_groups: usize) -> Result<()> {
        let mut w = csv_writer(writer);
        let mut header = vec!["feature".to_string(), "window_start".into(), "window_end".into()];
        header.extend((1..=n_groups).map(|g| format!("shift_{g}")));
        w.write_record(&header)?;
        for s in &self.signals {
            let mut rec = vec![
                feature_names[s.feature].clone(),
                s.window.0.to_string(),
                s.window.1.to_string(),
            ];
            rec.extend(s.shifts.iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    /// Long-format observations (subsampled when `keep_rate < 1`).
    pub data: FunctionalDataSet,
    /// Complete curves on `t = 1..T`.
    pub tensor: Tensor,
    pub labels: Vec<usize>,
    pub truth: GroundTruth,
    pub base: Vec<BaseCurve>,
}

fn random_sign(rng: &mut impl Rng) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn ground_truth(cfg: &SimConfig) -> GroundTruth {
    let s = cfg.n_signal();
    let g = cfg.n_groups();
    let mut signals = Vec::new();
    let blocks = if cfg.disjoint_signals { 2 } else { 1 };
    for block in 0..blocks {
        for j in block * s..(block + 1) * s {
            let mut rng = stream(cfg.seed, TAG_SIGN, j, 0);
            let shifts = if cfg.disjoint_signals {
                // block 0 leaves group 1 at the reference, block 1 group 2
                let lambda = random_sign(&mut rng);
                (0..g)
                    .map(|k| if k == block { 0.0 } else { lambda * cfg.deltas[1] })
                    .collect()
            } else {
                (0..g)
                    .map(|k| {
                        let lambda = if k == 0 { 1.0 } else { random_sign(&mut rng) };
                        lambda * cfg.deltas[k]
                    })
                    .collect()
            };
            let window = scenario_window(cfg.scenario, cfg.t, &mut stream(cfg.seed, TAG_WINDOW, j, 0));
            signals.push(SignalFeature {
                feature: j,
                window,
                shifts,
            });
        }
    }
    GroundTruth { signals }
}

fn psi(t: f64) -> (f64, f64) {
    let a = std::f64::consts::PI * (t - 0.5);
    (-2.0 * a.cos(), a.sin())
}

/// Draws a dataset. Output is a pure function of `cfg`.
pub fn generate(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let (p, t) = (cfg.p, cfg.t);
    let labels: Vec<usize> = cfg
        .n_per_group
        .iter()
        .enumerate()
        .flat_map(|(g, &n)| std::iter::repeat_n(g, n))
        .collect();
    let n = labels.len();
    let truth = ground_truth(cfg);
    let base: Vec<BaseCurve> = (0..p)
        .map(|j| base_curve_params(&mut stream(cfg.seed, TAG_BASE, j, 0), t))
        .collect();
    let mut shift_of: Vec<Option<&SignalFeature>> = vec![None; p];
    for s in &truth.signals {
        shift_of[s.feature] = Some(s);
    }
    let rho = cfg.effective_rho();
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| MfldaError::Argument(e.to_string()))?;

    // one (subject, feature) curve per job
    let curves: Vec<Vec<f64>> = (0..n * p)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / p, k % p);
            let mut eps = stream(cfg.seed, TAG_NOISE, j, i);
            let (xi1, xi2) = if rho != 0.0 {
                let mut r = stream(cfg.seed, TAG_STE, j, i);
                (StandardNormal.sample(&mut r), StandardNormal.sample(&mut r))
            } else {
                (0.0, 0.0)
            };
            (1..=t)
                .map(|h| {
                    let tf = h as f64;
                    let mut v = base[j].value(tf);
                    if let Some(s) = shift_of[j] {
                        if (s.window.0..=s.window.1).contains(&h) {
                            v += s.shifts[labels[i]];
                        }
                    }
                    if rho != 0.0 {
                        let (p1, p2) = psi(tf);
                        v += rho * (xi1 * p1 + xi2 * p2);
                    }
                    let e: f64 = noise.sample(&mut eps);
                    v + e
                })
                .collect()
        })
        .collect();
    let tensor = Tensor::from_fn(n, p, t, |i, j, h| curves[i * p + j][h]);

    let feature_names: Vec<String> = (1..=p).map(|j| format!("f{j:04}")).collect();
    let subjects = (0..n)
        .map(|i| {
            let mut keep = stream(cfg.seed, TAG_KEEP, 0, i);
            let mut observations = Vec::new();
            for h in 0..t {
                if cfg.keep_rate < 1.0 && !keep.random_bool(cfg.keep_rate) {
                    continue;
                }
                for j in 0..p {
                    observations.push(Observation {
                        time: (h + 1) as f64,
                        feature: j,
                        value: tensor.get(i, j, h),
                    });
                }
            }
            Subject {
                id: format!("s{:05}", i + 1),
                label: Some(labels[i]),
                observations,
            }
        })
        .collect();
    let data = FunctionalDataSet {
        feature_names,
        class_names: (1..=cfg.n_groups()).map(|g| g.to_string()).collect(),
        time_domain: (1.0, t as f64),
        subjects,
    };
    Ok(Simulation {
        data,
        tensor,
        labels,
        truth,
        base,
    })
}
