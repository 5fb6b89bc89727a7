//! Choice of the sparsity parameter `τ`: an initial range search driven by
//! realized sparsity, then stratified K-fold cross-validation on a grid.

use std::io::Write;

use log::{debug, info};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MfldaError, Result};
use crate::fd_model::{class_counts, indices_by_class, standardize};
use crate::io::{csv_writer, fmt_f64};
use crate::metrics::{evaluate, ConfusionMatrix, EvaluationReport};
use crate::model::{FitSettings, FittedModel};
use crate::sparse::{selectivity, DiscriminantProblem};
use crate::tensor::Tensor;

pub const GRID_POINTS: usize = 8;
pub const SPARSITY_BAND: f64 = 0.05;
pub const TARGET_SPARSITY_DEFAULT: f64 = 0.10;
pub const C_UPDATE_DEFAULT: f64 = 2.0;
pub const MAX_UPDATES: usize = 50;

/// `(τ_min0, τ_max0)`: the largest `‖M γ̃_1‖_∞` over units and that value
/// shrunk by `sqrt(log p / (nT))`.
pub fn tau_bounds(targets: &[&DVector<f64>], n: usize, p: usize, t: usize) -> Result<(f64, f64)> {
    if n * t <= 1 || p < 2 {
        return Err(MfldaError::Argument(format!(
            "tau bounds need nT > 1 and p >= 2 (n={n}, p={p}, T={t})"
        )));
    }
    let tau_max = targets.iter().map(|b| b.amax()).fold(0.0, f64::max);
    if tau_max <= 0.0 {
        return Err(MfldaError::Argument("leading discriminant is zero".into()));
    }
    let tau_min = tau_max * ((p as f64).ln() / (n * t) as f64).sqrt();
    Ok((tau_min, tau_max))
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|k| if k + 1 == n { hi } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauGrid {
    pub tau_min: f64,
    pub tau_max: f64,
    pub grid: Vec<f64>,
    pub target_sparsity: f64,
    /// Realized sparsity at each grid point, when known.
    pub sparsity: Vec<f64>,
}

impl TauGrid {
    pub fn new(tau_min: f64, tau_max: f64, target_sparsity: f64) -> Result<Self> {
        if !(tau_min > 0.0 && tau_min < tau_max && tau_max.is_finite()) {
            return Err(MfldaError::Argument(format!(
                "tau range must satisfy 0 < min < max, got [{tau_min}, {tau_max}]"
            )));
        }
        let grid = linspace(tau_min, tau_max, GRID_POINTS);
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MfldaError::Argument(format!(
                "tau range [{tau_min}, {tau_max}] is too narrow for {GRID_POINTS} distinct points"
            )));
        }
        Ok(Self {
            tau_min,
            tau_max,
            grid,
            target_sparsity,
            sparsity: Vec::new(),
        })
    }

    fn in_band(&self, s: f64) -> bool {
        (s - self.target_sparsity).abs() <= SPARSITY_BAND + 1e-12
    }
}

/// Fraction of features passing the selectivity rule at `tau`.
pub fn sparsity_at(problem: &DiscriminantProblem, tau: f64, max_refine: usize, threshold: f64) -> Result<f64> {
    let (gamma, _) = problem.sparse_first(tau, max_refine)?;
    let (_, selected) = selectivity(&gamma, threshold)?;
    Ok(selected.len() as f64 / problem.p as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeSearch {
    pub target_sparsity: f64,
    pub c_update: f64,
    pub max_updates: usize,
    pub selectivity_threshold: f64,
    pub max_refine: usize,
}

impl Default for RangeSearch {
    fn default() -> Self {
        Self {
            target_sparsity: TARGET_SPARSITY_DEFAULT,
            c_update: C_UPDATE_DEFAULT,
            max_updates: MAX_UPDATES,
            selectivity_threshold: crate::sparse::SELECTIVITY_DEFAULT,
            max_refine: crate::sparse::MAX_REFINE_DEFAULT,
        }
    }
}

/// Moves and rescales `[τ_min, τ_max]` until at least two grid points have
/// realized sparsity within the band around the target, then returns the grid
/// spanning the first to the last of them.
pub fn find_tau_range(problem: &DiscriminantProblem, n: usize, search: &RangeSearch) -> Result<TauGrid> {
    let target = search.target_sparsity;
    if !(target > 0.0 && target <= 1.0) {
        return Err(MfldaError::Argument(format!("target sparsity {target} outside (0, 1]")));
    }
    if search.c_update <= 1.0 {
        return Err(MfldaError::Argument("range update factor must exceed 1".into()));
    }
    let (mut lo, mut hi) = tau_bounds(&problem.targets(), n, problem.p, problem.t)?;
    let mut attempts = Vec::new();
    let evaluate_grid = |lo: f64, hi: f64| -> Result<TauGrid> {
        let mut g = TauGrid::new(lo, hi, target)?;
        g.sparsity = g
            .grid
            .iter()
            .map(|&tau| sparsity_at(problem, tau, search.max_refine, search.selectivity_threshold))
            .collect::<Result<_>>()?;
        Ok(g)
    };
    while attempts.len() < search.max_updates {
        attempts.push((lo, hi));
        let g = match evaluate_grid(lo, hi) {
            Ok(g) => g,
            Err(MfldaError::Argument(_)) => break,
            Err(e) => return Err(e),
        };
        debug!("tau range [{lo:e}, {hi:e}] sparsity {:?}", g.sparsity);
        let band: Vec<usize> = (0..GRID_POINTS).filter(|&k| g.in_band(g.sparsity[k])).collect();
        if let (Some(&a), Some(&b)) = (band.first(), band.last()) {
            if a < b {
                // final grid spans the in-band stretch
                let z = evaluate_grid(g.grid[a], g.grid[b])?;
                info!("tau grid [{:e}, {:e}] after {} updates", z.tau_min, z.tau_max, attempts.len());
                return Ok(z);
            }
            // a single in-band point: zoom onto its neighbours
            lo = g.grid[a.saturating_sub(1)];
            hi = g.grid[(a + 1).min(GRID_POINTS - 1)];
            continue;
        }
        let too_sparse = |s: f64| s < target - SPARSITY_BAND;
        if g.sparsity.iter().all(|&s| too_sparse(s)) {
            hi = g.grid[0];
            lo /= search.c_update;
        } else if g.sparsity.iter().all(|&s| !too_sparse(s)) {
            lo = g.grid[GRID_POINTS - 1];
            hi *= search.c_update;
        } else {
            let k = (0..GRID_POINTS - 1)
                .find(|&k| !too_sparse(g.sparsity[k]) && too_sparse(g.sparsity[k + 1]))
                .unwrap_or(0);
            lo = g.grid[k];
            hi = g.grid[k + 1];
        }
    }
    Err(MfldaError::NoViableRange { attempts })
}

/// Sum of the six classification metrics.
pub fn combined_metric(report: &EvaluationReport) -> f64 {
    report.combined()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
}

/// Fold index per subject. Each class is shuffled with its own draw from the
/// seeded stream and dealt round-robin, continuing the count across classes.
pub fn stratified_folds(labels: &[usize], n_classes: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(MfldaError::Stratification(format!("{k} folds requested, need at least 2")));
    }
    let counts = class_counts(labels, n_classes);
    if let Some((c, &m)) = counts.iter().enumerate().find(|&(_, &m)| m < k) {
        return Err(MfldaError::Stratification(format!(
            "class {c} has {m} subjects, fewer than {k} folds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    let mut pos = 0;
    for (_, mut members) in indices_by_class(labels, n_classes) {
        members.shuffle(&mut rng);
        for i in members {
            fold[i] = pos % k;
            pos += 1;
        }
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub tau: f64,
    pub fold: usize,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub best_tau: f64,
    pub taus: Vec<f64>,
    /// Fold-mean combined metric per `τ`.
    pub mean_combined: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

impl CvResult {
    /// CSV `tau,fold,accuracy,balanced_accuracy,f1,precision,recall,mcc,combined`.
    pub fn write_trace_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv_writer(writer);
        w.write_record([
            "tau",
            "fold",
            "accuracy",
            "balanced_accuracy",
            "f1",
            "precision",
            "recall",
            "mcc",
            "combined",
        ])?;
        for row in &self.trace {
            let mut rec = vec![fmt_f64(row.tau), row.fold.to_string()];
            rec.extend(row.report.trace_fields());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct FoldData {
    test: Vec<usize>,
    test_x: Tensor,
    train_z: Tensor,
    train_labels: Vec<usize>,
    standardization: crate::fd_model::Standardization,
    problem: DiscriminantProblem,
}

/// Scores every `τ` in `taus` by K-fold cross-validation on a smoothed,
/// unstandardized tensor. Each training fold is standardized on its own and
/// its non-sparse problem is built once for all `τ`.
pub fn cross_validate(
    x: &Tensor,
    labels: &[usize],
    n_classes: usize,
    taus: &[f64],
    cv: &CvConfig,
    settings: &FitSettings,
) -> Result<CvResult> {
    if taus.is_empty() {
        return Err(MfldaError::Argument("empty tau grid".into()));
    }
    let fold_of = stratified_folds(labels, n_classes, cv.folds, cv.seed)?;
    let folds: Vec<FoldData> = (0..cv.folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
            let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let (train_z, standardization) = standardize(&x.select_subjects(&train))?;
            let problem = DiscriminantProblem::new(
                &train_z,
                &train_labels,
                n_classes,
                settings.sparse.mode,
                settings.sparse.ridge,
                settings.sparse.dense_cap,
            )?;
            Ok(FoldData {
                test_x: x.select_subjects(&test),
                test,
                train_z,
                train_labels,
                standardization,
                problem,
            })
        })
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize)> = (0..taus.len())
        .flat_map(|a| (0..cv.folds).map(move |f| (a, f)))
        .collect();
    let reports: Vec<EvaluationReport> = cells
        .par_iter()
        .map(|&(a, f)| {
            let fd = &folds[f];
            let mut s = settings.clone();
            s.sparse.tau = taus[a];
            let model = FittedModel::from_problem(
                &fd.problem,
                &fd.train_z,
                fd.standardization.clone(),
                &fd.train_labels,
                &s,
            )?;
            let predicted: Vec<usize> = model.predict(&fd.test_x)?.iter().map(|p| p.predicted).collect();
            let truth: Vec<usize> = fd.test.iter().map(|&i| labels[i]).collect();
            evaluate(&ConfusionMatrix::from_predictions(&truth, &predicted, n_classes)?)
        })
        .collect::<Result<_>>()?;

    let mut mean_combined = vec![0.0; taus.len()];
    let mut trace = Vec::with_capacity(cells.len());
    for (&(a, f), report) in cells.iter().zip(reports) {
        mean_combined[a] += report.combined() / cv.folds as f64;
        trace.push(TraceRow {
            tau: taus[a],
            fold: f,
            report,
        });
    }
    let mut best = 0;
    for a in 1..taus.len() {
        let (m, b) = (mean_combined[a], mean_combined[best]);
        if m > b || (m == b && taus[a] > taus[best]) {
            best = a;
        }
    }
    info!("cross-validation picked tau {:e} (combined {:.4})", taus[best], mean_combined[best]);
    Ok(CvResult {
        best_tau: taus[best],
        taus: taus.to_vec(),
        mean_combined,
        trace,
    })
}

/// Range search on the full data followed by cross-validation over the grid.
pub fn tune(
    x: &Tensor,
    labels: &[usize],
    n_classes: usize,
    settings: &FitSettings,
    target_sparsity: f64,
    c_update: f64,
    cv: &CvConfig,
) -> Result<(TauGrid, CvResult)> {
    let (z, _) = standardize(x)?;
    let problem = DiscriminantProblem::new(
        &z,
        labels,
        n_classes,
        settings.sparse.mode,
        settings.sparse.ridge,
        settings.sparse.dense_cap,
    )?;
    let search = RangeSearch {
        target_sparsity,
        c_update,
        max_updates: MAX_UPDATES,
        selectivity_threshold: settings.sparse.selectivity_threshold,
        max_refine: settings.sparse.max_refine,
    };
    let grid = find_tau_range(&problem, x.n_subjects(), &search)?;
    let result = cross_validate(x, labels, n_classes, &grid.grid, cv, settings)?;
    Ok((grid, result))
}

/// Seeded stratified holdout: `ceil(fraction · n_k)` subjects of each class
/// go to the test side. Both sides are returned in ascending index order.
pub fn stratified_split(
    labels: &[usize],
    n_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(MfldaError::Argument(format!("test fraction {fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (k, mut members) in indices_by_class(labels, n_classes) {
        let m = members.len();
        let n_test = (fraction * m as f64).ceil() as usize;
        if m < 2 || n_test >= m {
            return Err(MfldaError::Stratification(format!(
                "class {k} with {m} subjects cannot be split"
            )));
        }
        members.shuffle(&mut rng);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_formula() {
        let b = DVector::from_vec(vec![0.5, -2.0, 1.0]);
        let (lo, hi) = tau_bounds(&[&b], 100, 100, 40).unwrap();
        assert_eq!(hi, 2.0);
        assert!((lo - 2.0 * (100f64.ln() / 4000.0).sqrt()).abs() < 1e-15);
        assert!((lo - 0.0679).abs() < 1e-4);
        assert!(tau_bounds(&[&b], 1, 5, 1).is_err());
        assert!(tau_bounds(&[&b], 10, 1, 4).is_err());
    }

    #[test]
    fn bounds_scale_with_target() {
        let b = DVector::from_vec(vec![0.3, -1.1]);
        let b3 = &b * 3.0;
        let (lo, hi) = tau_bounds(&[&b], 20, 5, 4).unwrap();
        let (lo3, hi3) = tau_bounds(&[&b3], 20, 5, 4).unwrap();
        assert!((lo3 - 3.0 * lo).abs() < 1e-14);
        assert!((hi3 - 3.0 * hi).abs() < 1e-14);
    }

    #[test]
    fn grid_shape() {
        let g = TauGrid::new(0.1, 0.8, 0.1).unwrap();
        assert_eq!(g.grid.len(), GRID_POINTS);
        assert_eq!(g.grid[0], 0.1);
        assert_eq!(g.grid[7], 0.8);
        assert!(g.grid.windows(2).all(|w| w[0] < w[1]));
        assert!(TauGrid::new(0.5, 0.5, 0.1).is_err());
        assert!(TauGrid::new(0.0, 0.5, 0.1).is_err());
    }

    #[test]
    fn fold_sizes_for_74_26() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 74)).collect();
        let folds = stratified_folds(&labels, 2, 5, 11).unwrap();
        for f in 0..5 {
            let members: Vec<usize> = (0..100).filter(|&i| folds[i] == f).collect();
            assert_eq!(members.len(), 20);
            let minority = members.iter().filter(|&&i| labels[i] == 1).count();
            assert!((5..=6).contains(&minority));
        }
        assert_eq!(folds, stratified_folds(&labels, 2, 5, 11).unwrap());
    }

    #[test]
    fn holdout_split() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let (train, test) = stratified_split(&labels, 3, 0.25, 4).unwrap();
        assert_eq!(test.len(), 9);
        assert_eq!(train.len() + test.len(), 30);
        assert!(stratified_split(&labels, 3, 1.0, 4).is_err());
    }

    #[test]
    fn fold_errors() {
        let labels = vec![0, 0, 0, 1, 1];
        assert!(matches!(
            stratified_folds(&labels, 2, 3, 0),
            Err(MfldaError::Stratification(_))
        ));
        assert!(stratified_folds(&labels, 2, 1, 0).is_err());
    }
}
