//! Sparse discriminants.
//!
//! The program `min ‖γ‖₁ s.t. ‖b − λ̃γ‖_∞ ≤ τ` with `b = M γ̃` only couples each
//! coordinate of `γ` with the matching coordinate of `b`, so it splits into
//! `d` scalar problems whose minimisers are soft thresholds:
//! `γ̂_i = sign(b_i) · max(|b_i| − τ, 0) / λ̃`.
//!
//! A fit works on "units": one `pT`-dimensional unit in time-dependent mode,
//! or `T` independent `p`-dimensional units in time-independent mode. After
//! the first sparse solve, each unit is re-solved on its active coordinates
//! until the active set stops changing.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MfldaError, Result};
use crate::io::{csv_writer, fmt_f64};
use crate::lda_core::{deflate, solve_factors, EigenSolution};
use crate::scatter::{Mode, Ridge, ScatterFactors, DENSE_CAP_DEFAULT};
use crate::tensor::{feature_time_to_vec, vec_to_feature_time, Tensor};

/// Coefficients at or below this magnitude count as zero.
pub const NONZERO_TOL: f64 = 1e-12;

/// Default selectivity threshold (fraction of time points).
pub const SELECTIVITY_DEFAULT: f64 = 0.70;

/// Default cap on active-set refinement rounds.
pub const MAX_REFINE_DEFAULT: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseProblem {
    /// `b = M γ̃`.
    pub target: DVector<f64>,
    /// `λ̃ > 0`.
    pub eigenvalue: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSolution {
    pub gamma: DVector<f64>,
    pub active_set: Vec<usize>,
    /// `max_i |b_i − λ̃γ̂_i| − τ`; non-positive up to rounding.
    pub feasibility_gap: f64,
}

/// Closed-form minimiser of the coordinate-separable program.
pub fn solve_sparse(problem: &SparseProblem) -> Result<SparseSolution> {
    let lambda = problem.eigenvalue;
    let tau = problem.tau;
    if !(lambda > 0.0) {
        return Err(MfldaError::DegenerateEigenvalue(lambda));
    }
    if !(tau >= 0.0) {
        return Err(MfldaError::Argument(format!("tau must be non-negative, got {tau}")));
    }
    let b = &problem.target;
    let gamma = b.map(|bi| bi.signum() * (bi.abs() - tau).max(0.0) / lambda);
    let gap = b
        .iter()
        .zip(gamma.iter())
        .map(|(bi, gi)| (bi - lambda * gi).abs())
        .fold(0.0, f64::max)
        - tau;
    if gap > 1e-12 * b.amax().max(1.0) {
        return Err(MfldaError::Argument(format!("sparse solution infeasible by {gap}")));
    }
    let active_set = (0..gamma.len()).filter(|&i| gamma[i].abs() > NONZERO_TOL).collect();
    Ok(SparseSolution {
        gamma,
        active_set,
        feasibility_gap: gap,
    })
}

/// Per-feature selectivity of a `p × T` coefficient matrix and the features
/// reaching `threshold` (inclusive).
pub fn selectivity(gamma: &DMatrix<f64>, threshold: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(MfldaError::Argument(format!("selectivity threshold {threshold} not in (0, 1]")));
    }
    let t = gamma.ncols() as f64;
    let rates: Vec<f64> = gamma
        .row_iter()
        .map(|r| r.iter().filter(|v| v.abs() > NONZERO_TOL).count() as f64 / t)
        .collect();
    let selected = rates
        .iter()
        .enumerate()
        .filter(|(_, &r)| r >= threshold - 1e-12)
        .map(|(j, _)| j)
        .collect();
    Ok((rates, selected))
}

/// The per-time-point sparse discriminant matrix and the features it selects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionProfile {
    /// `Γ̂`, `p × T`.
    pub gamma: DMatrix<f64>,
    pub selectivity: Vec<f64>,
    pub selected: Vec<usize>,
    pub threshold: f64,
}

impl SelectionProfile {
    pub fn new(gamma: DMatrix<f64>, threshold: f64) -> Result<Self> {
        let (selectivity, selected) = selectivity(&gamma, threshold)?;
        Ok(Self {
            gamma,
            selectivity,
            selected,
            threshold,
        })
    }

    /// Fraction of features selected.
    pub fn sparsity(&self) -> f64 {
        self.selected.len() as f64 / self.gamma.nrows().max(1) as f64
    }

    /// CSV `feature,selectivity,mean_abs_coef,selected`, by selectivity descending.
    pub fn write_csv<W: Write>(&self, writer: W, feature_names: &[String]) -> Result<()> {
        let mut order: Vec<usize> = (0..self.gamma.nrows()).collect();
        order.sort_by(|&a, &b| self.selectivity[b].total_cmp(&self.selectivity[a]).then(a.cmp(&b)));
        let mut w = csv_writer(writer);
        w.write_record(["feature", "selectivity", "mean_abs_coef", "selected"])?;
        for j in order {
            let mean_abs = self.gamma.row(j).iter().map(|v| v.abs()).sum::<f64>() / self.gamma.ncols() as f64;
            let name = feature_names.get(j).cloned().unwrap_or_else(|| j.to_string());
            let sel = self.selected.binary_search(&j).is_ok();
            w.write_record([
                name,
                fmt_f64(self.selectivity[j]),
                fmt_f64(mean_abs),
                sel.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Settings for a sparse fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseConfig {
    pub mode: Mode,
    pub tau: f64,
    pub n_components: usize,
    pub selectivity_threshold: f64,
    pub ridge: Ridge,
    pub max_refine: usize,
    pub dense_cap: usize,
}

impl Default for SparseConfig {
    fn default() -> Self {
        Self {
            mode: Mode::TimeIndependent,
            tau: 0.0,
            n_components: 1,
            selectivity_threshold: SELECTIVITY_DEFAULT,
            ridge: Ridge::Auto,
            max_refine: MAX_REFINE_DEFAULT,
            dense_cap: DENSE_CAP_DEFAULT,
        }
    }
}

/// Outcome of one unit's sparse solve.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFit {
    pub gamma: DVector<f64>,
    pub eigenvalue: f64,
    pub refinements: usize,
    pub converged: bool,
}

/// Non-sparse starting point for the first discriminant of every unit.
///
/// Independent of `τ`, so tuning builds it once per training set.
#[derive(Debug, Clone)]
pub struct DiscriminantProblem {
    pub mode: Mode,
    pub p: usize,
    pub t: usize,
    pub n_classes: usize,
    pub ridge: f64,
    units: Vec<ScatterFactors>,
    first: Vec<EigenSolution>,
}

fn split_units(factors: &ScatterFactors, mode: Mode, p: usize, t: usize) -> Vec<ScatterFactors> {
    match mode {
        Mode::TimeDependent => vec![factors.clone()],
        Mode::TimeIndependent => (0..t).map(|h| factors.time_block(h, p)).collect(),
    }
}

fn at_unit<T>(mode: Mode, h: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match mode {
        Mode::TimeIndependent => MfldaError::AtTimePoint {
            time: h,
            source: Box::new(e),
        },
        Mode::TimeDependent => e,
    })
}

impl DiscriminantProblem {
    pub fn new(
        x: &Tensor,
        labels: &[usize],
        n_classes: usize,
        mode: Mode,
        ridge: Ridge,
        dense_cap: usize,
    ) -> Result<Self> {
        let (p, t) = (x.n_features(), x.n_times());
        let factors = ScatterFactors::from_tensor(x, labels, n_classes)?;
        let ridge = ridge.resolve(factors.within_trace(), p * t);
        Self::from_factors(&factors, p, t, n_classes, mode, ridge, dense_cap)
    }

    fn from_factors(
        factors: &ScatterFactors,
        p: usize,
        t: usize,
        n_classes: usize,
        mode: Mode,
        ridge: f64,
        dense_cap: usize,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(MfldaError::Argument("at least two classes are required".into()));
        }
        let d = p * t;
        let rows = factors.within.nrows() + factors.between.nrows();
        if mode == Mode::TimeDependent && rows >= d && d > dense_cap {
            return Err(MfldaError::TooLarge { dim: d, cap: dense_cap });
        }
        let units = split_units(factors, mode, p, t);
        let first = units
            .par_iter()
            .enumerate()
            .map(|(h, f)| at_unit(mode, h, solve_factors(f, ridge, n_classes, 1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode,
            p,
            t,
            n_classes,
            ridge,
            units,
            first,
        })
    }

    /// `M γ̃_1` for every unit.
    pub fn targets(&self) -> Vec<&DVector<f64>> {
        self.first.iter().map(|s| &s.targets[0]).collect()
    }

    pub fn first_eigenvalues(&self) -> Vec<f64> {
        self.first.iter().map(|s| s.eigenvalues[0]).collect()
    }

    pub fn first_solutions(&self) -> &[EigenSolution] {
        &self.first
    }

    /// Largest `‖M γ̃_1‖_∞` over units.
    pub fn tau_max(&self) -> f64 {
        self.targets().iter().map(|b| b.amax()).fold(0.0, f64::max)
    }

    /// Sparse first discriminant at `tau`, as a `p × T` matrix.
    pub fn sparse_first(&self, tau: f64, max_refine: usize) -> Result<(DMatrix<f64>, Vec<UnitFit>)> {
        let fits = self
            .units
            .par_iter()
            .zip(self.first.par_iter())
            .enumerate()
            .map(|(h, (f, s))| {
                at_unit(
                    self.mode,
                    h,
                    refine_unit(f, s, self.ridge, self.n_classes, tau, max_refine),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let gamma = self.assemble(fits.iter().map(|u| &u.gamma));
        Ok((gamma, fits))
    }

    fn assemble<'a>(&self, parts: impl Iterator<Item = &'a DVector<f64>>) -> DMatrix<f64> {
        match self.mode {
            Mode::TimeDependent => {
                let v = parts.into_iter().next().expect("one unit");
                vec_to_feature_time(v, self.p, self.t)
            }
            Mode::TimeIndependent => {
                let cols: Vec<DVector<f64>> = parts.cloned().collect();
                DMatrix::from_columns(&cols)
            }
        }
    }
}

/// Sparse solve followed by re-solves restricted to the active set.
fn refine_unit(
    factors: &ScatterFactors,
    start: &EigenSolution,
    ridge: f64,
    n_classes: usize,
    tau: f64,
    max_refine: usize,
) -> Result<UnitFit> {
    let d = factors.dim();
    let first = solve_sparse(&SparseProblem {
        target: start.targets[0].clone(),
        eigenvalue: start.eigenvalues[0],
        tau,
    })?;
    let mut gamma = first.gamma;
    let mut active = first.active_set;
    let mut eigenvalue = start.eigenvalues[0];
    let mut refinements = 0;
    let mut converged = active.len() == d || active.is_empty();
    while !converged && refinements < max_refine {
        refinements += 1;
        let sub = factors.restrict(&active);
        if sub.within.amax() == 0.0 {
            // nothing left to discriminate on inside the active set
            gamma.fill(0.0);
            active.clear();
            converged = true;
            break;
        }
        let sol = solve_factors(&sub, ridge, n_classes, 1)?;
        eigenvalue = sol.eigenvalues[0];
        let next = if eigenvalue > 0.0 {
            solve_sparse(&SparseProblem {
                target: sol.targets[0].clone(),
                eigenvalue,
                tau,
            })?
        } else {
            SparseSolution {
                gamma: DVector::zeros(active.len()),
                active_set: Vec::new(),
                feasibility_gap: 0.0,
            }
        };
        gamma = DVector::zeros(d);
        for (k, &i) in active.iter().enumerate() {
            gamma[i] = next.gamma[k];
        }
        let next_active: Vec<usize> = next.active_set.iter().map(|&k| active[k]).collect();
        converged = next_active == active;
        active = next_active;
        if active.is_empty() {
            converged = true;
        }
    }
    Ok(UnitFit {
        gamma,
        eigenvalue,
        refinements,
        converged,
    })
}

/// One sparse discriminant component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseComponent {
    /// `Γ̂_k`, `p × T`.
    pub gamma: DMatrix<f64>,
    /// Leading eigenvalue per unit.
    pub eigenvalues: Vec<f64>,
    pub converged: bool,
}

/// All sparse components of a fit plus the selection of the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseFit {
    pub mode: Mode,
    pub components: Vec<SparseComponent>,
    pub profile: SelectionProfile,
}

impl SparseFit {
    pub fn gammas(&self) -> Vec<&DMatrix<f64>> {
        self.components.iter().map(|c| &c.gamma).collect()
    }
}

/// Removes previous components from a standardized tensor. Time-independent
/// mode deflates each time slice by that slice's coefficients; all-zero
/// coefficient vectors are skipped.
pub fn deflate_tensor(x: &Tensor, prior: &[&DMatrix<f64>], mode: Mode) -> Result<Tensor> {
    let (p, t) = (x.n_features(), x.n_times());
    match mode {
        Mode::TimeDependent => {
            let vs: Vec<DVector<f64>> = prior
                .iter()
                .map(|g| feature_time_to_vec(g))
                .filter(|v| v.amax() > 0.0)
                .collect();
            Tensor::from_matrix(&deflate(&x.to_matrix(), &vs)?, p, t)
        }
        Mode::TimeIndependent => {
            let mut out = x.clone();
            for h in 0..t {
                let vs: Vec<DVector<f64>> = prior
                    .iter()
                    .map(|g| g.column(h).into_owned())
                    .filter(|v| v.amax() > 0.0)
                    .collect();
                if vs.is_empty() {
                    continue;
                }
                let slice = deflate(&x.time_slice(h), &vs)?;
                for i in 0..x.n_subjects() {
                    for j in 0..p {
                        out.set(i, j, h, slice[(i, j)]);
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Fits `cfg.n_components` sparse discriminants on a standardized tensor.
/// Components after the first are fitted on data deflated by the earlier
/// sparse components.
pub fn sparse_discriminants(
    x: &Tensor,
    labels: &[usize],
    n_classes: usize,
    cfg: &SparseConfig,
) -> Result<SparseFit> {
    let problem = DiscriminantProblem::new(x, labels, n_classes, cfg.mode, cfg.ridge, cfg.dense_cap)?;
    sparse_from_problem(&problem, x, labels, cfg)
}

/// Same as [`sparse_discriminants`] but reuses a prepared first-component problem.
pub fn sparse_from_problem(
    problem: &DiscriminantProblem,
    x: &Tensor,
    labels: &[usize],
    cfg: &SparseConfig,
) -> Result<SparseFit> {
    let g = problem.n_classes;
    if cfg.n_components == 0 || cfg.n_components + 1 > g {
        return Err(MfldaError::Argument(format!(
            "{} components requested, at most {} available",
            cfg.n_components,
            g - 1
        )));
    }
    let (gamma, fits) = problem.sparse_first(cfg.tau, cfg.max_refine)?;
    let profile = SelectionProfile::new(gamma.clone(), cfg.selectivity_threshold)?;
    let mut components = vec![SparseComponent {
        gamma,
        eigenvalues: fits.iter().map(|f| f.eigenvalue).collect(),
        converged: fits.iter().all(|f| f.converged),
    }];
    while components.len() < cfg.n_components {
        let prior: Vec<&DMatrix<f64>> = components.iter().map(|c| &c.gamma).collect();
        let xd = deflate_tensor(x, &prior, cfg.mode)?;
        let factors = ScatterFactors::from_tensor(&xd, labels, g)?;
        let next = DiscriminantProblem::from_factors(
            &factors,
            problem.p,
            problem.t,
            g,
            cfg.mode,
            problem.ridge,
            cfg.dense_cap,
        )?;
        let (gamma, fits) = next.sparse_first(cfg.tau, cfg.max_refine)?;
        components.push(SparseComponent {
            gamma,
            eigenvalues: fits.iter().map(|f| f.eigenvalue).collect(),
            converged: fits.iter().all(|f| f.converged),
        });
    }
    Ok(SparseFit {
        mode: cfg.mode,
        components,
        profile,
    })
}
