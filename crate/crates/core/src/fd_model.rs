//! Irregular multivariate longitudinal data and its B-spline mean model.
//!
//! Every subject is reduced to a coefficient matrix `C_i` (`m × p`): column `j`
//! holds the least-squares spline coefficients of feature `j`, so the smoothed
//! curve is `w_ij(t) = φ(t)ᵀ c_ij`. Evaluating all subjects on a common grid
//! turns ragged observations into the dense [`Tensor`] the discriminant
//! solvers work on.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use log::warn;
use nalgebra::{DMatrix, DVector, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MfldaError, Result};
use crate::tensor::Tensor;

/// One measured value of one feature at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub time: f64,
    pub feature: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Class index into [`FunctionalDataSet::class_names`].
    pub label: Option<usize>,
    pub observations: Vec<Observation>,
}

impl Subject {
    /// Number of distinct observation times across all features.
    pub fn distinct_times(&self) -> usize {
        let mut ts: Vec<f64> = self.observations.iter().map(|o| o.time).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts.len()
    }
}

/// Ragged per-subject observations for `p` features plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataSet {
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub time_domain: (f64, f64),
    pub subjects: Vec<Subject>,
}

impl FunctionalDataSet {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let p = self.n_features();
        let g = self.n_classes();
        let (a, b) = self.time_domain;
        for s in &self.subjects {
            if s.observations.is_empty() {
                return Err(MfldaError::Data(format!("subject {} has no observations", s.id)));
            }
            if let Some(k) = s.label {
                if k >= g {
                    return Err(MfldaError::Data(format!(
                        "subject {} has class index {k} but only {g} classes",
                        s.id
                    )));
                }
            }
            for o in &s.observations {
                if o.feature >= p {
                    return Err(MfldaError::Data(format!(
                        "subject {} references feature {} of {p}",
                        s.id, o.feature
                    )));
                }
                if !(o.time >= a && o.time <= b) {
                    return Err(MfldaError::Domain { time: o.time, start: a, end: b });
                }
                if !o.value.is_finite() {
                    return Err(MfldaError::Data(format!("subject {}: non-finite value", s.id)));
                }
            }
        }
        Ok(())
    }

    /// Labels of all subjects; fails if any subject is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.subjects
            .iter()
            .map(|s| {
                s.label
                    .ok_or_else(|| MfldaError::Data(format!("subject {} has no class label", s.id)))
            })
            .collect()
    }

    /// Reads the long format `subject_id,time,feature,value[,class]`.
    ///
    /// Features are indexed in first-seen order. Class names are sorted
    /// (numerically when every name parses as a number).
    pub fn from_long_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (Some(c_sub), Some(c_time), Some(c_feat), Some(c_val)) =
            (col("subject_id"), col("time"), col("feature"), col("value"))
        else {
            return Err(MfldaError::Data(
                "header must contain subject_id,time,feature,value".into(),
            ));
        };
        let c_class = col("class");

        let mut feature_index: HashMap<String, usize> = HashMap::new();
        let mut feature_names = Vec::new();
        let mut subject_index: HashMap<String, usize> = HashMap::new();
        let mut subjects: Vec<(String, Option<String>, Vec<Observation>)> = Vec::new();

        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |c: usize| rec.get(c).unwrap_or("").trim();
            let parse = |c: usize, what: &str| -> Result<f64> {
                field(c).parse::<f64>().map_err(|_| {
                    MfldaError::Data(format!("row {}: cannot parse {what} '{}'", line + 2, field(c)))
                })
            };
            let time = parse(c_time, "time")?;
            let value = parse(c_val, "value")?;
            let fname = field(c_feat).to_string();
            let feature = *feature_index.entry(fname.clone()).or_insert_with(|| {
                feature_names.push(fname);
                feature_names.len() - 1
            });
            let sid = field(c_sub).to_string();
            let si = *subject_index.entry(sid.clone()).or_insert_with(|| {
                subjects.push((sid.clone(), None, Vec::new()));
                subjects.len() - 1
            });
            if let Some(cc) = c_class {
                let cls = field(cc);
                if !cls.is_empty() {
                    match &subjects[si].1 {
                        None => subjects[si].1 = Some(cls.to_string()),
                        Some(prev) if prev != cls => {
                            return Err(MfldaError::Data(format!(
                                "subject {sid} changes class from {prev} to {cls}; labels must be constant per subject"
                            )))
                        }
                        _ => {}
                    }
                }
            }
            subjects[si].2.push(Observation { time, feature, value });
        }
        if subjects.is_empty() {
            return Err(MfldaError::Data("input has no observations".into()));
        }

        let mut class_names: Vec<String> = subjects.iter().filter_map(|s| s.1.clone()).collect();
        sort_class_names(&mut class_names);
        class_names.dedup();
        let class_of: HashMap<&str, usize> =
            class_names.iter().enumerate().map(|(k, c)| (c.as_str(), k)).collect();

        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for o in subjects.iter().flat_map(|s| s.2.iter()) {
            lo = lo.min(o.time);
            hi = hi.max(o.time);
        }
        let subjects = subjects
            .into_iter()
            .map(|(id, cls, observations)| Subject {
                label: cls.map(|c| class_of[c.as_str()]),
                id,
                observations,
            })
            .collect();
        let data = Self {
            feature_names,
            class_names,
            time_domain: (lo, hi),
            subjects,
        };
        data.validate()?;
        Ok(data)
    }

    /// Writes the long format read by [`FunctionalDataSet::from_long_csv`].
    pub fn write_long_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = crate::io::csv_writer(writer);
        w.write_record(["subject_id", "time", "feature", "value", "class"])?;
        for s in &self.subjects {
            let cls = s.label.map(|k| self.class_names[k].as_str()).unwrap_or("");
            for o in &s.observations {
                w.write_record([
                    s.id.as_str(),
                    &crate::io::fmt_f64(o.time),
                    self.feature_names[o.feature].as_str(),
                    &crate::io::fmt_f64(o.value),
                    cls,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Sidecar mapping `feature_index,feature`.
    pub fn write_feature_map<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = crate::io::csv_writer(writer);
        w.write_record(["feature_index", "feature"])?;
        for (j, name) in self.feature_names.iter().enumerate() {
            w.write_record([j.to_string().as_str(), name.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Keeps the listed subjects in order.
    pub fn select_subjects(&self, idx: &[usize]) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            class_names: self.class_names.clone(),
            time_domain: self.time_domain,
            subjects: idx.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }
}

pub fn sort_class_names(names: &mut [String]) {
    if names.iter().all(|c| c.parse::<f64>().is_ok()) {
        names.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    } else {
        names.sort();
    }
}

/// Clamped B-spline basis on a closed interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    degree: usize,
    interior_knots: Vec<f64>,
    domain: (f64, f64),
}

impl SplineBasis {
    pub fn new(degree: usize, interior_knots: Vec<f64>, domain: (f64, f64)) -> Result<Self> {
        let (a, b) = domain;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(MfldaError::Argument(format!("invalid time domain [{a}, {b}]")));
        }
        let mut prev = a;
        for &k in &interior_knots {
            if !(k > prev && k < b) {
                return Err(MfldaError::Argument(format!(
                    "interior knots must be strictly increasing inside ({a}, {b})"
                )));
            }
            prev = k;
        }
        let basis = Self {
            degree,
            interior_knots,
            domain,
        };
        if basis.n_basis() < 1 {
            return Err(MfldaError::Argument("basis must have at least one function".into()));
        }
        Ok(basis)
    }

    /// `n_interior` knots equally spaced over `domain`.
    pub fn uniform(degree: usize, n_interior: usize, domain: (f64, f64)) -> Result<Self> {
        let (a, b) = domain;
        let step = (b - a) / (n_interior + 1) as f64;
        let knots = (1..=n_interior).map(|k| a + step * k as f64).collect();
        Self::new(degree, knots, domain)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    /// `m = degree + 1 + #interior knots`.
    pub fn n_basis(&self) -> usize {
        self.degree + 1 + self.interior_knots.len()
    }

    fn knot_vector(&self) -> Vec<f64> {
        let (a, b) = self.domain;
        let mut u = vec![a; self.degree + 1];
        u.extend_from_slice(&self.interior_knots);
        u.extend(std::iter::repeat_n(b, self.degree + 1));
        u
    }

    /// Basis values at `times`, one row per time, `m` columns.
    pub fn evaluate(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let (a, b) = self.domain;
        let u = self.knot_vector();
        let m = self.n_basis();
        let d = self.degree;
        let mut out = DMatrix::zeros(times.len(), m);
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        let mut vals = vec![0.0; d + 1];
        for (r, &t) in times.iter().enumerate() {
            if !(t >= a && t <= b) {
                return Err(MfldaError::Domain { time: t, start: a, end: b });
            }
            // knot span: u[span] <= t < u[span + 1], closed on the right end
            let span = if t >= b {
                m - 1
            } else {
                let pos = u[d..=m].partition_point(|&k| k <= t);
                d + pos - 1
            };
            // Cox-de Boor, triangular scheme
            vals[0] = 1.0;
            for k in 1..=d {
                left[k] = t - u[span + 1 - k];
                right[k] = u[span + k] - t;
                let mut saved = 0.0;
                for s in 0..k {
                    let denom = right[s + 1] + left[k - s];
                    let tmp = if denom == 0.0 { 0.0 } else { vals[s] / denom };
                    vals[s] = saved + right[s + 1] * tmp;
                    saved = left[k - s] * tmp;
                }
                vals[k] = saved;
            }
            for s in 0..=d {
                out[(r, span - d + s)] = vals[s];
            }
        }
        Ok(out)
    }
}

/// Minimum-norm least-squares solver for one design matrix.
struct LeastSquares {
    pinv: DMatrix<f64>,
}

impl LeastSquares {
    fn new(design: DMatrix<f64>) -> Self {
        let (r, c) = design.shape();
        let svd = SVD::new(design, true, true);
        let smax = svd.singular_values.max();
        let eps = smax * 1e-12 * r.max(c) as f64;
        let pinv = svd
            .pseudo_inverse(eps)
            .unwrap_or_else(|_| DMatrix::zeros(c, r));
        Self { pinv }
    }

    fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.pinv * y
    }
}

/// Least-squares spline coefficients (`m × p`) for one subject.
///
/// Each feature is fitted on the times at which it was observed. A feature
/// with no observations gets zero coefficients.
pub fn fit_subject(basis: &SplineBasis, subject: &Subject, n_features: usize) -> Result<DMatrix<f64>> {
    let m = basis.n_basis();
    let found = subject.distinct_times();
    if found < m {
        return Err(MfldaError::InsufficientData {
            subject: subject.id.clone(),
            found,
            required: m,
        });
    }
    let mut per_feature: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_features];
    for o in &subject.observations {
        if o.feature >= n_features {
            return Err(MfldaError::Data(format!(
                "subject {}: feature index {} out of range",
                subject.id, o.feature
            )));
        }
        per_feature[o.feature].push((o.time, o.value));
    }
    let mut coef = DMatrix::zeros(m, n_features);
    // most inputs observe every feature at the same times; reuse the factorisation
    let mut cache: HashMap<Vec<u64>, LeastSquares> = HashMap::new();
    for (j, pts) in per_feature.iter_mut().enumerate() {
        if pts.is_empty() {
            warn!("subject {}: feature {j} has no observations", subject.id);
            continue;
        }
        pts.sort_by(|x, y| x.0.total_cmp(&y.0));
        let times: Vec<f64> = pts.iter().map(|x| x.0).collect();
        let key: Vec<u64> = times.iter().map(|t| t.to_bits()).collect();
        let ls = match cache.entry(key) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => e.insert(LeastSquares::new(basis.evaluate(&times)?)),
        };
        let y = DVector::from_iterator(pts.len(), pts.iter().map(|x| x.1));
        coef.set_column(j, &ls.solve(&y));
    }
    Ok(coef)
}

/// Why a subject was left out of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub subject: String,
    pub reason: String,
}

/// Shared basis, per-subject coefficients and the evaluation grid.
#[derive(Debug, Clone)]
pub struct SplineModel {
    pub basis: SplineBasis,
    pub subject_ids: Vec<String>,
    /// Indices of the retained subjects in the source dataset.
    pub source_index: Vec<usize>,
    pub coefficients: Vec<DMatrix<f64>>,
    pub grid: Vec<f64>,
    /// Basis values on the grid, `T × m` (`Φᵀ`).
    pub phi_grid: DMatrix<f64>,
}

impl SplineModel {
    pub fn n_subjects(&self) -> usize {
        self.coefficients.len()
    }

    pub fn n_features(&self) -> usize {
        self.coefficients.first().map_or(0, |c| c.ncols())
    }

    /// Smoothed curves on the grid as an `n × p × T` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.n_subjects();
        let p = self.n_features();
        let t = self.grid.len();
        let mut x = Tensor::zeros(n, p, t);
        for (i, c) in self.coefficients.iter().enumerate() {
            let w = &self.phi_grid * c; // T × p
            for h in 0..t {
                for j in 0..p {
                    x.set(i, j, h, w[(h, j)]);
                }
            }
        }
        x
    }

    /// Fitted curve of subject `i` at arbitrary times (`|times| × p`).
    pub fn evaluate_subject(&self, i: usize, times: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.basis.evaluate(times)? * &self.coefficients[i])
    }
}

/// Integer grid covering the domain: `ceil(start)..=floor(end)`.
pub fn integer_grid(domain: (f64, f64)) -> Vec<f64> {
    let lo = domain.0.ceil() as i64;
    let hi = domain.1.floor() as i64;
    (lo..=hi).map(|t| t as f64).collect()
}

/// Fits every subject that has at least `max(min_timepoints, m)` distinct
/// observation times and evaluates the fits on `grid`.
pub fn smooth_dataset(
    data: &FunctionalDataSet,
    basis: &SplineBasis,
    min_timepoints: usize,
    grid: &[f64],
) -> Result<(SplineModel, Vec<Exclusion>)> {
    let m = basis.n_basis();
    if min_timepoints <= m {
        warn!("min_timepoints {min_timepoints} does not exceed the basis size {m}");
    }
    let required = min_timepoints.max(m);
    let phi_grid = basis.evaluate(grid)?;
    let p = data.n_features();

    let fits: Vec<std::result::Result<DMatrix<f64>, String>> = data
        .subjects
        .par_iter()
        .map(|s| {
            let found = s.distinct_times();
            if found < required {
                return Err(format!("{found} distinct time points < {required}"));
            }
            fit_subject(basis, s, p).map_err(|e| e.to_string())
        })
        .collect();

    let mut model = SplineModel {
        basis: basis.clone(),
        subject_ids: Vec::new(),
        source_index: Vec::new(),
        coefficients: Vec::new(),
        grid: grid.to_vec(),
        phi_grid,
    };
    let mut excluded = Vec::new();
    for (i, fit) in fits.into_iter().enumerate() {
        match fit {
            Ok(c) => {
                model.subject_ids.push(data.subjects[i].id.clone());
                model.source_index.push(i);
                model.coefficients.push(c);
            }
            Err(reason) => excluded.push(Exclusion {
                subject: data.subjects[i].id.clone(),
                reason,
            }),
        }
    }
    if model.coefficients.is_empty() {
        return Err(MfldaError::EmptyModel { excluded: excluded.len() });
    }
    Ok((model, excluded))
}

/// Per-(feature, time) centring and scaling learned from training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub p: usize,
    pub t: usize,
    /// Indexed `t * p + j`.
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub zero_variance: Vec<bool>,
}

impl Standardization {
    /// Learns slice means and sample standard deviations (divisor `n - 1`).
    pub fn fit(x: &Tensor) -> Result<Self> {
        let n = x.n_subjects();
        if n < 2 {
            return Err(MfldaError::Argument("standardization needs at least 2 subjects".into()));
        }
        let d = x.row_len();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut ss = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in ss.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sd: Vec<f64> = ss.iter().map(|s| (s / (n - 1) as f64).sqrt()).collect();
        let zero_variance = sd
            .iter()
            .zip(&mean)
            .map(|(&s, &m)| s <= 1e-13 * m.abs().max(1.0))
            .collect();
        Ok(Self {
            p: x.n_features(),
            t: x.n_times(),
            mean,
            sd,
            zero_variance,
        })
    }

    /// Applies the learned transform; zero-variance slices are only centred.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.n_features() != self.p || x.n_times() != self.t {
            return Err(MfldaError::Argument(format!(
                "tensor is {}x{}, standardization was fitted on {}x{}",
                x.n_features(),
                x.n_times(),
                self.p,
                self.t
            )));
        }
        let mut out = x.clone();
        for i in 0..x.n_subjects() {
            for (k, v) in out.row_mut(i).iter_mut().enumerate() {
                *v -= self.mean[k];
                if !self.zero_variance[k] {
                    *v /= self.sd[k];
                }
            }
        }
        Ok(out)
    }

    pub fn n_zero_variance(&self) -> usize {
        self.zero_variance.iter().filter(|&&z| z).count()
    }
}

/// Centres and scales each (feature, time) slice across subjects.
pub fn standardize(x: &Tensor) -> Result<(Tensor, Standardization)> {
    let s = Standardization::fit(x)?;
    let z = s.apply(x)?;
    Ok((z, s))
}

/// Class sizes, in class-index order.
pub fn class_counts(labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for &k in labels {
        counts[k] += 1;
    }
    counts
}

/// Groups subject indices by label, preserving order.
pub fn indices_by_class(labels: &[usize], n_classes: usize) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = (0..n_classes).map(|k| (k, Vec::new())).collect();
    for (i, &k) in labels.iter().enumerate() {
        out.entry(k).or_default().push(i);
    }
    out
}
