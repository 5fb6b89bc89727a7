//! Between-class and pooled within-class scatter operators.
//!
//! Operators act on time-major `pT` vectors (see [`crate::tensor`]). In
//! time-dependent mode they are dense `pT × pT` matrices coupling every pair of
//! grid points; in time-independent mode only the `T` diagonal `p × p` blocks
//! are kept.
//!
//! Both operators are Gram matrices of small factor matrices:
//! `S_b = BᵀB` with one row `√n_k (μ_k − μ)` per class, and `S_p = WᵀW` with
//! one row `(x_i − μ_k) / √Σ(n_k − 1)` per subject. [`ScatterFactors`] keeps
//! those rows so the reduced solver never has to form a `pT × pT` matrix.

use std::io::{Read, Write};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MfldaError, Result};
use crate::fd_model::SplineModel;
use crate::tensor::Tensor;

/// Default cap on `pT` for dense time-dependent operators.
pub const DENSE_CAP_DEFAULT: usize = 20_000;

/// Relative ridge: `ε = RIDGE_SCALE · trace(S_p) / (pT)`.
pub const RIDGE_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TimeDependent,
    TimeIndependent,
}

impl std::str::FromStr for Mode {
    type Err = MfldaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time_dependent" | "dependent" | "D" => Ok(Mode::TimeDependent),
            "time_independent" | "independent" | "I" => Ok(Mode::TimeIndependent),
            _ => Err(MfldaError::Argument(format!("unknown mode '{s}'"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::TimeDependent => "time_dependent",
            Mode::TimeIndependent => "time_independent",
        })
    }
}

/// How much to add to the diagonal of `S_p` before whitening.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Ridge {
    /// `RIDGE_SCALE · trace(S_p) / dim`.
    Auto,
    Fixed(f64),
}

impl Ridge {
    pub fn resolve(self, within_trace: f64, dim: usize) -> f64 {
        match self {
            Ridge::Auto => RIDGE_SCALE * within_trace / dim.max(1) as f64,
            Ridge::Fixed(v) => v,
        }
    }
}

/// Per-class and overall mean spline coefficients.
#[derive(Debug, Clone)]
pub struct ClassMeans {
    pub class_sizes: Vec<usize>,
    /// `m × p` mean coefficient matrix per class.
    pub class_means: Vec<DMatrix<f64>>,
    pub overall: DMatrix<f64>,
}

pub fn class_means(model: &SplineModel, labels: &[usize], n_classes: usize) -> Result<ClassMeans> {
    if labels.len() != model.n_subjects() {
        return Err(MfldaError::Argument(format!(
            "{} labels for {} subjects",
            labels.len(),
            model.n_subjects()
        )));
    }
    let m = model.basis.n_basis();
    let p = model.n_features();
    let mut sums = vec![DMatrix::zeros(m, p); n_classes];
    let mut sizes = vec![0usize; n_classes];
    for (c, &k) in model.coefficients.iter().zip(labels) {
        if k >= n_classes {
            return Err(MfldaError::Argument(format!("label {k} >= {n_classes} classes")));
        }
        sums[k] += c;
        sizes[k] += 1;
    }
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(MfldaError::DegenerateClass { class: k });
    }
    let n: usize = sizes.iter().sum();
    let mut overall = DMatrix::zeros(m, p);
    for c in &model.coefficients {
        overall += c;
    }
    overall /= n as f64;
    let class_means = sums
        .into_iter()
        .zip(&sizes)
        .map(|(s, &nk)| s / nk as f64)
        .collect();
    Ok(ClassMeans {
        class_sizes: sizes,
        class_means,
        overall,
    })
}

/// Either a dense `pT × pT` matrix or `T` diagonal `p × p` blocks.
#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Dense(DMatrix<f64>),
    Blocks(Vec<DMatrix<f64>>),
}

impl Operator {
    pub fn dim(&self) -> usize {
        match self {
            Operator::Dense(m) => m.nrows(),
            Operator::Blocks(b) => b.iter().map(|m| m.nrows()).sum(),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            Operator::Dense(m) => m.trace(),
            Operator::Blocks(b) => b.iter().map(|m| m.trace()).sum(),
        }
    }

    /// Diagonal block for grid index `h` (block size `p`).
    pub fn block(&self, h: usize, p: usize) -> DMatrix<f64> {
        match self {
            Operator::Dense(m) => m.view((h * p, h * p), (p, p)).into_owned(),
            Operator::Blocks(b) => b[h].clone(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Operator::Dense(m) => m.clone(),
            Operator::Blocks(b) => {
                let p = b.first().map_or(0, |m| m.nrows());
                let d = p * b.len();
                let mut out = DMatrix::zeros(d, d);
                for (h, blk) in b.iter().enumerate() {
                    out.view_mut((h * p, h * p), (p, p)).copy_from(blk);
                }
                out
            }
        }
    }

    /// Largest absolute asymmetry `max |S − Sᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        let one = |m: &DMatrix<f64>| (m - m.transpose()).amax();
        match self {
            Operator::Dense(m) => one(m),
            Operator::Blocks(b) => b.iter().map(one).fold(0.0, f64::max),
        }
    }
}

/// Between-class and pooled within-class operators plus the ridge to add to
/// the latter before whitening.
#[derive(Debug, Clone)]
pub struct ScatterPair {
    pub between: Operator,
    pub within: Operator,
    pub mode: Mode,
    pub ridge: f64,
    pub p: usize,
    pub t: usize,
}

/// Gram factors of the scatter operators: `S_b = BᵀB`, `S_p = WᵀW`.
#[derive(Debug, Clone)]
pub struct ScatterFactors {
    /// `G × d`, row `k` is `√n_k (μ_k − μ)`.
    pub between: DMatrix<f64>,
    /// `n × d`, row `i` is `(x_i − μ_{k(i)}) / √Σ(n_k − 1)`.
    pub within: DMatrix<f64>,
    pub class_sizes: Vec<usize>,
}

impl ScatterFactors {
    /// Factors from rows of an `n × d` data matrix.
    pub fn from_rows(x: &DMatrix<f64>, labels: &[usize], n_classes: usize) -> Result<Self> {
        let (n, d) = x.shape();
        if labels.len() != n {
            return Err(MfldaError::Argument(format!("{} labels for {n} subjects", labels.len())));
        }
        let mut sizes = vec![0usize; n_classes];
        let mut means = DMatrix::<f64>::zeros(n_classes, d);
        for (i, &k) in labels.iter().enumerate() {
            if k >= n_classes {
                return Err(MfldaError::Argument(format!("label {k} >= {n_classes} classes")));
            }
            sizes[k] += 1;
            let mut row = means.row_mut(k);
            row += x.row(i);
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(MfldaError::DegenerateClass { class: k });
        }
        for k in 0..n_classes {
            let mut row = means.row_mut(k);
            row /= sizes[k] as f64;
        }
        let dof: usize = sizes.iter().map(|&s| s - 1).sum();
        if dof == 0 {
            return Err(MfldaError::NonEstimable("every class has a single subject".into()));
        }
        for (k, &s) in sizes.iter().enumerate() {
            if s == 1 {
                warn!("class {k} has a single subject and does not contribute to the pooled scatter");
            }
        }
        let overall = x.row_mean();
        let mut between = DMatrix::zeros(n_classes, d);
        for k in 0..n_classes {
            let dev = means.row(k) - &overall;
            between.set_row(k, &(dev * (sizes[k] as f64).sqrt()));
        }
        let scale = 1.0 / (dof as f64).sqrt();
        let mut within = DMatrix::zeros(n, d);
        for (i, &k) in labels.iter().enumerate() {
            within.set_row(i, &((x.row(i) - means.row(k)) * scale));
        }
        Ok(Self {
            between,
            within,
            class_sizes: sizes,
        })
    }

    pub fn from_tensor(x: &Tensor, labels: &[usize], n_classes: usize) -> Result<Self> {
        Self::from_rows(&x.to_matrix(), labels, n_classes)
    }

    /// Factors from spline coefficients: curves are evaluated on the grid
    /// through `phi_grid` (`T × m`) before forming deviations.
    pub fn from_coefficients(
        model: &SplineModel,
        labels: &[usize],
        means: &ClassMeans,
        phi_grid: &DMatrix<f64>,
    ) -> Result<Self> {
        let p = model.n_features();
        let t = phi_grid.nrows();
        let d = p * t;
        let g = means.class_sizes.len();
        if phi_grid.ncols() != means.overall.nrows() {
            return Err(MfldaError::Argument("phi_grid does not match the basis".into()));
        }
        let flatten = |m: &DMatrix<f64>| {
            // m is T × p; time-major flattening
            DVector::from_fn(d, |k, _| m[(k / p, k % p)])
        };
        let mut between = DMatrix::zeros(g, d);
        for k in 0..g {
            let dev = phi_grid * (&means.class_means[k] - &means.overall);
            let v = flatten(&dev) * (means.class_sizes[k] as f64).sqrt();
            between.set_row(k, &v.transpose());
        }
        let dof: usize = means.class_sizes.iter().map(|&s| s.saturating_sub(1)).sum();
        if dof == 0 {
            return Err(MfldaError::NonEstimable("every class has a single subject".into()));
        }
        let scale = 1.0 / (dof as f64).sqrt();
        let mut within = DMatrix::zeros(model.n_subjects(), d);
        for (i, (c, &k)) in model.coefficients.iter().zip(labels).enumerate() {
            let dev = phi_grid * (c - &means.class_means[k]);
            within.set_row(i, &(flatten(&dev) * scale).transpose());
        }
        Ok(Self {
            between,
            within,
            class_sizes: means.class_sizes.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.within.ncols()
    }

    /// `trace(S_p) = ‖W‖²_F`.
    pub fn within_trace(&self) -> f64 {
        self.within.norm_squared()
    }

    /// Columns `h·p .. (h+1)·p`: the factors of the time-`h` diagonal blocks.
    pub fn time_block(&self, h: usize, p: usize) -> Self {
        Self {
            between: self.between.columns(h * p, p).into_owned(),
            within: self.within.columns(h * p, p).into_owned(),
            class_sizes: self.class_sizes.clone(),
        }
    }

    /// Keeps only the listed coordinates.
    pub fn restrict(&self, coords: &[usize]) -> Self {
        Self {
            between: self.between.select_columns(coords),
            within: self.within.select_columns(coords),
            class_sizes: self.class_sizes.clone(),
        }
    }

    pub fn between_dense(&self) -> DMatrix<f64> {
        self.between.tr_mul(&self.between)
    }

    pub fn within_dense(&self) -> DMatrix<f64> {
        self.within.tr_mul(&self.within)
    }

    /// Assembles the operators for `mode`. Dense time-dependent operators are
    /// refused above `cap`.
    pub fn to_pair(&self, p: usize, t: usize, mode: Mode, ridge: Ridge, cap: usize) -> Result<ScatterPair> {
        let d = self.dim();
        if d != p * t {
            return Err(MfldaError::Argument(format!("factor dimension {d} != p*T = {}", p * t)));
        }
        let (between, within) = match mode {
            Mode::TimeDependent => {
                if d > cap {
                    return Err(MfldaError::TooLarge { dim: d, cap });
                }
                (Operator::Dense(self.between_dense()), Operator::Dense(self.within_dense()))
            }
            Mode::TimeIndependent => {
                let mut bb = Vec::with_capacity(t);
                let mut ww = Vec::with_capacity(t);
                for h in 0..t {
                    let f = self.time_block(h, p);
                    bb.push(f.between_dense());
                    ww.push(f.within_dense());
                }
                (Operator::Blocks(bb), Operator::Blocks(ww))
            }
        };
        let ridge = ridge.resolve(within.trace(), d);
        Ok(ScatterPair {
            between,
            within,
            mode,
            ridge,
            p,
            t,
        })
    }
}

/// `S_b = Σ_k n_k A_k` from class-mean coefficients.
pub fn between_scatter(means: &ClassMeans, phi_grid: &DMatrix<f64>, mode: Mode) -> Result<Operator> {
    let p = means.overall.ncols();
    let t = phi_grid.nrows();
    let g = means.class_sizes.len();
    let devs: Vec<DMatrix<f64>> = (0..g)
        .map(|k| phi_grid * (&means.class_means[k] - &means.overall))
        .collect();
    let block = |h: usize, s: usize| {
        let mut out = DMatrix::zeros(p, p);
        for (k, dev) in devs.iter().enumerate() {
            let a = dev.row(h).transpose();
            let b = dev.row(s);
            out += (a * b) * means.class_sizes[k] as f64;
        }
        out
    };
    Ok(assemble(p, t, mode, block))
}

/// Pooled within-class scatter from subject coefficients.
pub fn within_scatter(
    model: &SplineModel,
    labels: &[usize],
    means: &ClassMeans,
    phi_grid: &DMatrix<f64>,
    mode: Mode,
) -> Result<Operator> {
    let p = model.n_features();
    let t = phi_grid.nrows();
    let dof: usize = means.class_sizes.iter().map(|&s| s.saturating_sub(1)).sum();
    if dof == 0 {
        return Err(MfldaError::NonEstimable("every class has a single subject".into()));
    }
    for (k, &s) in means.class_sizes.iter().enumerate() {
        if s == 1 {
            warn!("class {k} has a single subject and does not contribute to the pooled scatter");
        }
    }
    let devs: Vec<DMatrix<f64>> = model
        .coefficients
        .iter()
        .zip(labels)
        .map(|(c, &k)| phi_grid * (c - &means.class_means[k]))
        .collect();
    let block = |h: usize, s: usize| {
        let mut out = DMatrix::zeros(p, p);
        for dev in &devs {
            out += dev.row(h).transpose() * dev.row(s);
        }
        out / dof as f64
    };
    Ok(assemble(p, t, mode, block))
}

/// Convenience wrapper building both operators from a spline model.
pub fn scatter_pair(
    model: &SplineModel,
    labels: &[usize],
    n_classes: usize,
    mode: Mode,
    ridge: Ridge,
    cap: usize,
) -> Result<ScatterPair> {
    let p = model.n_features();
    let t = model.grid.len();
    if mode == Mode::TimeDependent && p * t > cap {
        return Err(MfldaError::TooLarge { dim: p * t, cap });
    }
    let means = class_means(model, labels, n_classes)?;
    let between = between_scatter(&means, &model.phi_grid, mode)?;
    let within = within_scatter(model, labels, &means, &model.phi_grid, mode)?;
    let ridge = ridge.resolve(within.trace(), p * t);
    Ok(ScatterPair {
        between,
        within,
        mode,
        ridge,
        p,
        t,
    })
}

fn assemble(p: usize, t: usize, mode: Mode, block: impl Fn(usize, usize) -> DMatrix<f64>) -> Operator {
    match mode {
        Mode::TimeIndependent => Operator::Blocks((0..t).map(|h| block(h, h)).collect()),
        Mode::TimeDependent => {
            let mut out = DMatrix::zeros(p * t, p * t);
            for h in 0..t {
                for s in 0..t {
                    out.view_mut((h * p, s * p), (p, p)).copy_from(&block(h, s));
                }
            }
            Operator::Dense(out)
        }
    }
}

const DUMP_MAGIC: &[u8; 4] = b"MFSC";

/// Writes an operator as a 16-byte header (magic, `p`, `T`, mode flag; all
/// little-endian `u32` after the magic) followed by row-major `f64` values:
/// the full matrix in time-dependent mode, or the `T` diagonal blocks one
/// after another in time-independent mode.
pub fn write_dump<W: Write>(mut w: W, op: &Operator, p: usize, t: usize) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&(p as u32).to_le_bytes())?;
    w.write_all(&(t as u32).to_le_bytes())?;
    let flag: u32 = match op {
        Operator::Dense(_) => 0,
        Operator::Blocks(_) => 1,
    };
    w.write_all(&flag.to_le_bytes())?;
    let mut put = |m: &DMatrix<f64>| -> Result<()> {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                w.write_all(&m[(r, c)].to_le_bytes())?;
            }
        }
        Ok(())
    };
    match op {
        Operator::Dense(m) => put(m)?,
        Operator::Blocks(b) => {
            for m in b {
                put(m)?;
            }
        }
    }
    Ok(())
}

/// Reads a dump written by [`write_dump`]; returns the operator with `p` and `T`.
pub fn read_dump<R: Read>(mut r: R) -> Result<(Operator, usize, usize)> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != DUMP_MAGIC {
        return Err(MfldaError::Data("not a scatter dump".into()));
    }
    let word = |k: usize| u32::from_le_bytes(header[k..k + 4].try_into().unwrap()) as usize;
    let (p, t, flag) = (word(4), word(8), word(12));
    let mut read_matrix = |rows: usize| -> Result<DMatrix<f64>> {
        let mut buf = vec![0u8; rows * rows * 8];
        r.read_exact(&mut buf)?;
        let vals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(DMatrix::from_row_slice(rows, rows, &vals))
    };
    let op = match flag {
        0 => Operator::Dense(read_matrix(p * t)?),
        1 => Operator::Blocks((0..t).map(|_| read_matrix(p)).collect::<Result<_>>()?),
        _ => return Err(MfldaError::Data(format!("unknown mode flag {flag}"))),
    };
    Ok((op, p, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd_model::SplineBasis;

    fn scalar_model(values: &[f64]) -> SplineModel {
        let basis = SplineBasis::new(0, vec![], (0.0, 1.0)).unwrap();
        SplineModel {
            phi_grid: basis.evaluate(&[0.5]).unwrap(),
            basis,
            subject_ids: (0..values.len()).map(|i| i.to_string()).collect(),
            source_index: (0..values.len()).collect(),
            coefficients: values.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect(),
            grid: vec![0.5],
        }
    }

    #[test]
    fn between_hand_example() {
        let model = scalar_model(&[0.0, 2.0]);
        let means = class_means(&model, &[0, 1], 2).unwrap();
        assert_eq!(means.overall[(0, 0)], 1.0);
        let sb = between_scatter(&means, &model.phi_grid, Mode::TimeDependent).unwrap();
        assert_eq!(sb.to_dense()[(0, 0)], 2.0);
    }

    #[test]
    fn within_hand_example() {
        let model = scalar_model(&[0.0, 2.0]);
        let means = class_means(&model, &[0, 0], 1).unwrap();
        let sp = within_scatter(&model, &[0, 0], &means, &model.phi_grid, Mode::TimeDependent).unwrap();
        assert_eq!(sp.to_dense()[(0, 0)], 2.0);
        let sb = between_scatter(&means, &model.phi_grid, Mode::TimeDependent).unwrap();
        assert_eq!(sb.to_dense()[(0, 0)], 0.0);
    }

    #[test]
    fn mean_of_three() {
        let model = scalar_model(&[1.0, 2.0, 6.0]);
        let means = class_means(&model, &[0, 0, 0], 1).unwrap();
        assert_eq!(means.class_means[0][(0, 0)], 3.0);
    }

    #[test]
    fn empty_class_is_an_error() {
        let model = scalar_model(&[1.0, 2.0]);
        assert!(matches!(
            class_means(&model, &[0, 0], 2),
            Err(MfldaError::DegenerateClass { class: 1 })
        ));
    }

    #[test]
    fn all_singletons_are_not_estimable() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(matches!(
            ScatterFactors::from_rows(&x, &[0, 1], 2),
            Err(MfldaError::NonEstimable(_))
        ));
    }

    #[test]
    fn dense_cap_is_enforced() {
        let x = DMatrix::from_fn(4, 6, |i, j| (i * j) as f64);
        let f = ScatterFactors::from_rows(&x, &[0, 0, 1, 1], 2).unwrap();
        assert!(matches!(
            f.to_pair(3, 2, Mode::TimeDependent, Ridge::Auto, 5),
            Err(MfldaError::TooLarge { dim: 6, cap: 5 })
        ));
        assert!(f.to_pair(3, 2, Mode::TimeIndependent, Ridge::Auto, 5).is_ok());
    }

    #[test]
    fn dump_roundtrip() {
        let x = DMatrix::from_fn(5, 6, |i, j| ((i * 3 + j * 7) % 5) as f64);
        let f = ScatterFactors::from_rows(&x, &[0, 0, 1, 1, 1], 2).unwrap();
        for mode in [Mode::TimeDependent, Mode::TimeIndependent] {
            let pair = f.to_pair(3, 2, mode, Ridge::Auto, DENSE_CAP_DEFAULT).unwrap();
            let mut buf = Vec::new();
            write_dump(&mut buf, &pair.within, 3, 2).unwrap();
            let expected_len = 16 + 8 * if mode == Mode::TimeDependent { 36 } else { 18 };
            assert_eq!(buf.len(), expected_len);
            let (op, p, t) = read_dump(buf.as_slice()).unwrap();
            assert_eq!((p, t), (3, 2));
            assert_eq!(op, pair.within);
        }
    }
}
