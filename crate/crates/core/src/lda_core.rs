//! Non-sparse functional LDA.
//!
//! The generalized problem `S_b β = λ S_p β` is solved through the symmetric
//! matrix `M = S_p^{-1/2} S_b S_p^{-1/2}`. Eigenpairs `(λ̃_k, γ̃_k)` of `M` give
//! discriminants `β̂_k = S_p^{-1/2} γ̃_k`.
//!
//! When the number of subjects is below the operator dimension, both scatter
//! operators live in the span of the data rows. On the orthogonal complement
//! `S_p + εI` is just `εI` and `S_b` vanishes, so that span is invariant and
//! the eigenproblem can be solved exactly in it ([`solve_reduced`]).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{MfldaError, Result};
use crate::scatter::ScatterFactors;

/// Eigenvalues of `S_p + εI` below this fraction of the largest are dropped.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Symmetric inverse square root of `S_p + εI`, kept in eigen-form.
#[derive(Debug, Clone)]
pub struct Whitener {
    /// Retained eigenvectors, `d × r`.
    pub vectors: DMatrix<f64>,
    /// `1 / √(eigenvalue)` for each retained eigenvector.
    pub inv_sqrt: DVector<f64>,
}

impl Whitener {
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let c = self.vectors.tr_mul(v).component_mul(&self.inv_sqrt);
        &self.vectors * c
    }

    /// `W A W` for a symmetric `A`.
    pub fn sandwich(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.vectors.nrows(), self.vectors.ncols(), |i, j| {
            self.vectors[(i, j)] * self.inv_sqrt[j]
        });
        let w = &scaled * self.vectors.transpose();
        let out = &w * a * &w;
        (&out + out.transpose()) * 0.5
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.vectors.nrows(), self.vectors.ncols(), |i, j| {
            self.vectors[(i, j)] * self.inv_sqrt[j]
        });
        &scaled * self.vectors.transpose()
    }

    pub fn rank(&self) -> usize {
        self.inv_sqrt.len()
    }
}

/// Builds `(S_p + ridge·I)^{-1/2}`.
pub fn whiten(sp: &DMatrix<f64>, ridge: f64) -> Result<Whitener> {
    if sp.nrows() != sp.ncols() {
        return Err(MfldaError::Argument("within scatter must be square".into()));
    }
    if sp.amax() == 0.0 {
        return Err(MfldaError::DegenerateScatter("within-class scatter is identically zero".into()));
    }
    let d = sp.nrows();
    let mut reg = (sp + sp.transpose()) * 0.5;
    for i in 0..d {
        reg[(i, i)] += ridge;
    }
    let eig = SymmetricEigen::new(reg);
    let top = eig.eigenvalues.max();
    if !(top > 0.0) {
        return Err(MfldaError::DegenerateScatter("within-class scatter has no positive eigenvalue".into()));
    }
    let keep: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] > EIGEN_FLOOR * top).collect();
    let vectors = eig.eigenvectors.select_columns(&keep);
    let inv_sqrt = DVector::from_iterator(keep.len(), keep.iter().map(|&i| 1.0 / eig.eigenvalues[i].sqrt()));
    Ok(Whitener { vectors, inv_sqrt })
}

/// Leading eigenpairs of `M` and the corresponding discriminants.
#[derive(Debug, Clone)]
pub struct EigenSolution {
    /// `λ̃_1 ≥ λ̃_2 ≥ …`
    pub eigenvalues: Vec<f64>,
    /// Unit eigenvectors `γ̃_k` of `M` (whitened coordinates).
    pub gammas: Vec<DVector<f64>>,
    /// `M γ̃_k`, the right-hand side of the sparse program.
    pub targets: Vec<DVector<f64>>,
    /// `β̂_k = S_p^{-1/2} γ̃_k`.
    pub discriminants: Vec<DVector<f64>>,
}

impl EigenSolution {
    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    fn empty() -> Self {
        Self {
            eigenvalues: Vec::new(),
            gammas: Vec::new(),
            targets: Vec::new(),
            discriminants: Vec::new(),
        }
    }
}

fn check_components(n_classes: usize, n_components: usize) -> Result<()> {
    if n_components == 0 || n_components + 1 > n_classes {
        return Err(MfldaError::Argument(format!(
            "{n_components} components requested but at most {} available for {n_classes} classes",
            n_classes.saturating_sub(1)
        )));
    }
    Ok(())
}

/// Flips `v` so its first non-negligible coordinate is positive.
pub fn fix_sign(v: &mut DVector<f64>) {
    let tol = 1e-10 * v.amax();
    if let Some(x) = v.iter().find(|x| x.abs() > tol) {
        if *x < 0.0 {
            v.neg_mut();
        }
    }
}

/// Sorts eigenpairs by decreasing eigenvalue; near-ties fall back to
/// lexicographic order of the sign-fixed vectors.
fn ordered_pairs(values: &DVector<f64>, vectors: &DMatrix<f64>) -> Vec<(f64, DVector<f64>)> {
    let scale = values.amax().max(f64::MIN_POSITIVE);
    let mut pairs: Vec<(f64, DVector<f64>)> = (0..values.len())
        .map(|i| {
            let mut v = vectors.column(i).into_owned();
            fix_sign(&mut v);
            (values[i], v)
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let lex = |a: &(f64, DVector<f64>), b: &(f64, DVector<f64>)| {
        a.1.iter()
            .zip(b.1.iter())
            .map(|(x, y)| y.total_cmp(x))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    // runs of adjacent near-equal eigenvalues are ordered by their vectors
    let mut start = 0;
    for i in 1..=pairs.len() {
        if i == pairs.len() || (pairs[i - 1].0 - pairs[i].0).abs() > 1e-12 * scale {
            pairs[start..i].sort_by(lex);
            start = i;
        }
    }
    pairs
}

/// Dense solve of the whitened eigenproblem.
pub fn solve_nonsparse(
    sb: &DMatrix<f64>,
    sp: &DMatrix<f64>,
    ridge: f64,
    n_classes: usize,
    n_components: usize,
) -> Result<EigenSolution> {
    check_components(n_classes, n_components)?;
    if sb.shape() != sp.shape() {
        return Err(MfldaError::Argument("scatter operators differ in shape".into()));
    }
    let w = whiten(sp, ridge)?;
    let m = w.sandwich(sb);
    let eig = SymmetricEigen::new(m.clone());
    let mut out = EigenSolution::empty();
    for (lambda, gamma) in ordered_pairs(&eig.eigenvalues, &eig.eigenvectors)
        .into_iter()
        .take(n_components)
    {
        out.targets.push(&m * &gamma);
        out.discriminants.push(w.apply(&gamma));
        out.eigenvalues.push(lambda.max(0.0));
        out.gammas.push(gamma);
    }
    Ok(out)
}

/// Exact solve in the span of the data rows, for `n` well below `d`.
///
/// The subspace basis comes from a thin QR of the stacked factor rows; all
/// work happens in at most `n + G` dimensions and the eigenvectors are mapped
/// back to the full `d`-dimensional space.
pub fn solve_reduced(
    factors: &ScatterFactors,
    ridge: f64,
    n_classes: usize,
    n_components: usize,
) -> Result<EigenSolution> {
    check_components(n_classes, n_components)?;
    let d = factors.dim();
    let rows = factors.within.nrows() + factors.between.nrows();
    if rows >= d {
        return solve_nonsparse(
            &factors.between_dense(),
            &factors.within_dense(),
            ridge,
            n_classes,
            n_components,
        );
    }
    if factors.within.amax() == 0.0 {
        return Err(MfldaError::DegenerateScatter("within-class scatter is identically zero".into()));
    }
    let mut stacked = DMatrix::zeros(d, rows);
    stacked
        .columns_mut(0, factors.within.nrows())
        .copy_from(&factors.within.transpose());
    stacked
        .columns_mut(factors.within.nrows(), factors.between.nrows())
        .copy_from(&factors.between.transpose());
    let q = stacked.qr().q(); // d × rows, orthonormal columns
    let wq = &factors.within * &q;
    let bq = &factors.between * &q;
    let sp_r = wq.tr_mul(&wq);
    let sb_r = bq.tr_mul(&bq);

    let w = whiten(&sp_r, ridge)?;
    let m = w.sandwich(&sb_r);
    let eig = SymmetricEigen::new(m.clone());
    // lift before ordering so the sign convention applies to full coordinates
    let lifted = &q * &eig.eigenvectors;
    let mut out = EigenSolution::empty();
    for (lambda, gamma) in ordered_pairs(&eig.eigenvalues, &lifted).into_iter().take(n_components) {
        let gamma_r = q.tr_mul(&gamma);
        out.targets.push(&q * (&m * &gamma_r));
        out.discriminants.push(&q * w.apply(&gamma_r));
        out.eigenvalues.push(lambda.max(0.0));
        out.gammas.push(gamma);
    }
    Ok(out)
}

/// Picks the reduced solver when the data span is smaller than the space.
pub fn solve_factors(
    factors: &ScatterFactors,
    ridge: f64,
    n_classes: usize,
    n_components: usize,
) -> Result<EigenSolution> {
    solve_reduced(factors, ridge, n_classes, n_components)
}

/// Projects the rows of `x` onto the orthogonal complement of `prior`.
pub fn deflate(x: &DMatrix<f64>, prior: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if prior.is_empty() {
        return Ok(x.clone());
    }
    let d = x.ncols();
    for (k, b) in prior.iter().enumerate() {
        if b.len() != d {
            return Err(MfldaError::Argument(format!(
                "discriminant {k} has length {}, data has {d} columns",
                b.len()
            )));
        }
        if b.amax() == 0.0 {
            return Err(MfldaError::Argument(format!("discriminant {k} is zero")));
        }
    }
    let b = DMatrix::from_columns(prior);
    let gram = b.tr_mul(&b);
    let gram_inv = gram
        .clone()
        .pseudo_inverse(1e-12 * gram.amax())
        .map_err(|e| MfldaError::Argument(e.to_string()))?;
    let coef = (x * &b) * gram_inv;
    Ok(x - coef * b.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitener_of_identity_is_identity() {
        let w = whiten(&DMatrix::identity(3, 3), 0.0).unwrap();
        assert!((w.matrix() - DMatrix::<f64>::identity(3, 3)).amax() <= 1e-14);
    }

    #[test]
    fn whitener_of_diagonal() {
        let sp = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let w = whiten(&sp, 0.0).unwrap().matrix();
        assert!((w[(0, 0)] - 0.5).abs() <= 1e-14);
        assert!((w[(1, 1)] - 1.0).abs() <= 1e-14);
        assert!(w[(0, 1)].abs() <= 1e-14);
    }

    #[test]
    fn zero_within_scatter_is_degenerate() {
        assert!(matches!(
            whiten(&DMatrix::zeros(2, 2), 1e-3),
            Err(MfldaError::DegenerateScatter(_))
        ));
    }

    #[test]
    fn zero_between_gives_zero_eigenvalue() {
        let s = solve_nonsparse(&DMatrix::zeros(3, 3), &DMatrix::identity(3, 3), 0.0, 2, 1).unwrap();
        assert_eq!(s.eigenvalues[0], 0.0);
    }

    #[test]
    fn identity_pair_has_unit_eigenvalue() {
        let i = DMatrix::<f64>::identity(3, 3);
        let s = solve_nonsparse(&i, &i, 0.0, 2, 1).unwrap();
        assert!((s.eigenvalues[0] - 1.0).abs() <= 1e-12);
        let beta = &s.discriminants[0];
        let resid = &i * beta - &i * beta * s.eigenvalues[0];
        assert!(resid.amax() <= 1e-10);
    }

    #[test]
    fn too_many_components() {
        let i = DMatrix::<f64>::identity(2, 2);
        assert!(matches!(solve_nonsparse(&i, &i, 0.0, 2, 2), Err(MfldaError::Argument(_))));
    }

    #[test]
    fn deflate_removes_direction_and_is_idempotent() {
        let x = DMatrix::from_fn(4, 3, |i, j| (i + 2 * j) as f64 + 0.3 * (i * j) as f64);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let y = deflate(&x, std::slice::from_ref(&b)).unwrap();
        assert!((&y * &b).amax() <= 1e-12);
        let z = deflate(&y, std::slice::from_ref(&b)).unwrap();
        assert!((&z - &y).amax() <= 1e-12);
        assert_eq!(deflate(&x, &[]).unwrap(), x);
        assert!(deflate(&x, &[DVector::zeros(3)]).is_err());
    }
}
