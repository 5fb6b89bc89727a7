//! Dense subject × feature × time tensor.
//!
//! Each subject owns one contiguous row of length `p * T`, laid out time-major:
//! the value of feature `j` at grid index `t` sits at `t * p + j`. With this
//! layout the per-time `p`-blocks are contiguous, which is what the
//! time-independent solvers slice out, and the full row is the `pT` vector
//! used by the time-dependent solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{MfldaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    p: usize,
    t: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, p: usize, t: usize) -> Self {
        Self {
            n,
            p,
            t,
            data: vec![0.0; n * p * t],
        }
    }

    pub fn from_vec(n: usize, p: usize, t: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * p * t {
            return Err(MfldaError::Argument(format!(
                "tensor buffer has {} values, expected {}x{}x{}",
                data.len(),
                n,
                p,
                t
            )));
        }
        Ok(Self { n, p, t, data })
    }

    /// Builds a tensor from a closure `f(subject, feature, time)`.
    pub fn from_fn(n: usize, p: usize, t: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(n, p, t);
        for i in 0..n {
            for h in 0..t {
                for j in 0..p {
                    out.data[(i * t + h) * p + j] = f(i, j, h);
                }
            }
        }
        out
    }

    pub fn n_subjects(&self) -> usize {
        self.n
    }

    pub fn n_features(&self) -> usize {
        self.p
    }

    pub fn n_times(&self) -> usize {
        self.t
    }

    /// Length of a flattened subject row, `p * T`.
    pub fn row_len(&self) -> usize {
        self.p * self.t
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, h: usize) -> f64 {
        self.data[(i * self.t + h) * self.p + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, h: usize, v: f64) {
        self.data[(i * self.t + h) * self.p + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.row_len();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.row_len();
        &mut self.data[i * d..(i + 1) * d]
    }

    /// The `p` values of subject `i` at grid index `h`.
    pub fn block(&self, i: usize, h: usize) -> &[f64] {
        let start = (i * self.t + h) * self.p;
        &self.data[start..start + self.p]
    }

    pub fn block_mut(&mut self, i: usize, h: usize) -> &mut [f64] {
        let start = (i * self.t + h) * self.p;
        &mut self.data[start..start + self.p]
    }

    /// Subjects as rows of an `n × pT` matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.row_len(), &self.data)
    }

    /// Subjects as rows of an `n × p` matrix at grid index `h`.
    pub fn time_slice(&self, h: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.p, |i, j| self.get(i, j, h))
    }

    pub fn from_matrix(m: &DMatrix<f64>, p: usize, t: usize) -> Result<Self> {
        if m.ncols() != p * t {
            return Err(MfldaError::Argument(format!(
                "matrix has {} columns, expected p*T = {}",
                m.ncols(),
                p * t
            )));
        }
        let n = m.nrows();
        let mut data = Vec::with_capacity(n * p * t);
        for i in 0..n {
            data.extend(m.row(i).iter().copied());
        }
        Ok(Self { n, p, t, data })
    }

    /// Keeps the listed subjects, in the given order.
    pub fn select_subjects(&self, idx: &[usize]) -> Self {
        let d = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n: idx.len(),
            p: self.p,
            t: self.t,
            data,
        }
    }

    /// Keeps the listed features, in the given order.
    pub fn select_features(&self, idx: &[usize]) -> Self {
        Self::from_fn(self.n, idx.len(), self.t, |i, j, h| self.get(i, idx[j], h))
    }
}

/// Reshapes a time-major `pT` vector into a `p × T` matrix.
pub fn vec_to_feature_time(v: &DVector<f64>, p: usize, t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, t, |j, h| v[h * p + j])
}

/// Inverse of [`vec_to_feature_time`].
pub fn feature_time_to_vec(m: &DMatrix<f64>) -> DVector<f64> {
    let (p, t) = m.shape();
    DVector::from_fn(p * t, |k, _| m[(k % p, k / p)])
}
