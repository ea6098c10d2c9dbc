//! Symmetric band matrices and their Cholesky factors.
//!
//! Storage is the lower band, row-major: entry `(i, i - k)` for `k = 0..=bandwidth`
//! lives at `i * (bandwidth + 1) + k`. Entries outside the band are structurally zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{DglmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SymBand {
    dim: usize,
    bandwidth: usize,
    data: Vec<f64>,
}

impl SymBand {
    pub fn zeros(dim: usize, bandwidth: usize) -> Self {
        Self {
            dim,
            bandwidth,
            data: vec![0.0; dim * (bandwidth + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let k = hi - lo;
        (k <= self.bandwidth && hi < self.dim).then(|| hi * (self.bandwidth + 1) + k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Adds `value` to entry `(i, j)` (and, by symmetry, `(j, i)`).
    ///
    /// Panics if the entry lies outside the band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let s = self
            .slot(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside bandwidth {}", self.bandwidth));
        self.data[s] += value;
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    /// Principal sub-matrix on rows/columns `start..end`, keeping the band structure.
    pub fn sub_block(&self, start: usize, end: usize) -> SymBand {
        let dim = end - start;
        let mut out = SymBand::zeros(dim, self.bandwidth);
        for i in 0..dim {
            for k in 0..=self.bandwidth.min(i) {
                out.data[i * (self.bandwidth + 1) + k] = self.get(start + i, start + i - k);
            }
        }
        out
    }

    /// `x^T A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        let w = self.bandwidth;
        let mut total = 0.0;
        for i in 0..self.dim {
            let row = &self.data[i * (w + 1)..(i + 1) * (w + 1)];
            total += row[0] * x[i] * x[i];
            for k in 1..=w.min(i) {
                total += 2.0 * row[k] * x[i] * x[i - k];
            }
        }
        total
    }

    /// `A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        let w = self.bandwidth;
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            let row = &self.data[i * (w + 1)..(i + 1) * (w + 1)];
            out[i] += row[0] * x[i];
            for k in 1..=w.min(i) {
                out[i] += row[k] * x[i - k];
                out[i - k] += row[k] * x[i];
            }
        }
        out
    }

    pub fn cholesky(&self) -> Result<BandCholesky> {
        let n = self.dim;
        let w = self.bandwidth;
        let stride = w + 1;
        let mut l = vec![0.0; n * stride];
        for i in 0..n {
            let j0 = i.saturating_sub(w);
            for j in j0..=i {
                // L[i][j] = (A[i][j] - sum_{m<j} L[i][m] L[j][m]) / L[j][j]
                let mut sum = self.data[i * stride + (i - j)];
                let m0 = j0.max(j.saturating_sub(w));
                for m in m0..j {
                    sum -= l[i * stride + (i - m)] * l[j * stride + (j - m)];
                }
                if i == j {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return Err(DglmError::NotPositiveDefinite(format!(
                            "band Cholesky pivot {i} = {sum:e}"
                        )));
                    }
                    l[i * stride] = sum.sqrt();
                } else {
                    l[i * stride + (i - j)] = sum / l[j * stride];
                }
            }
        }
        Ok(BandCholesky {
            dim: n,
            bandwidth: w,
            l,
        })
    }
}

/// Lower-triangular band factor `L` with `A = L L^T`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    dim: usize,
    bandwidth: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.l[i * (self.bandwidth + 1) + (i - j)]
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        for i in 0..self.dim {
            let mut s = b[i];
            for j in i.saturating_sub(self.bandwidth)..i {
                s -= self.at(i, j) * b[j];
            }
            b[i] = s / self.at(i, i);
        }
    }

    /// Solves `L^T x = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        for i in (0..self.dim).rev() {
            let mut s = b[i];
            for j in (i + 1)..(i + 1 + self.bandwidth).min(self.dim) {
                s -= self.at(j, i) * b[j];
            }
            b[i] = s / self.at(i, i);
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim).map(|i| self.at(i, i).ln()).sum::<f64>()
    }

    /// Dense `A^{-1}`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = DMatrix::zeros(self.dim, self.dim);
        let mut e = vec![0.0; self.dim];
        for c in 0..self.dim {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            let col = self.solve(&e);
            inv.set_column(c, &DVector::from_vec(col));
        }
        inv
    }
}

/// Symmetric square root `S` with `S S^T = m` for a positive semi-definite `m`.
///
/// Tries a Cholesky factor first and falls back to an eigen decomposition with
/// negative eigenvalues clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = m.clone().cholesky() {
        return ch.l();
    }
    let eig = m.clone().symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    scaled
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| DglmError::NotPositiveDefinite(what.to_string()))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
