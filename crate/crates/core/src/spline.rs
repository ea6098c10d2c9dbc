//! Natural cubic spline bases.
//!
//! Cubic B-splines on the boundary knots (each repeated four times) and
//! `df - 1` interior knots at equally spaced quantiles of the distinct covariate
//! values, evaluated on the covariate mapped to `[0, 1]`. The first B-spline is
//! dropped and the rest are projected onto the subspace with zero second
//! derivative at both boundaries, leaving `df` natural spline functions. These
//! raw columns are then centred, orthogonalised (thin QR) and scaled to unit
//! sample standard deviation. Every step is linear, so each column is still a
//! natural cubic spline on the same knots and, with an intercept, the span is
//! the full natural spline space.
//!
//! `df` counts basis columns and excludes the intercept.

use nalgebra::{DMatrix, DVector};

use crate::error::{DglmError, Result};

/// Finite-difference step (in the unit-interval coordinate) used by
/// [`second_derivative_jumps`].
pub const JUMP_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SplineBasis {
    /// Interior knots in covariate units.
    pub knots: Vec<f64>,
    /// Boundary knots `(min, max)` in covariate units.
    pub boundary: (f64, f64),
    pub df: usize,
    /// `n x df` basis evaluated at the construction points.
    pub basis: DMatrix<f64>,
    unit_knots: Vec<f64>,
    raw: RawNatural,
    column_means: Vec<f64>,
    transform: DMatrix<f64>,
}

/// Type-7 quantile of an ascending slice.
pub(crate) fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Values and first two derivatives of the four cubic B-splines that are
/// non-zero on span `[t[span], t[span + 1])`. Row `d` holds derivative `d`,
/// column `j` belongs to B-spline `span - 3 + j`.
///
/// The point is `base + delta`; distances to knots are formed as
/// `(base - knot) + delta` so that nearby points share one rounding of `base`.
fn cubic_bspline_ders(t: &[f64], span: usize, base: f64, delta: f64) -> [[f64; 4]; 3] {
    const P: usize = 3;
    let mut ndu = [[0.0f64; 4]; 4];
    let mut left = [0.0f64; 4];
    let mut right = [0.0f64; 4];
    ndu[0][0] = 1.0;
    for j in 1..=P {
        left[j] = (base - t[span + 1 - j]) + delta;
        right[j] = (t[span + j] - base) - delta;
        let mut saved = 0.0;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }
    let mut ders = [[0.0f64; 4]; 3];
    for j in 0..=P {
        ders[0][j] = ndu[j][P];
    }
    for r in 0..=P {
        let mut a = [[0.0f64; 4]; 2];
        let (mut s1, mut s2) = (0usize, 1usize);
        a[0][0] = 1.0;
        for k in 1..=2usize {
            let mut d = 0.0;
            let rk = r as i64 - k as i64;
            let pk = P - k;
            if r >= k {
                a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk];
            }
            let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
            let j2 = if (r as i64 - 1) <= pk as i64 { k - 1 } else { P - r };
            for j in j1..=j2 {
                let idx = (rk + j as i64) as usize;
                a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                d += a[s2][j] * ndu[idx][pk];
            }
            if r <= pk {
                a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                d += a[s2][k] * ndu[r][pk];
            }
            ders[k][r] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut factor = P as f64;
    for k in 1..=2usize {
        for j in 0..=P {
            ders[k][j] *= factor;
        }
        factor *= (P - k) as f64;
    }
    ders
}

/// Double-double number (`hi + lo`) for the finite-difference stencils, where
/// plain `f64` loses most digits to cancellation at small steps.
#[derive(Debug, Clone, Copy, Default)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    fn new(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    fn two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        let bb = s - a;
        let e = (a - (s - bb)) + (b - bb);
        Self { hi: s, lo: e }
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        let s = hi + lo;
        Self { hi: s, lo: lo - (s - hi) }
    }

    fn add(self, o: Self) -> Self {
        let s = Self::two_sum(self.hi, o.hi);
        let t = Self::two_sum(self.lo, o.lo);
        let r = Self::renorm(s.hi, s.lo + t.hi);
        Self::renorm(r.hi, r.lo + t.lo)
    }

    fn neg(self) -> Self {
        Self { hi: -self.hi, lo: -self.lo }
    }

    fn sub(self, o: Self) -> Self {
        self.add(o.neg())
    }

    fn mul(self, o: Self) -> Self {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        Self::renorm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }

    fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Self::new(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Self::new(q2)));
        let q3 = r.hi / o.hi;
        Self::renorm(q1, q2).add(Self::new(q3))
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// The four non-zero cubic B-spline values on `span` at `u`, in double-double.
fn cubic_bspline_values_dd(t: &[f64], span: usize, u: Dd) -> [Dd; 4] {
    let mut n = [Dd::default(); 4];
    let mut left = [Dd::default(); 4];
    let mut right = [Dd::default(); 4];
    n[0] = Dd::new(1.0);
    for j in 1..=3 {
        left[j] = u.sub(Dd::new(t[span + 1 - j]));
        right[j] = Dd::new(t[span + j]).sub(u);
        let mut saved = Dd::default();
        for r in 0..j {
            let temp = n[r].div(right[r + 1].add(left[j - r]));
            n[r] = saved.add(right[r + 1].mul(temp));
            saved = left[j - r].mul(temp);
        }
        n[j] = saved;
    }
    n
}

/// Natural spline functions on `[0, 1]` as constrained B-splines, extended
/// linearly outside the unit interval.
#[derive(Debug, Clone)]
struct RawNatural {
    /// Clamped knot vector.
    t: Vec<f64>,
    /// `(m - 1) x df` map from the B-splines (first one dropped) to the
    /// natural subspace.
    null: DMatrix<f64>,
    df: usize,
}

impl RawNatural {
    fn new(unit_knots: &[f64]) -> Result<Self> {
        let df = unit_knots.len() - 1;
        let mut t = vec![0.0; 3];
        t.extend_from_slice(unit_knots);
        t.extend([1.0; 3]);
        let m = df + 3;
        let mut constraint = DMatrix::zeros(m - 1, 2);
        for (c, u) in [0.0, 1.0].into_iter().enumerate() {
            let span = Self::find_span(&t, u);
            let d = cubic_bspline_ders(&t, span, u, 0.0);
            for j in 0..4 {
                let col = span - 3 + j;
                if col > 0 {
                    constraint[(col - 1, c)] = d[2][j];
                }
            }
        }
        // Solve the two constraints for the first and last coefficients; the
        // remaining df coefficients are free.
        let last = m - 2;
        let pivots = DMatrix::from_row_slice(
            2,
            2,
            &[
                constraint[(0, 0)],
                constraint[(last, 0)],
                constraint[(0, 1)],
                constraint[(last, 1)],
            ],
        );
        let pivot_inv = pivots
            .try_inverse()
            .ok_or_else(|| DglmError::Numerical("degenerate natural spline constraints".into()))?;
        let mut null = DMatrix::zeros(m - 1, df);
        for k in 0..df {
            let free = k + 1;
            null[(free, k)] = 1.0;
            let rhs = DVector::from_vec(vec![-constraint[(free, 0)], -constraint[(free, 1)]]);
            let z = &pivot_inv * rhs;
            null[(0, k)] = z[0];
            null[(last, k)] = z[1];
        }
        Ok(Self { t, null, df })
    }

    fn find_span(t: &[f64], u: f64) -> usize {
        let last = t.len() - 5;
        if u >= t[last + 1] {
            return last;
        }
        let mut span = 3;
        while span < last && u >= t[span + 1] {
            span += 1;
        }
        span
    }

    /// Values at `base + delta` written to `out` (length `df`).
    fn row(&self, base: f64, delta: f64, out: &mut [f64]) {
        let u = base + delta;
        // Outside [0, 1] the functions continue linearly from the boundary.
        let (anchor, shift, offset) = if u < 0.0 {
            (0.0, 0.0, base + delta)
        } else if u > 1.0 {
            (1.0, 0.0, (base - 1.0) + delta)
        } else {
            (base, delta, 0.0)
        };
        let span = Self::find_span(&self.t, anchor + shift);
        let d = cubic_bspline_ders(&self.t, span, anchor, shift);
        out.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..4 {
            let col = span - 3 + j;
            if col == 0 {
                continue;
            }
            let w = d[0][j] + offset * d[1][j];
            for k in 0..self.df {
                out[k] += w * self.null[(col - 1, k)];
            }
        }
    }

    /// `sum_k weights[k] * f(base + deltas[k])` for every column, accumulated in
    /// double-double so that only the final sum is rounded.
    fn stencil(&self, base: f64, deltas: &[f64], weights: &[f64]) -> Vec<f64> {
        let m = self.null.nrows() + 1;
        let mut acc = vec![Dd::default(); m];
        for (&delta, &w) in deltas.iter().zip(weights) {
            let u = Dd::new(base).add(Dd::new(delta));
            let w = Dd::new(w);
            if u.hi < 0.0 || u.hi > 1.0 {
                let (anchor, offset) = if u.hi < 0.0 {
                    (0.0, u)
                } else {
                    (1.0, u.sub(Dd::new(1.0)))
                };
                let span = Self::find_span(&self.t, anchor);
                let d = cubic_bspline_ders(&self.t, span, anchor, 0.0);
                for j in 0..4 {
                    let v = Dd::new(d[0][j]).add(offset.mul(Dd::new(d[1][j])));
                    acc[span - 3 + j] = acc[span - 3 + j].add(w.mul(v));
                }
            } else {
                let span = Self::find_span(&self.t, u.hi);
                let vals = cubic_bspline_values_dd(&self.t, span, u);
                for j in 0..4 {
                    acc[span - 3 + j] = acc[span - 3 + j].add(w.mul(vals[j]));
                }
            }
        }
        (0..self.df)
            .map(|k| {
                (1..m)
                    .map(|col| acc[col].to_f64() * self.null[(col - 1, k)])
                    .sum()
            })
            .collect()
    }
}

/// Builds a natural cubic spline basis with `df` columns for the values `x`.
pub fn ncs_basis(x: &[f64], df: usize) -> Result<SplineBasis> {
    if df < 1 {
        return Err(DglmError::Config(format!(
            "spline degrees of freedom must be >= 1, got {df}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DglmError::Data("spline covariate contains non-finite values".into()));
    }
    let mut distinct = x.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < df + 2 {
        return Err(DglmError::Data(format!(
            "natural spline with df = {df} needs at least {} distinct values, found {}",
            df + 2,
            distinct.len()
        )));
    }
    let lo = distinct[0];
    let hi = *distinct.last().unwrap();
    let width = hi - lo;
    let interior: Vec<f64> = (1..df)
        .map(|j| sorted_quantile(&distinct, j as f64 / df as f64))
        .collect();

    let mut unit_knots = Vec::with_capacity(df + 1);
    unit_knots.push(0.0);
    unit_knots.extend(interior.iter().map(|k| (k - lo) / width));
    unit_knots.push(1.0);
    let raw_fns = RawNatural::new(&unit_knots)?;

    let n = x.len();
    let mut raw = DMatrix::zeros(n, df);
    let mut row = vec![0.0; df];
    for (i, &xi) in x.iter().enumerate() {
        raw_fns.row((xi - lo) / width, 0.0, &mut row);
        for j in 0..df {
            raw[(i, j)] = row[j];
        }
    }
    let column_means: Vec<f64> = (0..df).map(|j| raw.column(j).mean()).collect();
    for j in 0..df {
        let m = column_means[j];
        raw.column_mut(j).add_scalar_mut(-m);
    }

    let qr = raw.clone().qr();
    let r = qr.r();
    let scale_ref = r.diagonal().amax();
    for j in 0..df {
        if r[(j, j)].abs() <= 1e-10 * scale_ref.max(f64::MIN_POSITIVE) {
            return Err(DglmError::Numerical(format!(
                "natural spline basis is rank deficient at column {j}"
            )));
        }
    }
    let scale = ((n.max(2) - 1) as f64).sqrt();
    let r_inv = r
        .try_inverse()
        .ok_or_else(|| DglmError::Numerical("spline QR factor not invertible".into()))?;
    let transform = r_inv * scale;
    let basis = &raw * &transform;

    Ok(SplineBasis {
        knots: interior,
        boundary: (lo, hi),
        df,
        basis,
        unit_knots,
        raw: raw_fns,
        column_means,
        transform,
    })
}

impl SplineBasis {
    fn to_unit(&self, x: f64) -> f64 {
        (x - self.boundary.0) / (self.boundary.1 - self.boundary.0)
    }

    fn raw_centered(&self, u: &[f64]) -> DMatrix<f64> {
        let mut raw = DMatrix::zeros(u.len(), self.df);
        let mut row = vec![0.0; self.df];
        for (i, &ui) in u.iter().enumerate() {
            self.raw.row(ui, 0.0, &mut row);
            for j in 0..self.df {
                raw[(i, j)] = row[j] - self.column_means[j];
            }
        }
        raw
    }

    /// Evaluates the basis at new covariate values (extrapolating linearly
    /// beyond the boundary knots).
    pub fn evaluate(&self, x: &[f64]) -> DMatrix<f64> {
        let u: Vec<f64> = x.iter().map(|&v| self.to_unit(v)).collect();
        self.raw_centered(&u) * &self.transform
    }

    /// Evaluates the basis at unit-interval coordinates `u = (x - min) / (max - min)`.
    pub fn evaluate_unit(&self, u: &[f64]) -> DMatrix<f64> {
        self.raw_centered(u) * &self.transform
    }

    /// Finite-difference stencil `sum_k w_k f(base + delta_k)` of every column.
    fn stencil(&self, base: f64, deltas: &[f64], weights: &[f64]) -> Vec<f64> {
        let raw = DMatrix::from_row_slice(1, self.df, &self.raw.stencil(base, deltas, weights));
        (raw * &self.transform).iter().copied().collect()
    }

    /// All knots (boundary and interior) on the unit interval.
    pub fn unit_knots(&self) -> &[f64] {
        &self.unit_knots
    }
}

/// Second-derivative discontinuity at each interior knot for each column,
/// estimated by finite differences in the unit coordinate.
///
/// The left and right limits of the second derivative are each estimated from a
/// four-point one-sided stencil (exact for cubic pieces), so only rounding
/// error separates the estimate from the exact jump, which is zero for a C²
/// spline. Result is indexed `[knot][column]`.
pub fn second_derivative_jumps(basis: &SplineBasis) -> Vec<Vec<f64>> {
    let h = JUMP_STEP;
    let interior = &basis.unit_knots[1..basis.unit_knots.len() - 1];
    interior
        .iter()
        .map(|&xi| {
            let left = one_sided_second_derivative(basis, xi, -h);
            let right = one_sided_second_derivative(basis, xi, h);
            (0..basis.df).map(|j| (right[j] - left[j]).abs()).collect()
        })
        .collect()
}

/// `f''` at `u0` using points `u0, u0 + h, u0 + 2h, u0 + 3h` (`h` may be negative).
pub(crate) fn one_sided_second_derivative(basis: &SplineBasis, u0: f64, h: f64) -> Vec<f64> {
    basis
        .stencil(u0, &[0.0, h, 2.0 * h, 3.0 * h], &[2.0, -5.0, 4.0, -1.0])
        .into_iter()
        .map(|v| v / (h * h))
        .collect()
}

/// Central-difference second derivative of every column at unit coordinate `u`.
pub fn second_derivative_at(basis: &SplineBasis, u: f64, h: f64) -> Vec<f64> {
    basis
        .stencil(u, &[-h, 0.0, h], &[1.0, -2.0, 1.0])
        .into_iter()
        .map(|v| v / (h * h))
        .collect()
}
