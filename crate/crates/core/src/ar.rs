//! Gaussian AR(p) priors for stacked dynamic coefficients.
//!
//! A dynamic coefficient path is stored stacked by time: entries for
//! `beta_{-p+1}, ..., beta_0, beta_1, ..., beta_n`, each a `q`-vector, so time `t`
//! occupies scalar positions `(t + p - 1) * q .. (t + p) * q`.
//!
//! The prior `prod_t N(beta_t | sum_l F_l beta_{t-l}, Sigma)` is written as
//! `exp(-1/2 beta^T K beta)` with `K = A^T Q A`, where `A` maps the stack to the
//! `n` innovations and `Q = blockdiag(Sigma^{-1})`. `K` is singular whenever the
//! recursion is non-stationary, and its block bandwidth is exactly `p`. The
//! initializer prior `N(mu_0, Sigma_0)` is deliberately not folded into `K`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DglmError, Result};
use crate::linalg::{psd_sqrt, spd_inverse, BandCholesky, SymBand};

/// Prior on one diagonal component of the evolution covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VariancePrior {
    /// `IG(shape, scale)`: density proportional to `x^{-shape-1} exp(-scale / x)`.
    InverseGamma { shape: f64, scale: f64 },
    /// `N(0, variance)` restricted to positive values.
    TruncatedGaussian { variance: f64 },
    /// The component is held at its current value.
    Fixed,
}

impl VariancePrior {
    /// Univariate inverse-Wishart `IW(n_sigma, S_sigma^{-1})` expressed as an inverse gamma.
    pub fn from_inverse_wishart(n_sigma: f64, s_sigma: f64) -> Self {
        VariancePrior::InverseGamma {
            shape: 0.5 * n_sigma,
            scale: 0.5 * s_sigma,
        }
    }

    /// Log density up to an additive constant, `-inf` outside the support.
    pub fn log_density(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        match *self {
            VariancePrior::InverseGamma { shape, scale } => -(shape + 1.0) * x.ln() - scale / x,
            VariancePrior::TruncatedGaussian { variance } => -0.5 * x * x / variance,
            VariancePrior::Fixed => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArProcessSpec {
    /// Autoregressive order `p`.
    pub order: usize,
    /// Dimension `q` of each `beta_t`.
    pub dim: usize,
    /// `F_1, ..., F_p`, each `q x q`.
    pub coefficients: Vec<DMatrix<f64>>,
    /// Whether the (scalar) coefficients are unknown and sampled under a flat prior.
    pub free_coefficients: bool,
    /// Evolution covariance `Sigma_beta`.
    pub sigma_beta: DMatrix<f64>,
    /// Initializer prior mean `mu_0`.
    pub init_mean: DVector<f64>,
    /// Initializer prior covariance `Sigma_0`.
    pub init_cov: DMatrix<f64>,
    /// One prior per diagonal component of `Sigma_beta`.
    pub variance_priors: Vec<VariancePrior>,
}

impl ArProcessSpec {
    /// Univariate AR(p) with scalar coefficients.
    pub fn univariate(
        coefficients: &[f64],
        variance: f64,
        init_mean: f64,
        init_var: f64,
        prior: VariancePrior,
    ) -> Self {
        Self {
            order: coefficients.len(),
            dim: 1,
            coefficients: coefficients
                .iter()
                .map(|&f| DMatrix::from_element(1, 1, f))
                .collect(),
            free_coefficients: false,
            sigma_beta: DMatrix::from_element(1, 1, variance),
            init_mean: DVector::from_element(1, init_mean),
            init_cov: DMatrix::from_element(1, 1, init_var),
            variance_priors: vec![prior],
        }
    }

    /// First order random walk `beta_t ~ N(beta_{t-1}, tau2)`.
    pub fn random_walk1(tau2: f64, init_mean: f64, init_var: f64, prior: VariancePrior) -> Self {
        Self::univariate(&[1.0], tau2, init_mean, init_var, prior)
    }

    /// Second order random walk `beta_t ~ N(2 beta_{t-1} - beta_{t-2}, tau2)`.
    pub fn random_walk2(tau2: f64, init_mean: f64, init_var: f64, prior: VariancePrior) -> Self {
        Self::univariate(&[2.0, -1.0], tau2, init_mean, init_var, prior)
    }

    /// Local linear trend on the state `(level, slope)`:
    /// `level_t ~ N(level_{t-1} + slope_{t-1}, tau2)`, `slope_t ~ N(slope_{t-1}, psi2)`.
    #[allow(clippy::too_many_arguments)]
    pub fn local_linear_trend(
        tau2: f64,
        psi2: f64,
        level_init: (f64, f64),
        slope_init: (f64, f64),
        tau2_prior: VariancePrior,
        psi2_prior: VariancePrior,
    ) -> Self {
        Self {
            order: 1,
            dim: 2,
            coefficients: vec![DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])],
            free_coefficients: false,
            sigma_beta: DMatrix::from_diagonal(&DVector::from_vec(vec![tau2, psi2])),
            init_mean: DVector::from_vec(vec![level_init.0, slope_init.0]),
            init_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![level_init.1, slope_init.1])),
            variance_priors: vec![tau2_prior, psi2_prior],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (p, q) = (self.order, self.dim);
        if p == 0 || q == 0 {
            return Err(DglmError::Config("AR order and dimension must be >= 1".into()));
        }
        if self.coefficients.len() != p
            || self.coefficients.iter().any(|f| f.shape() != (q, q))
        {
            return Err(DglmError::Dimension(format!(
                "expected {p} coefficient matrices of shape {q}x{q}"
            )));
        }
        if self.sigma_beta.shape() != (q, q)
            || self.init_cov.shape() != (q, q)
            || self.init_mean.len() != q
        {
            return Err(DglmError::Dimension("AR covariance/mean dimension mismatch".into()));
        }
        if self.variance_priors.len() != q {
            return Err(DglmError::Dimension(format!(
                "expected {q} variance priors, got {}",
                self.variance_priors.len()
            )));
        }
        if self.free_coefficients && (q != 1 || p > 2) {
            return Err(DglmError::Config(
                "free AR coefficients are supported for scalar AR(1) and AR(2) only".into(),
            ));
        }
        if (&self.sigma_beta - self.sigma_beta.transpose()).amax() > 0.0 {
            return Err(DglmError::Config("evolution covariance must be symmetric".into()));
        }
        if spd_inverse(&self.init_cov, "initializer covariance").is_err() {
            return Err(DglmError::Config(
                "initializer covariance must be positive definite".into(),
            ));
        }
        for (j, prior) in self.variance_priors.iter().enumerate() {
            let bad = match *prior {
                VariancePrior::InverseGamma { shape, scale } => !(shape > 0.0 && scale >= 0.0),
                VariancePrior::TruncatedGaussian { variance } => !(variance > 0.0),
                VariancePrior::Fixed => false,
            };
            if bad {
                return Err(DglmError::Config(format!("invalid variance prior {j}: {prior:?}")));
            }
        }
        Ok(())
    }

    /// Number of stacked scalars for a path of length `n`.
    pub fn stacked_len(&self, n: usize) -> usize {
        (n + self.order) * self.dim
    }

    /// Same process with a different evolution covariance.
    pub fn with_sigma(&self, sigma_beta: DMatrix<f64>) -> Self {
        Self {
            sigma_beta,
            ..self.clone()
        }
    }
}

/// Banded precision `K` of the AR prior over the stacked path.
#[derive(Debug, Clone)]
pub struct ArPrecision {
    band: SymBand,
    pub order: usize,
    pub block_size: usize,
    pub n: usize,
}

impl ArPrecision {
    /// Scalar position of component `j` of `beta_t`.
    #[inline]
    pub fn index(&self, t: i64, j: usize) -> usize {
        stacked_index(t, j, self.order, self.block_size)
    }

    pub fn dim(&self) -> usize {
        self.band.dim()
    }

    pub fn band(&self) -> &SymBand {
        &self.band
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.band.get(i, j)
    }

    /// The `q x q` block `K_{t,u}` for times `t, u` in `-p+1..=n`.
    pub fn block(&self, t: i64, u: i64) -> DMatrix<f64> {
        let q = self.block_size;
        DMatrix::from_fn(q, q, |a, b| self.get(self.index(t, a), self.index(u, b)))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.band.to_dense()
    }
}

#[inline]
pub(crate) fn stacked_index(t: i64, j: usize, p: usize, q: usize) -> usize {
    let pos = t + p as i64 - 1;
    debug_assert!(pos >= 0, "time {t} before first initializer");
    pos as usize * q + j
}

/// Builds `K` for the given process over `n` time points.
pub fn build_precision(spec: &ArProcessSpec, n: usize) -> Result<ArPrecision> {
    spec.validate()?;
    let sigma_inv = spd_inverse(&spec.sigma_beta, "evolution covariance Sigma_beta")?;
    Ok(precision_from_parts(&spec.coefficients, &sigma_inv, n))
}

/// `K = A^T Q A` from the coefficient matrices and `Sigma_beta^{-1}`.
pub(crate) fn precision_from_parts(
    coefficients: &[DMatrix<f64>],
    sigma_inv: &DMatrix<f64>,
    n: usize,
) -> ArPrecision {
    let p = coefficients.len();
    let q = sigma_inv.nrows();
    let dim = (n + p) * q;
    let bandwidth = (p + 1) * q - 1;
    let mut band = SymBand::zeros(dim, bandwidth);

    // Innovation t involves blocks t - l with coefficient C_0 = I, C_l = -F_l.
    let mut c: Vec<DMatrix<f64>> = Vec::with_capacity(p + 1);
    c.push(DMatrix::identity(q, q));
    c.extend(coefficients.iter().map(|f| -f));
    // Precompute C_a^T S C_b for all lag pairs (time-invariant).
    let mut products = vec![vec![DMatrix::zeros(q, q); p + 1]; p + 1];
    for a in 0..=p {
        for b in 0..=p {
            products[a][b] = c[a].transpose() * sigma_inv * &c[b];
        }
    }
    for t in 1..=n as i64 {
        for a in 0..=p {
            for b in 0..=a {
                // Row block t - a, column block t - b; (t - a) <= (t - b).
                let m = &products[a][b];
                let ta = t - a as i64;
                let tb = t - b as i64;
                for i in 0..q {
                    for j in 0..q {
                        let row = stacked_index(ta, i, p, q);
                        let col = stacked_index(tb, j, p, q);
                        if a == b {
                            if row >= col {
                                band.add(row, col, m[(i, j)]);
                            }
                        } else {
                            band.add(row, col, m[(i, j)]);
                        }
                    }
                }
            }
        }
    }
    ArPrecision {
        band,
        order: p,
        block_size: q,
        n,
    }
}

/// `-1/2 beta^T K beta`.
pub fn log_prior_quadform(k: &ArPrecision, beta: &[f64]) -> Result<f64> {
    if beta.len() != k.dim() {
        return Err(DglmError::Dimension(format!(
            "stacked path has length {}, precision has dimension {}",
            beta.len(),
            k.dim()
        )));
    }
    Ok(-0.5 * k.band.quad_form(beta))
}

/// Gaussian conditional of `beta_{r..s}` given the remaining entries.
#[derive(Debug, Clone)]
pub struct BlockConditional {
    pub range: (i64, i64),
    pub mean: DVector<f64>,
    factor: BandCholesky,
}

impl BlockConditional {
    /// Covariance `K_{r,s}^{-1}` (dense).
    pub fn cov(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }

    /// Cholesky factor of the block precision.
    pub fn precision_factor(&self) -> &BandCholesky {
        &self.factor
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut z: Vec<f64> = (0..self.mean.len())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.factor.solve_upper_in_place(&mut z);
        DVector::from_iterator(z.len(), self.mean.iter().zip(z).map(|(m, e)| m + e))
    }
}

/// Precision sub-block and right-hand side `-K_{block, rest} beta_rest` for the
/// scalar range `start..end`.
pub(crate) fn conditional_system(
    k: &ArPrecision,
    beta: &[f64],
    start: usize,
    end: usize,
) -> (SymBand, Vec<f64>) {
    let w = k.band.bandwidth();
    let dim = k.dim();
    let sub = k.band.sub_block(start, end);
    let mut rhs = vec![0.0; end - start];
    for (local, i) in (start..end).enumerate() {
        let lo = i.saturating_sub(w);
        let hi = (i + w + 1).min(dim);
        let mut acc = 0.0;
        for j in (lo..start).chain(end.max(lo)..hi) {
            acc += k.band.get(i, j) * beta[j];
        }
        rhs[local] = -acc;
    }
    (sub, rhs)
}

/// Conditional distribution of `beta_r, ..., beta_s` given all other entries of
/// the stacked path under the zero-mean Gaussian with precision `K`.
pub fn block_conditional(k: &ArPrecision, beta: &[f64], r: i64, s: i64) -> Result<BlockConditional> {
    let first = -(k.order as i64) + 1;
    if r < first || s > k.n as i64 || r > s {
        return Err(DglmError::Dimension(format!(
            "block ({r}, {s}) outside {first}..={}",
            k.n
        )));
    }
    if beta.len() != k.dim() {
        return Err(DglmError::Dimension("stacked path length mismatch".into()));
    }
    let start = k.index(r, 0);
    let end = k.index(s, 0) + k.block_size;
    let (sub, rhs) = conditional_system(k, beta, start, end);
    let factor = sub.cholesky()?;
    let mean = DVector::from_vec(factor.solve(&rhs));
    Ok(BlockConditional {
        range: (r, s),
        mean,
        factor,
    })
}

/// Innovations `beta_t - sum_l F_l beta_{t-l}` for `t = 1..=n`, as an `n x q` matrix.
pub fn innovations(coefficients: &[DMatrix<f64>], beta: &[f64], n: usize) -> DMatrix<f64> {
    let p = coefficients.len();
    let q = coefficients[0].nrows();
    let mut out = DMatrix::zeros(n, q);
    for t in 1..=n as i64 {
        for i in 0..q {
            let mut e = beta[stacked_index(t, i, p, q)];
            for (l, f) in coefficients.iter().enumerate() {
                let lag = t - 1 - l as i64;
                for j in 0..q {
                    e -= f[(i, j)] * beta[stacked_index(lag, j, p, q)];
                }
            }
            out[(t as usize - 1, i)] = e;
        }
    }
    out
}

/// Runs the recursion forward from given initializers (`p x q`, oldest first) and
/// innovations (`n x q`). Returns the `(n + p) x q` path.
pub fn ar_recursion(
    coefficients: &[DMatrix<f64>],
    initializers: &DMatrix<f64>,
    innovations: &DMatrix<f64>,
) -> DMatrix<f64> {
    let p = coefficients.len();
    let q = initializers.ncols();
    let n = innovations.nrows();
    let mut path = DMatrix::zeros(n + p, q);
    path.rows_mut(0, p).copy_from(initializers);
    for row in p..n + p {
        let mut next = innovations.row(row - p).transpose();
        for (l, f) in coefficients.iter().enumerate() {
            let prev = path.row(row - 1 - l).transpose();
            next += f * prev;
        }
        path.set_row(row, &next.transpose());
    }
    path
}

/// Simulates `(n + p) x q` path: initializers from `N(mu_0, Sigma_0)`, then the
/// recursion with `N(0, Sigma_beta)` innovations. Deterministic for a fixed seed.
pub fn simulate_ar_path(spec: &ArProcessSpec, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_ar_path_with(spec, n, &mut rng)
}

pub fn simulate_ar_path_with<R: Rng + ?Sized>(
    spec: &ArProcessSpec,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let (p, q) = (spec.order, spec.dim);
    let init_root = psd_sqrt(&spec.init_cov);
    let innov_root = psd_sqrt(&spec.sigma_beta);
    let mut init = DMatrix::zeros(p, q);
    for l in 0..p {
        let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let draw = &spec.init_mean + &init_root * z;
        init.set_row(l, &draw.transpose());
    }
    let mut innov = DMatrix::zeros(n, q);
    for t in 0..n {
        let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        innov.set_row(t, &(&innov_root * z).transpose());
    }
    Ok(ar_recursion(&spec.coefficients, &init, &innov))
}

/// Flattens an `(n + p) x q` path into the stacked layout.
pub fn stack_path(path: &DMatrix<f64>) -> Vec<f64> {
    path.transpose().iter().copied().collect()
}

/// Inverse of [`stack_path`].
pub fn unstack_path(beta: &[f64], q: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(beta.len() / q, q, beta)
}
