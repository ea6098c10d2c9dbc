//! Posterior-mode estimation by an iteratively re-weighted Kalman filter and
//! Rauch-Tung-Striebel smoother, with an AIC search over evolution variances.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar::build_precision;
use crate::error::{DglmError, Result};
use crate::linalg::{spd_inverse, symmetrize};
use crate::model::{AssembledModel, Likelihood};

pub const MAX_ITERATIONS: usize = 50;
pub const TOLERANCE: f64 = 1e-8;
/// Relative change of the penalized objective below which iterations stop
/// even if the linear predictor still jitters at rounding level.
pub const OBJECTIVE_TOLERANCE: f64 = 1e-8;

/// Linear-Gaussian state space form of an assembled model.
///
/// The state at time `t` concatenates, per dynamic block, the companion
/// vector `(beta_t, beta_{t-1}, ..., beta_{t-p+1})`, followed by the fixed
/// effects as constant components with zero innovation variance.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceForm {
    pub state_dim: usize,
    pub transition: DMatrix<f64>,
    pub innovation_cov: DMatrix<f64>,
    /// Distribution of the state at `t = 0`.
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    /// Row `t` maps the state at time `t + 1` to its linear predictor.
    pub observation: DMatrix<f64>,
    /// Start of each dynamic block inside the state.
    pub block_offsets: Vec<usize>,
    pub alpha_offset: usize,
    orders: Vec<(usize, usize)>,
}

/// Companion transition of an AR(p) process on `q` components.
pub fn companion_matrix(coefficients: &[DMatrix<f64>]) -> DMatrix<f64> {
    let p = coefficients.len();
    let q = coefficients[0].nrows();
    let mut m = DMatrix::zeros(p * q, p * q);
    for (l, f) in coefficients.iter().enumerate() {
        m.view_mut((0, l * q), (q, q)).copy_from(f);
    }
    for l in 1..p {
        for j in 0..q {
            m[(l * q + j, (l - 1) * q + j)] = 1.0;
        }
    }
    m
}

/// Runs the companion recursion from `init` (rows `beta_{-p+1}..beta_0`) with
/// innovations `innov` (`n x q`), returning the `(n + p) x q` path.
pub fn companion_path(
    coefficients: &[DMatrix<f64>],
    init: &DMatrix<f64>,
    innov: &DMatrix<f64>,
) -> DMatrix<f64> {
    let p = coefficients.len();
    let q = coefficients[0].nrows();
    let n = innov.nrows();
    let t_mat = companion_matrix(coefficients);
    let mut state = DVector::zeros(p * q);
    for l in 0..p {
        for j in 0..q {
            state[l * q + j] = init[(p - 1 - l, j)];
        }
    }
    let mut out = DMatrix::zeros(n + p, q);
    out.rows_mut(0, p).copy_from(init);
    for t in 0..n {
        state = &t_mat * state;
        for j in 0..q {
            state[j] += innov[(t, j)];
            out[(t + p, j)] = state[j];
        }
    }
    out
}

impl StateSpaceForm {
    /// Builds the form using `variances` (diagonal per block) in place of the
    /// model's evolution variances.
    pub fn new(model: &AssembledModel, variances: &[Vec<f64>]) -> Result<Self> {
        if variances.len() != model.dynamic.len() {
            return Err(DglmError::Dimension("one variance set per dynamic block".into()));
        }
        let n = model.n();
        let r = model.fixed.len();
        let mut offsets = Vec::new();
        let mut orders = Vec::new();
        let mut d = 0;
        for (b, v) in model.dynamic.iter().zip(variances) {
            if v.len() != b.q() || v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(DglmError::Config(format!(
                    "block `{}`: need {} non-negative variances",
                    b.name,
                    b.q()
                )));
            }
            offsets.push(d);
            orders.push((b.p(), b.q()));
            d += b.p() * b.q();
        }
        let alpha_offset = d;
        d += r;
        let mut transition = DMatrix::zeros(d, d);
        let mut innovation_cov = DMatrix::zeros(d, d);
        let mut init_mean = DVector::zeros(d);
        let mut init_cov = DMatrix::zeros(d, d);
        let mut observation = DMatrix::zeros(n, d);
        for ((b, v), &o) in model.dynamic.iter().zip(variances).zip(&offsets) {
            let (p, q) = (b.p(), b.q());
            transition
                .view_mut((o, o), (p * q, p * q))
                .copy_from(&companion_matrix(&b.ar_spec.coefficients));
            for j in 0..q {
                innovation_cov[(o + j, o + j)] = v[j];
            }
            for l in 0..p {
                let s = o + l * q;
                init_mean.rows_mut(s, q).copy_from(&b.ar_spec.init_mean);
                init_cov.view_mut((s, s), (q, q)).copy_from(&b.ar_spec.init_cov);
            }
            for t in 0..n {
                for j in 0..q {
                    observation[(t, o + j)] = b.design[(t, j)];
                }
            }
        }
        for j in 0..r {
            transition[(alpha_offset + j, alpha_offset + j)] = 1.0;
        }
        if r > 0 {
            init_mean.rows_mut(alpha_offset, r).copy_from(&model.fixed.prior_mean);
            init_cov
                .view_mut((alpha_offset, alpha_offset), (r, r))
                .copy_from(&model.fixed.prior_cov);
            observation.columns_mut(alpha_offset, r).copy_from(&model.fixed.design);
        }
        Ok(Self {
            state_dim: d,
            transition,
            innovation_cov,
            init_mean,
            init_cov,
            observation,
            block_offsets: offsets,
            alpha_offset,
            orders,
        })
    }

    /// Splits state means `s_0, ..., s_n` into stacked block paths and the
    /// fixed effects (read from `s_n`).
    fn unpack(&self, states: &[DVector<f64>]) -> (Vec<DVector<f64>>, DVector<f64>) {
        let n = states.len() - 1;
        let paths = self
            .block_offsets
            .iter()
            .zip(&self.orders)
            .map(|(&o, &(p, q))| {
                let mut v = DVector::zeros((n + p) * q);
                // Initializers beta_{-p+1}..beta_0 live in the companion state at t = 0.
                for l in 0..p {
                    for j in 0..q {
                        v[(p - 1 - l) * q + j] = states[0][o + l * q + j];
                    }
                }
                for t in 1..=n {
                    for j in 0..q {
                        v[(t + p - 1) * q + j] = states[t][o + j];
                    }
                }
                v
            })
            .collect();
        let r = self.state_dim - self.alpha_offset;
        let alpha = states[n].rows(self.alpha_offset, r).into_owned();
        (paths, alpha)
    }
}

/// Smoother moments for one linear-Gaussian pass.
#[derive(Debug, Clone)]
struct GaussianPass {
    smoothed_mean: Vec<DVector<f64>>,
    smoothed_var: Vec<DVector<f64>>,
    filtered_var: Vec<DVector<f64>>,
    /// Smoothed covariance of the whole state at `t = n`.
    final_cov: DMatrix<f64>,
    /// Posterior variance of each fitted linear predictor.
    eta_var: Vec<f64>,
    working_loglik: f64,
}

fn spd_solve_right(a: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    // a * p^{-1}
    match p.clone().cholesky() {
        Some(c) => c.solve(&a.transpose()).transpose(),
        None => {
            let pinv = p
                .clone()
                .pseudo_inverse(1e-14 * p.amax().max(f64::MIN_POSITIVE))
                .unwrap_or_else(|_| DMatrix::zeros(p.nrows(), p.ncols()));
            a * pinv
        }
    }
}

/// Filter plus smoother on observations `y` with variances `obs_var`.
fn gaussian_pass(ss: &StateSpaceForm, y: &[f64], obs_var: &[f64]) -> Result<GaussianPass> {
    let n = y.len();
    let d = ss.state_dim;
    let t_mat = &ss.transition;
    let mut m_pred = Vec::with_capacity(n + 1);
    let mut p_pred = Vec::with_capacity(n + 1);
    let mut m_filt = Vec::with_capacity(n + 1);
    let mut p_filt = Vec::with_capacity(n + 1);
    m_filt.push(ss.init_mean.clone());
    p_filt.push(ss.init_cov.clone());
    m_pred.push(ss.init_mean.clone());
    p_pred.push(ss.init_cov.clone());
    let mut working_loglik = 0.0;
    let eye = DMatrix::<f64>::identity(d, d);
    for t in 0..n {
        let m = t_mat * &m_filt[t];
        let mut p = t_mat * &p_filt[t] * t_mat.transpose() + &ss.innovation_cov;
        symmetrize(&mut p);
        let h = ss.observation.row(t).transpose();
        let ph = &p * &h;
        let v = h.dot(&ph) + obs_var[t];
        if !(v > 0.0) || !v.is_finite() {
            return Err(DglmError::NotPositiveDefinite(format!(
                "innovation variance {v:e} at t = {}",
                t + 1
            )));
        }
        let e = y[t] - h.dot(&m);
        working_loglik += -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + e * e / v);
        let k = &ph / v;
        let mf = &m + &k * e;
        // Joseph form keeps the update symmetric and non-negative.
        let a = &eye - &k * h.transpose();
        let mut pf = &a * &p * a.transpose() + &k * k.transpose() * obs_var[t];
        symmetrize(&mut pf);
        if pf.diagonal().iter().any(|x| *x < -1e-8 * (1.0 + pf.amax())) {
            return Err(DglmError::NotPositiveDefinite(format!(
                "filtered covariance at t = {}",
                t + 1
            )));
        }
        m_pred.push(m);
        p_pred.push(p);
        m_filt.push(mf);
        p_filt.push(pf);
    }
    let mut ms = vec![DVector::zeros(d); n + 1];
    let mut ps = vec![DMatrix::zeros(d, d); n + 1];
    ms[n] = m_filt[n].clone();
    ps[n] = p_filt[n].clone();
    for t in (0..n).rev() {
        let j = spd_solve_right(&(&p_filt[t] * t_mat.transpose()), &p_pred[t + 1]);
        let m = &m_filt[t] + &j * (&ms[t + 1] - &m_pred[t + 1]);
        let mut p = &p_filt[t] + &j * (&ps[t + 1] - &p_pred[t + 1]) * j.transpose();
        symmetrize(&mut p);
        ms[t] = m;
        ps[t] = p;
    }
    let eta_var = (0..n)
        .map(|t| {
            let h = ss.observation.row(t);
            (h * &ps[t + 1] * h.transpose())[(0, 0)].max(0.0)
        })
        .collect();
    Ok(GaussianPass {
        smoothed_mean: ms,
        smoothed_var: ps.iter().map(|p| p.diagonal().map(|x| x.max(0.0))).collect(),
        filtered_var: p_filt.iter().map(|p| p.diagonal().map(|x| x.max(0.0))).collect(),
        final_cov: ps[n].clone(),
        eta_var,
        working_loglik,
    })
}

/// Smoothed posterior-mode estimates at fixed hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherOutput {
    /// Stacked smoothed path per dynamic block (same layout as the sampler).
    pub beta: Vec<DVector<f64>>,
    pub alpha: DVector<f64>,
    /// Stacked smoothed variances per block.
    pub beta_var: Vec<DVector<f64>>,
    /// Stacked filtered variances per block (initializers carry their prior).
    pub beta_filtered_var: Vec<DVector<f64>>,
    pub alpha_var: DVector<f64>,
    pub alpha_cov: DMatrix<f64>,
    pub eta: DVector<f64>,
    pub eta_var: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest change in the linear predictor at the last iteration.
    pub max_change: f64,
    /// Observation log likelihood at the fitted linear predictor.
    pub loglik: f64,
    /// Effective degrees of freedom: trace of the influence of the working
    /// observations on the fitted linear predictor.
    pub edf: f64,
    /// Gaussian log likelihood of the final working observations.
    pub working_loglik: f64,
    pub variances: Vec<Vec<f64>>,
}

impl SmootherOutput {
    pub fn aic(&self) -> f64 {
        -2.0 * self.loglik + 2.0 * self.edf
    }
}

fn log_prior(model: &AssembledModel, ss: &StateSpaceForm, variances: &[Vec<f64>], states: &[DVector<f64>]) -> f64 {
    let (paths, alpha) = ss.unpack(states);
    let n = model.n();
    let mut total = 0.0;
    for ((b, v), path) in model.dynamic.iter().zip(variances).zip(&paths) {
        let (p, q) = (b.p(), b.q());
        let e = crate::ar::innovations(&b.ar_spec.coefficients, path.as_slice(), n);
        for j in 0..q {
            let ss_j: f64 = e.column(j).iter().map(|x| x * x).sum();
            // A zero variance pins the component; the smoother keeps it pinned.
            if v[j] > 0.0 {
                total -= 0.5 * ss_j / v[j];
            }
        }
        let prec = spd_inverse(&b.ar_spec.init_cov, "initializer covariance").unwrap_or_else(|_| DMatrix::zeros(q, q));
        for l in 0..p {
            let d = path.rows(l * q, q) - &b.ar_spec.init_mean;
            total -= 0.5 * d.dot(&(&prec * &d));
        }
    }
    if !model.fixed.is_empty() {
        if let Ok(prec) = spd_inverse(&model.fixed.prior_cov, "fixed-effect prior covariance") {
            let d = &alpha - &model.fixed.prior_mean;
            total -= 0.5 * d.dot(&(&prec * &d));
        }
    }
    total
}

fn blend(base: &[DVector<f64>], other: &[DVector<f64>], w: f64) -> Vec<DVector<f64>> {
    base.iter().zip(other).map(|(a, b)| a + (b - a) * w).collect()
}

/// Iteratively re-weighted Kalman filter and smoother at fixed variances.
///
/// Each iteration linearizes the likelihood at the current fit (working
/// observation `eta + (y - mu) / mu` with variance `1 / mu` for Poisson data)
/// and runs one linear filter and smoother. A step that lowers the penalized
/// likelihood is halved until it does not. Stops when the fitted linear
/// predictor moves by less than `1e-8` or after 50 iterations; non-convergence
/// is flagged in the output.
pub fn iwkf_smooth(model: &AssembledModel, variances: &[Vec<f64>]) -> Result<SmootherOutput> {
    let ss = StateSpaceForm::new(model, variances)?;
    let n = model.n();
    let y = model.response.as_slice();
    let objective = |states: &[DVector<f64>], eta: &DVector<f64>| -> f64 {
        model.log_likelihood(eta) + log_prior(model, &ss, variances, states)
    };
    let eta_of = |states: &[DVector<f64>]| -> DVector<f64> {
        DVector::from_fn(n, |t, _| ss.observation.row(t).dot(&states[t + 1].transpose()))
    };

    let (mut working, mut obs_var): (Vec<f64>, Vec<f64>) = match model.likelihood {
        Likelihood::Poisson => y
            .iter()
            .map(|&yt| {
                let mu = yt + 0.5;
                (mu.ln() + (yt - mu) / mu, 1.0 / mu)
            })
            .unzip(),
        Likelihood::Gaussian { variance } => (y.to_vec(), vec![variance; n]),
        Likelihood::Flat => {
            return Err(DglmError::Config("the smoother needs an observation model".into()))
        }
    };
    let gaussian = matches!(model.likelihood, Likelihood::Gaussian { .. });

    let mut current: Option<(Vec<DVector<f64>>, DVector<f64>, f64)> = None;
    let mut pass;
    let mut iterations = 0;
    let mut max_change = f64::INFINITY;
    let mut converged = false;
    loop {
        iterations += 1;
        pass = gaussian_pass(&ss, &working, &obs_var)?;
        let mut states = pass.smoothed_mean.clone();
        let mut eta = eta_of(&states);
        if !gaussian {
            if let Some((prev_states, _, prev_obj)) = &current {
                let mut obj = objective(&states, &eta);
                let mut w = 1.0;
                let mut halvings = 0;
                while !(obj >= prev_obj - 1e-10 * prev_obj.abs().max(1.0)) && halvings < 30 {
                    w *= 0.5;
                    halvings += 1;
                    states = blend(prev_states, &pass.smoothed_mean, w);
                    eta = eta_of(&states);
                    obj = objective(&states, &eta);
                }
            }
        }
        let obj = if gaussian { 0.0 } else { objective(&states, &eta) };
        let mut stalled = false;
        if let Some((_, prev_eta, prev_obj)) = &current {
            max_change = (&eta - prev_eta).amax();
            stalled = (obj - prev_obj).abs() <= OBJECTIVE_TOLERANCE * (obj.abs() + 0.1);
        }
        if eta.iter().any(|e| model.likelihood.diverges(*e)) {
            return Err(DglmError::Divergence {
                t: eta.iter().position(|e| model.likelihood.diverges(*e)).unwrap_or(0) + 1,
                eta: eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            });
        }
        current = Some((states, eta, obj));
        if gaussian || max_change < TOLERANCE || stalled {
            converged = true;
            break;
        }
        if iterations >= MAX_ITERATIONS {
            break;
        }
        let eta = &current.as_ref().expect("set above").1;
        for t in 0..n {
            let mu = eta[t].exp();
            working[t] = eta[t] + (y[t] - mu) / mu;
            obs_var[t] = 1.0 / mu;
        }
    }
    let (states, eta, _) = current.expect("at least one iteration");
    let (beta, alpha) = ss.unpack(&states);
    let (beta_var, alpha_var) = ss.unpack(&pass.smoothed_var);
    let mut filtered = pass.filtered_var.clone();
    filtered[0] = ss.init_cov.diagonal();
    let (beta_filtered_var, _) = ss.unpack(&filtered);
    let edf = pass
        .eta_var
        .iter()
        .zip(&obs_var)
        .map(|(v, w)| v / w)
        .sum::<f64>();
    Ok(SmootherOutput {
        beta,
        alpha,
        beta_var,
        beta_filtered_var,
        alpha_var,
        alpha_cov: {
            let r = ss.state_dim - ss.alpha_offset;
            pass.final_cov.view((ss.alpha_offset, ss.alpha_offset), (r, r)).into_owned()
        },
        loglik: model.log_likelihood(&eta),
        eta,
        eta_var: pass.eta_var,
        converged,
        iterations,
        max_change: if gaussian { 0.0 } else { max_change },
        edf,
        working_loglik: pass.working_loglik,
        variances: variances.to_vec(),
    })
}

/// Log-spaced grid from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || points == 0 {
        return Err(DglmError::Config("variance grid needs 0 < lo <= hi and at least one point".into()));
    }
    if points == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..points)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == points - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (points - 1) as f64).exp()
            }
        })
        .collect())
}

/// Default candidate variances: `1e-8 ..= 1`, 17 log-spaced points.
pub fn default_grid() -> Vec<f64> {
    log_grid(1e-8, 1.0, 17).expect("valid default grid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AicRow {
    pub variances: Vec<Vec<f64>>,
    pub aic: f64,
    pub loglik: f64,
    pub edf: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AicSearch {
    pub table: Vec<AicRow>,
    pub best: usize,
    pub best_fit: SmootherOutput,
    /// Per block and component, whether the selected value lies on a grid end.
    pub boundary: Vec<Vec<bool>>,
}

impl AicSearch {
    pub fn best_row(&self) -> &AicRow {
        &self.table[self.best]
    }
}

/// Evaluates `iwkf_smooth` over the product of `grid` across every variance
/// component of every dynamic block and returns the AIC minimizer.
pub fn aic_search(model: &AssembledModel, grid: &[f64]) -> Result<AicSearch> {
    if grid.is_empty() || grid.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
        return Err(DglmError::Config("variance grid must be non-empty and non-negative".into()));
    }
    let dims: Vec<usize> = model.dynamic.iter().map(|b| b.q()).collect();
    let components: usize = dims.iter().sum();
    let total = grid.len().checked_pow(components as u32).ok_or_else(|| {
        DglmError::Config("variance grid is too large".into())
    })?;
    let candidates: Vec<Vec<Vec<f64>>> = (0..total)
        .map(|mut code| {
            dims.iter()
                .map(|&q| {
                    (0..q)
                        .map(|_| {
                            let v = grid[code % grid.len()];
                            code /= grid.len();
                            v
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let fits: Vec<Option<SmootherOutput>> = candidates
        .par_iter()
        .map(|v| iwkf_smooth(model, v).ok())
        .collect();
    let table: Vec<AicRow> = candidates
        .iter()
        .zip(&fits)
        .map(|(v, f)| match f {
            Some(f) => AicRow {
                variances: v.clone(),
                aic: f.aic(),
                loglik: f.loglik,
                edf: f.edf,
                converged: f.converged,
                iterations: f.iterations,
            },
            None => AicRow {
                variances: v.clone(),
                aic: f64::NAN,
                loglik: f64::NAN,
                edf: f64::NAN,
                converged: false,
                iterations: 0,
            },
        })
        .collect();
    let best = table
        .iter()
        .enumerate()
        .filter(|(_, r)| r.converged && r.aic.is_finite())
        .min_by(|a, b| a.1.aic.total_cmp(&b.1.aic))
        .map(|(i, _)| i)
        .ok_or_else(|| DglmError::Numerical("no grid point converged".into()))?;
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let boundary = table[best]
        .variances
        .iter()
        .map(|v| v.iter().map(|&x| grid.len() > 1 && (x == lo || x == hi)).collect())
        .collect();
    let best_fit = fits[best].clone().expect("converged row has a fit");
    Ok(AicSearch {
        table,
        best,
        best_fit,
        boundary,
    })
}

/// Exact posterior mean of all stacked paths and fixed effects for a Gaussian
/// likelihood, by a dense joint solve. Used to check the smoother and sampler.
pub fn dense_gaussian_posterior(model: &AssembledModel) -> Result<(Vec<DVector<f64>>, DVector<f64>)> {
    let variance = match model.likelihood {
        Likelihood::Gaussian { variance } => variance,
        _ => return Err(DglmError::Config("dense posterior needs a Gaussian likelihood".into())),
    };
    let n = model.n();
    let lens: Vec<usize> = model.dynamic.iter().map(|b| b.ar_spec.stacked_len(n)).collect();
    let r = model.fixed.len();
    let d: usize = lens.iter().sum::<usize>() + r;
    let mut prec = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    let mut x = DMatrix::zeros(n, d);
    let mut off = 0;
    for (b, &len) in model.dynamic.iter().zip(&lens) {
        let (p, q) = (b.p(), b.q());
        let k = build_precision(&b.ar_spec, n)?.to_dense();
        prec.view_mut((off, off), (len, len)).copy_from(&k);
        let ip = spd_inverse(&b.ar_spec.init_cov, "initializer covariance")?;
        let ipm = &ip * &b.ar_spec.init_mean;
        for l in 0..p {
            let s = off + l * q;
            let mut v = prec.view_mut((s, s), (q, q));
            v += &ip;
            let mut rv = rhs.rows_mut(s, q);
            rv += &ipm;
        }
        for t in 0..n {
            for j in 0..q {
                x[(t, off + (t + p) * q + j)] = b.design[(t, j)];
            }
        }
        off += len;
    }
    if r > 0 {
        let ap = spd_inverse(&model.fixed.prior_cov, "fixed-effect prior covariance")?;
        let apm = &ap * &model.fixed.prior_mean;
        let mut v = prec.view_mut((off, off), (r, r));
        v += &ap;
        let mut rv = rhs.rows_mut(off, r);
        rv += &apm;
        x.columns_mut(off, r).copy_from(&model.fixed.design);
    }
    prec += x.transpose() * &x / variance;
    rhs += x.transpose() * &model.response / variance;
    let mean = prec
        .cholesky()
        .ok_or_else(|| DglmError::NotPositiveDefinite("joint posterior precision".into()))?
        .solve(&rhs);
    let mut off = 0;
    let mut paths = Vec::new();
    for &len in &lens {
        paths.push(mean.rows(off, len).into_owned());
        off += len;
    }
    Ok((paths, mean.rows(off, r).into_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ar::{ar_recursion, ArProcessSpec, VariancePrior};
    use crate::model::{BlockRole, DynamicEffectBlock, FixedEffectBlock};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn block(spec: ArProcessSpec, n: usize) -> DynamicEffectBlock {
        let q = spec.dim;
        DynamicEffectBlock {
            name: "trend".into(),
            role: BlockRole::Trend,
            design: DMatrix::from_fn(n, q, |_, j| if j == 0 { 1.0 } else { 0.0 }),
            ar_spec: spec,
            standardization: None,
        }
    }

    fn fixed(n: usize) -> FixedEffectBlock {
        let mut f = FixedEffectBlock::empty(n);
        f.design = DMatrix::from_fn(n, 1, |t, _| ((t as f64) * 0.9).cos());
        f.names = vec!["x".into()];
        f.standardization = vec![None];
        f.prior_mean = DVector::from_element(1, 0.2);
        f.prior_cov = DMatrix::from_element(1, 1, 4.0);
        f
    }

    #[test]
    fn companion_matches_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coeffs = vec![
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]),
            DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.1, -0.4]),
        ];
        let init = DMatrix::from_fn(2, 2, |_, _| StandardNormal.sample(&mut rng));
        let innov = DMatrix::from_fn(30, 2, |_, _| StandardNormal.sample(&mut rng));
        let a = companion_path(&coeffs, &init, &innov);
        let b = ar_recursion(&coeffs, &init, &innov);
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn gaussian_smoother_matches_dense_posterior() {
        let n = 25;
        for spec in [
            ArProcessSpec::random_walk1(0.3, 1.0, 2.0, VariancePrior::Fixed),
            ArProcessSpec::random_walk2(0.05, 0.5, 3.0, VariancePrior::Fixed),
            ArProcessSpec::local_linear_trend(
                0.1,
                0.01,
                (0.0, 5.0),
                (0.0, 1.0),
                VariancePrior::Fixed,
                VariancePrior::Fixed,
            ),
        ] {
            let v: Vec<f64> = (0..spec.dim).map(|j| spec.sigma_beta[(j, j)]).collect();
            let y = DVector::from_fn(n, |t, _| (t as f64 * 0.3).sin() + 0.05 * t as f64);
            let model = AssembledModel::new(
                y,
                fixed(n),
                vec![block(spec, n)],
                Likelihood::Gaussian { variance: 0.4 },
            )
            .unwrap();
            let fit = iwkf_smooth(&model, &[v]).unwrap();
            let (paths, alpha) = dense_gaussian_posterior(&model).unwrap();
            assert!(fit.converged && fit.iterations == 1);
            assert!((&fit.beta[0] - &paths[0]).amax() < 1e-8, "{}", (&fit.beta[0] - &paths[0]).amax());
            assert!((&fit.alpha - &alpha).amax() < 1e-8);
            for (s, f) in fit.beta_var[0].iter().zip(fit.beta_filtered_var[0].iter()) {
                assert!(*s >= 0.0 && *s <= f + 1e-10);
            }
        }
    }

    #[test]
    fn vanishing_variance_gives_constant_trend() {
        let n = 40;
        let y = DVector::from_fn(n, |t, _| (3 + (t * 7) % 5) as f64);
        let spec = ArProcessSpec::random_walk1(1.0, 0.0, 1e6, VariancePrior::Fixed);
        let model = AssembledModel::new(y.clone(), FixedEffectBlock::empty(n), vec![block(spec, n)], Likelihood::Poisson).unwrap();
        let fit = iwkf_smooth(&model, &[vec![0.0]]).unwrap();
        assert!(fit.converged);
        let glm = (y.sum() / n as f64).ln();
        for t in 0..n {
            assert!((fit.eta[t] - glm).abs() < 1e-5, "{} vs {}", fit.eta[t], glm);
        }
    }

    #[test]
    fn single_point_grid_and_determinism() {
        let n = 30;
        let y = DVector::from_fn(n, |t, _| (5 + (t * 3) % 4) as f64);
        let spec = ArProcessSpec::random_walk1(0.1, 1.5, 10.0, VariancePrior::Fixed);
        let model = AssembledModel::new(y, FixedEffectBlock::empty(n), vec![block(spec, n)], Likelihood::Poisson).unwrap();
        let one = aic_search(&model, &[1e-3]).unwrap();
        assert_eq!(one.table.len(), 1);
        assert_eq!(one.best, 0);
        assert!((one.best_row().aic - one.best_fit.aic()).abs() == 0.0);
        let a = aic_search(&model, &default_grid()).unwrap();
        let b = aic_search(&model, &default_grid()).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.table.len(), 17);
    }

    #[test]
    fn grid_endpoints() {
        let g = default_grid();
        assert_eq!(g.len(), 17);
        assert_eq!(g[0], 1e-8);
        assert_eq!(g[16], 1.0);
        assert!((g[2] - 1e-7).abs() < 1e-20);
    }
}
