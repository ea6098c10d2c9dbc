//! Block Metropolis-Hastings sampler.
//!
//! One sweep updates, in order: (a) every dynamic path (initializers by an exact
//! Gibbs draw, then contiguous time blocks proposed from their conditional AR
//! prior and accepted on the likelihood ratio alone), (b) the fixed effects by
//! Gaussian random-walk Metropolis, (c) evolution variances (conjugate Gibbs or
//! random-walk Metropolis under a truncated Gaussian prior) and (d) free scalar
//! AR coefficients by Gibbs under a flat prior.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar::{
    block_conditional, conditional_system, innovations, precision_from_parts, ArPrecision,
    VariancePrior,
};
use crate::error::{DglmError, Result};
use crate::linalg::{psd_sqrt, spd_inverse};
use crate::model::{assemble_model, AssembledModel, ModelConfig, TimeSeriesDataset};

/// Target acceptance rate for the random-walk kernels during burn-in.
pub const TARGET_ACCEPTANCE: f64 = 0.4;
/// Sweeps per adaptation batch.
pub const ADAPT_BATCH: usize = 50;
/// Initial log-scale step of the path-rescaling variance update.
const RESCALE_SCALE: f64 = 0.1;
const MAX_START_ATTEMPTS: usize = 100;
const MAX_AUDIT_RECORDS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub n_burnin: usize,
    pub n_iterations: usize,
    pub thin: usize,
    /// Maximum number of time points per dynamic-path block.
    pub beta_block_size: usize,
    /// Number of fixed effects updated jointly.
    pub alpha_block_size: usize,
    /// Initial random-walk standard deviation for every fixed-effect block.
    pub alpha_scale: f64,
    /// Initial random-walk standard deviation for truncated-prior variances,
    /// relative to the starting variance.
    pub variance_scale: f64,
    pub n_chains: usize,
    pub seed: u64,
    /// Tune random-walk scales during burn-in.
    pub adapt: bool,
    /// Shuffle the kernel order every sweep instead of the fixed (a)-(d) order.
    pub random_sweep: bool,
    /// Keep a log of dynamic-path proposals for independent checking.
    pub audit: bool,
    /// After each variance update, also propose a new variance with the
    /// standardized innovations held fixed (the path is rescaled with it).
    pub rescale_variances: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            n_burnin: 40_000,
            n_iterations: 100_000,
            thin: 5,
            beta_block_size: 20,
            alpha_block_size: 1,
            alpha_scale: 0.01,
            variance_scale: 0.5,
            n_chains: 2,
            seed: 1,
            adapt: true,
            random_sweep: false,
            audit: false,
            rescale_variances: true,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.thin < 1 {
            return Err(DglmError::Config("sampler.thin must be >= 1".into()));
        }
        if self.beta_block_size < 1 || self.alpha_block_size < 1 {
            return Err(DglmError::Config("sampler block sizes must be >= 1".into()));
        }
        if self.n_chains < 1 {
            return Err(DglmError::Config("sampler.n_chains must be >= 1".into()));
        }
        if !(self.alpha_scale > 0.0) || !(self.variance_scale > 0.0) {
            return Err(DglmError::Config("sampler proposal scales must be positive".into()));
        }
        Ok(())
    }

    /// Draws kept per chain.
    pub fn retained_draws(&self) -> usize {
        self.n_iterations / self.thin
    }
}

/// Current values of every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// Stacked path per dynamic block (`beta_{-p+1}, ..., beta_n`).
    pub betas: Vec<DVector<f64>>,
    pub alpha: DVector<f64>,
    /// Diagonal evolution variances per dynamic block.
    pub variances: Vec<Vec<f64>>,
    /// Free AR coefficients per block (empty when fixed).
    pub coefficients: Vec<Vec<f64>>,
    /// Cached linear predictor.
    pub eta: DVector<f64>,
    /// Cached log likelihood at `eta`.
    pub log_lik: f64,
}

/// Row-major store of retained draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawMatrix {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl DrawMatrix {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn with_capacity(dim: usize, draws: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * draws),
        }
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }

    pub fn n_draws(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|i| self.data[i * self.dim + j]).collect()
    }

    pub fn column_mean(&self, j: usize) -> f64 {
        let n = self.n_draws();
        (0..n).map(|i| self.data[i * self.dim + j]).sum::<f64>() / n as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counter {
    pub accepted: u64,
    pub proposed: u64,
}

impl Counter {
    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += accepted as u64;
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Acceptance counts per kernel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    pub beta: Vec<Counter>,
    pub alpha: Vec<Counter>,
    /// Random-walk variance updates per block and component.
    pub variance: Vec<Vec<Counter>>,
    /// Path-rescaling variance updates per block and component.
    pub rescale: Vec<Vec<Counter>>,
    /// Proposals rejected because the linear predictor diverged.
    pub divergences: u64,
}

impl KernelStats {
    pub fn new(n_blocks: usize, n_alpha_blocks: usize, dims: &[usize]) -> Self {
        Self {
            beta: vec![Counter::default(); n_blocks],
            alpha: vec![Counter::default(); n_alpha_blocks],
            variance: dims.iter().map(|&q| vec![Counter::default(); q]).collect(),
            rescale: dims.iter().map(|&q| vec![Counter::default(); q]).collect(),
            divergences: 0,
        }
    }
}

/// One logged dynamic-path proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaProposalRecord {
    pub block: usize,
    pub range: (usize, usize),
    /// Responses on `range` (1-based, inclusive).
    pub y: Vec<f64>,
    pub eta_current: Vec<f64>,
    pub eta_proposed: Vec<f64>,
    /// Log acceptance ratio used by the sampler.
    pub log_ratio: f64,
    pub accepted: bool,
}

/// Retained output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSamples {
    pub chain: usize,
    pub seed: u64,
    /// Stacked paths per dynamic block.
    pub beta: Vec<DrawMatrix>,
    pub alpha: DrawMatrix,
    pub variances: Vec<DrawMatrix>,
    pub coefficients: Vec<DrawMatrix>,
    pub log_lik: Vec<f64>,
    /// Posterior mean of the linear predictor.
    pub eta_mean: Vec<f64>,
    /// Acceptance counts after burn-in.
    pub stats: KernelStats,
    /// Final random-walk scales (fixed-effect blocks, then variances).
    pub alpha_scales: Vec<f64>,
    pub variance_scales: Vec<Vec<f64>>,
    pub audit: Vec<BetaProposalRecord>,
}

/// Draws from all chains plus run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub chains: Vec<ChainSamples>,
    pub settings: SamplerSettings,
    pub model_id: Option<u8>,
    pub block_names: Vec<String>,
    pub fixed_names: Vec<String>,
    pub n: usize,
}

impl PosteriorSamples {
    pub fn retained_per_chain(&self) -> usize {
        self.chains.first().map_or(0, |c| c.log_lik.len())
    }
}

/// Per-block quantities that do not change during a run.
#[derive(Debug, Clone)]
struct BlockSetup {
    p: usize,
    q: usize,
    init_prec: DMatrix<f64>,
    init_prec_mean: DVector<f64>,
    priors: Vec<VariancePrior>,
    free: bool,
}

/// Kernels bound to one assembled model.
pub struct Sampler<'a> {
    model: &'a AssembledModel,
    settings: SamplerSettings,
    blocks: Vec<BlockSetup>,
    alpha_blocks: Vec<Range<usize>>,
    alpha_prec: DMatrix<f64>,
    alpha_scales: Vec<f64>,
    variance_scales: Vec<Vec<f64>>,
    rescale_scales: Vec<Vec<f64>>,
    pub stats: KernelStats,
    batch: KernelStats,
    batches_done: usize,
    audit: Vec<BetaProposalRecord>,
}

fn diag_inverse(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(v.len(), v.iter().map(|x| 1.0 / x)))
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a AssembledModel, settings: SamplerSettings) -> Result<Self> {
        settings.validate()?;
        let mut blocks = Vec::with_capacity(model.dynamic.len());
        for b in &model.dynamic {
            let spec = &b.ar_spec;
            let sigma = &spec.sigma_beta;
            for i in 0..spec.dim {
                for j in 0..spec.dim {
                    if i != j && sigma[(i, j)] != 0.0 {
                        return Err(DglmError::Config(format!(
                            "block `{}`: the sampler needs a diagonal evolution covariance",
                            b.name
                        )));
                    }
                }
                if !(sigma[(i, i)] > 0.0) {
                    return Err(DglmError::Config(format!(
                        "block `{}`: evolution variances must be positive",
                        b.name
                    )));
                }
            }
            let init_prec = spd_inverse(&spec.init_cov, "initializer covariance")?;
            let init_prec_mean = &init_prec * &spec.init_mean;
            blocks.push(BlockSetup {
                p: spec.order,
                q: spec.dim,
                init_prec,
                init_prec_mean,
                priors: spec.variance_priors.clone(),
                free: spec.free_coefficients,
            });
        }
        let r = model.fixed.len();
        let alpha_blocks: Vec<Range<usize>> = (0..r)
            .step_by(settings.alpha_block_size)
            .map(|s| s..(s + settings.alpha_block_size).min(r))
            .collect();
        let alpha_prec = if r > 0 {
            spd_inverse(&model.fixed.prior_cov, "fixed-effect prior covariance")?
        } else {
            DMatrix::zeros(0, 0)
        };
        let dims: Vec<usize> = blocks.iter().map(|b| b.q).collect();
        let stats = KernelStats::new(blocks.len(), alpha_blocks.len(), &dims);
        Ok(Self {
            model,
            alpha_scales: vec![settings.alpha_scale; alpha_blocks.len()],
            variance_scales: dims.iter().map(|&q| vec![0.0; q]).collect(),
            rescale_scales: dims.iter().map(|&q| vec![RESCALE_SCALE; q]).collect(),
            batch: stats.clone(),
            stats,
            settings,
            blocks,
            alpha_blocks,
            alpha_prec,
            batches_done: 0,
            audit: Vec::new(),
        })
    }

    pub fn model(&self) -> &AssembledModel {
        self.model
    }

    pub fn audit_log(&self) -> &[BetaProposalRecord] {
        &self.audit
    }

    pub fn alpha_scales(&self) -> &[f64] {
        &self.alpha_scales
    }

    pub fn alpha_blocks(&self) -> &[Range<usize>] {
        &self.alpha_blocks
    }

    /// Builds a state from explicit parameter values, computing the cached
    /// linear predictor and likelihood.
    pub fn state_from(
        &self,
        betas: Vec<DVector<f64>>,
        alpha: DVector<f64>,
        variances: Vec<Vec<f64>>,
        coefficients: Vec<Vec<f64>>,
    ) -> Result<ChainState> {
        if variances.len() != self.blocks.len() || coefficients.len() != self.blocks.len() {
            return Err(DglmError::Dimension("one variance and coefficient set per block".into()));
        }
        for (b, (v, c)) in self.blocks.iter().zip(variances.iter().zip(&coefficients)) {
            if v.len() != b.q || v.iter().any(|x| !(*x > 0.0)) {
                return Err(DglmError::Config("variances must be positive, one per component".into()));
            }
            if (b.free && c.len() != b.p) || (!b.free && !c.is_empty()) {
                return Err(DglmError::Dimension("free coefficient count mismatch".into()));
            }
        }
        let eta = self.model.linear_predictor(&betas, &alpha)?;
        let log_lik = self.model.log_likelihood(&eta);
        Ok(ChainState {
            betas,
            alpha,
            variances,
            coefficients,
            eta,
            log_lik,
        })
    }

    fn coefficient_matrices(&self, state: &ChainState, b: usize) -> Vec<DMatrix<f64>> {
        if self.blocks[b].free {
            state.coefficients[b]
                .iter()
                .map(|&f| DMatrix::from_element(1, 1, f))
                .collect()
        } else {
            self.model.dynamic[b].ar_spec.coefficients.clone()
        }
    }

    /// AR prior precision of block `b` at the current variances and coefficients.
    pub fn precision(&self, state: &ChainState, b: usize) -> ArPrecision {
        let coeffs = self.coefficient_matrices(state, b);
        precision_from_parts(&coeffs, &diag_inverse(&state.variances[b]), self.model.n())
    }

    /// Overdispersed starting values: Student-t(4) around each prior location.
    ///
    /// Scales are the prior scales, capped so that a unit-scale draw moves the
    /// linear predictor by at most one unit; dynamic paths start on the
    /// zero-innovation recursion from a common initializer draw.
    pub fn initial_state<R: Rng>(&self, rng: &mut R) -> Result<ChainState> {
        let t4 = StudentT::new(4.0).expect("valid degrees of freedom");
        let mut last_err = None;
        for _ in 0..MAX_START_ATTEMPTS {
            match self.try_initial_state(rng, &t4) {
                Ok(s) if s.log_lik.is_finite() => return Ok(s),
                Ok(_) => last_err = Some(DglmError::Numerical("non-finite start".into())),
                Err(e) => last_err = Some(e),
            }
        }
        Err(DglmError::Numerical(format!(
            "no finite starting point after {MAX_START_ATTEMPTS} attempts: {}",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        )))
    }

    fn try_initial_state<R: Rng>(&self, rng: &mut R, t4: &StudentT<f64>) -> Result<ChainState> {
        let n = self.model.n();
        let fixed = &self.model.fixed;
        let alpha = DVector::from_fn(fixed.len(), |j, _| {
            let sd = fixed.prior_cov[(j, j)].sqrt().min(1.0);
            fixed.prior_mean[j] + sd * t4.sample(rng)
        });
        let mut betas = Vec::with_capacity(self.blocks.len());
        let mut variances = Vec::with_capacity(self.blocks.len());
        let mut coefficients = Vec::with_capacity(self.blocks.len());
        for (b, setup) in self.blocks.iter().enumerate() {
            let spec = &self.model.dynamic[b].ar_spec;
            let (p, q) = (setup.p, setup.q);
            let coeffs = if setup.free {
                coefficients.push(spec.coefficients.iter().map(|f| f[(0, 0)]).collect());
                spec.coefficients.clone()
            } else {
                coefficients.push(Vec::new());
                spec.coefficients.clone()
            };
            // Response of the zero-innovation path to a unit change in each
            // component of the common initializer.
            let design = &self.model.dynamic[b].design;
            let mut start = DVector::zeros(q);
            for j in 0..q {
                let mut unit = DMatrix::zeros(p, q);
                unit.column_mut(j).fill(1.0);
                let path = crate::ar::ar_recursion(&coeffs, &unit, &DMatrix::zeros(n, q));
                let reach = (0..n)
                    .map(|t| {
                        (0..q)
                            .map(|i| design[(t, i)] * path[(t + p, i)])
                            .sum::<f64>()
                            .abs()
                    })
                    .fold(0.0, f64::max)
                    .max(1.0);
                let sd = spec.init_cov[(j, j)].sqrt().min(1.0 / reach);
                start[j] = spec.init_mean[j] + sd * t4.sample(rng);
            }
            let init = DMatrix::from_fn(p, q, |_, j| start[j]);
            let path = crate::ar::ar_recursion(&coeffs, &init, &DMatrix::zeros(n, q));
            betas.push(DVector::from_iterator((n + p) * q, path.transpose().iter().copied()));

            let mut v = Vec::with_capacity(q);
            for j in 0..q {
                let current = spec.sigma_beta[(j, j)];
                let draw = match setup.priors[j] {
                    VariancePrior::TruncatedGaussian { variance } => {
                        (variance.sqrt() * t4.sample(rng)).abs()
                    }
                    VariancePrior::InverseGamma { shape, scale } if scale > 0.0 => {
                        let g = Gamma::new(shape, 1.0 / scale)
                            .map_err(|e| DglmError::Config(e.to_string()))?;
                        1.0 / g.sample(rng)
                    }
                    _ => current,
                };
                if !(draw > 0.0 && draw.is_finite()) {
                    return Err(DglmError::Numerical("non-positive starting variance".into()));
                }
                v.push(draw);
            }
            variances.push(v);
        }
        self.state_from(betas, alpha, variances, coefficients)
    }

    /// One full sweep of all kernels.
    pub fn sweep<R: Rng>(&mut self, state: &mut ChainState, rng: &mut R) -> Result<()> {
        let mut order = [0u8, 1, 2, 3];
        if self.settings.random_sweep {
            order.shuffle(rng);
        }
        for kernel in order {
            match kernel {
                0 => {
                    for b in 0..self.blocks.len() {
                        self.sample_beta(state, b, rng)?;
                    }
                }
                1 => self.sample_alpha(state, rng)?,
                2 => {
                    for b in 0..self.blocks.len() {
                        self.sample_variance(state, b, rng)?;
                        if self.settings.rescale_variances {
                            self.rescale_variance(state, b, rng)?;
                        }
                    }
                }
                _ => {
                    for b in 0..self.blocks.len() {
                        if self.blocks[b].free {
                            self.sample_coefficients(state, b, rng)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Exact Gibbs draw of the initializers of block `b` given the rest of the path.
    pub fn sample_initializers<R: Rng>(
        &mut self,
        state: &mut ChainState,
        b: usize,
        k: &ArPrecision,
        rng: &mut R,
    ) -> Result<()> {
        let (mean, factor) = initializer_system(k, &state.betas[b], &self.blocks[b])?;
        let mut z: Vec<f64> = (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect();
        factor.solve_upper_in_place(&mut z);
        for (i, (m, e)) in mean.iter().zip(z).enumerate() {
            state.betas[b][i] = m + e;
        }
        Ok(())
    }

    /// Dynamic path of block `b`: initializers, then random-length blocks over `1..=n`.
    pub fn sample_beta<R: Rng>(&mut self, state: &mut ChainState, b: usize, rng: &mut R) -> Result<()> {
        let k = self.precision(state, b);
        self.sample_initializers(state, b, &k, rng)?;
        let n = self.model.n();
        let g = self.settings.beta_block_size;
        let mut len = rng.random_range(1..=g);
        let mut r = 1usize;
        while r <= n {
            let s = (r + len - 1).min(n);
            self.propose_beta_block(state, b, &k, r, s, rng)?;
            r = s + 1;
            len = g;
        }
        Ok(())
    }

    /// One conditional-prior proposal for `beta_r..beta_s` (1-based, inclusive).
    pub fn propose_beta_block<R: Rng>(
        &mut self,
        state: &mut ChainState,
        b: usize,
        k: &ArPrecision,
        r: usize,
        s: usize,
        rng: &mut R,
    ) -> Result<bool> {
        let cond = block_conditional(k, state.betas[b].as_slice(), r as i64, s as i64)?;
        let proposal = cond.draw(rng);
        let block = &self.model.dynamic[b];
        let (p, q) = (block.p(), block.q());
        let lik = self.model.likelihood;
        let mut eta_new = Vec::with_capacity(s - r + 1);
        let mut log_ratio = 0.0;
        let mut diverged = false;
        for t in r..=s {
            let row = t - 1;
            let base = (t + p - 1) * q;
            let local = (t - r) * q;
            let mut delta = 0.0;
            for j in 0..q {
                delta += block.design[(row, j)] * (proposal[local + j] - state.betas[b][base + j]);
            }
            let e = state.eta[row] + delta;
            if lik.diverges(e) {
                diverged = true;
            }
            let lf = self.model.log_factorial[row];
            let y = self.model.response[row];
            log_ratio += lik.log_density(y, e, lf) - lik.log_density(y, state.eta[row], lf);
            eta_new.push(e);
        }
        let accepted = if diverged {
            self.stats.divergences += 1;
            false
        } else {
            log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
        };
        if self.settings.audit && self.audit.len() < MAX_AUDIT_RECORDS {
            self.audit.push(BetaProposalRecord {
                block: b,
                range: (r, s),
                y: self.model.response.as_slice()[r - 1..s].to_vec(),
                eta_current: state.eta.as_slice()[r - 1..s].to_vec(),
                eta_proposed: eta_new.clone(),
                log_ratio,
                accepted,
            });
        }
        self.stats.beta[b].record(accepted);
        self.batch.beta[b].record(accepted);
        if accepted {
            let start = (r + p - 1) * q;
            state.betas[b].as_mut_slice()[start..start + proposal.len()]
                .copy_from_slice(proposal.as_slice());
            state.eta.as_mut_slice()[r - 1..s].copy_from_slice(&eta_new);
            state.log_lik += log_ratio;
        }
        Ok(accepted)
    }

    fn alpha_log_prior(&self, alpha: &DVector<f64>) -> f64 {
        let d = alpha - &self.model.fixed.prior_mean;
        -0.5 * d.dot(&(&self.alpha_prec * &d))
    }

    /// Random-walk Metropolis over each fixed-effect block.
    pub fn sample_alpha<R: Rng>(&mut self, state: &mut ChainState, rng: &mut R) -> Result<()> {
        let n = self.model.n();
        let z = &self.model.fixed.design;
        let lik = self.model.likelihood;
        for (ib, range) in self.alpha_blocks.clone().into_iter().enumerate() {
            let scale = self.alpha_scales[ib];
            let step: Vec<f64> = range
                .clone()
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut proposal = state.alpha.clone();
            for (k, j) in range.clone().enumerate() {
                proposal[j] += step[k];
            }
            let mut eta_new = state.eta.clone();
            let mut diverged = false;
            for t in 0..n {
                let mut d = 0.0;
                for (k, j) in range.clone().enumerate() {
                    d += z[(t, j)] * step[k];
                }
                eta_new[t] += d;
                if lik.diverges(eta_new[t]) {
                    diverged = true;
                }
            }
            let accepted = if diverged {
                self.stats.divergences += 1;
                false
            } else {
                let new_lik = self.model.log_likelihood(&eta_new);
                let log_ratio = new_lik - state.log_lik + self.alpha_log_prior(&proposal)
                    - self.alpha_log_prior(&state.alpha);
                let ok = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
                if ok {
                    state.alpha = proposal;
                    state.eta = eta_new;
                    state.log_lik = new_lik;
                }
                ok
            };
            self.stats.alpha[ib].record(accepted);
            self.batch.alpha[ib].record(accepted);
        }
        Ok(())
    }

    /// Evolution variances of block `b`, one diagonal component at a time.
    pub fn sample_variance<R: Rng>(&mut self, state: &mut ChainState, b: usize, rng: &mut R) -> Result<()> {
        let n = self.model.n();
        let coeffs = self.coefficient_matrices(state, b);
        let e = innovations(&coeffs, state.betas[b].as_slice(), n);
        for j in 0..self.blocks[b].q {
            let ss: f64 = e.column(j).iter().map(|v| v * v).sum();
            let current = state.variances[b][j];
            match self.blocks[b].priors[j] {
                VariancePrior::InverseGamma { shape, scale } => {
                    state.variances[b][j] = draw_inverse_gamma_posterior(shape, scale, n, ss, rng)?;
                }
                VariancePrior::TruncatedGaussian { variance } => {
                    // Scales start relative to the first value seen.
                    if self.variance_scales[b][j] == 0.0 {
                        self.variance_scales[b][j] = self.settings.variance_scale * current;
                    }
                    let step = self.variance_scales[b][j] * rng.sample::<f64, _>(StandardNormal);
                    let (next, accepted) =
                        truncated_variance_step(current, step, variance, n, ss, rng);
                    state.variances[b][j] = next;
                    self.stats.variance[b][j].record(accepted);
                    self.batch.variance[b][j].record(accepted);
                }
                VariancePrior::Fixed => {}
            }
        }
        Ok(())
    }

    /// Random-walk Metropolis on `log variance` with the standardized
    /// innovations `e_t / sd` and the initializers held fixed, so the path is
    /// rebuilt from rescaled innovations. The innovation prior cancels and the
    /// ratio is likelihood times variance prior times the log-scale Jacobian.
    pub fn rescale_variance<R: Rng>(&mut self, state: &mut ChainState, b: usize, rng: &mut R) -> Result<()> {
        let n = self.model.n();
        let (p, q) = (self.blocks[b].p, self.blocks[b].q);
        let coeffs = self.coefficient_matrices(state, b);
        let design = &self.model.dynamic[b].design;
        let lik = self.model.likelihood;
        for j in 0..q {
            let prior = self.blocks[b].priors[j];
            if matches!(prior, VariancePrior::Fixed) {
                continue;
            }
            let current = state.variances[b][j];
            let log_step = self.rescale_scales[b][j] * rng.sample::<f64, _>(StandardNormal);
            let proposal = current * log_step.exp();
            let gain = (0.5 * log_step).exp() - 1.0;
            // Path change d_t = gain * e_tj * u_j + sum_l F_l d_{t-l}, zero
            // on the initializers.
            let beta = state.betas[b].as_slice();
            let mut delta = vec![0.0; (n + p) * q];
            let mut eta = state.eta.clone();
            let mut diverged = false;
            for t in p..n + p {
                let mut e = beta[t * q + j];
                for (l, f) in coeffs.iter().enumerate() {
                    let prev = (t - 1 - l) * q;
                    for i in 0..q {
                        e -= f[(j, i)] * beta[prev + i];
                    }
                }
                for r in 0..q {
                    let mut d = if r == j { gain * e } else { 0.0 };
                    for (l, f) in coeffs.iter().enumerate() {
                        let prev = (t - 1 - l) * q;
                        for i in 0..q {
                            d += f[(r, i)] * delta[prev + i];
                        }
                    }
                    delta[t * q + r] = d;
                    eta[t - p] += design[(t - p, r)] * d;
                }
                diverged |= lik.diverges(eta[t - p]);
            }
            let accepted = if diverged {
                self.stats.divergences += 1;
                false
            } else {
                let log_lik = self.model.log_likelihood(&eta);
                let log_ratio = log_lik - state.log_lik + prior.log_density(proposal)
                    - prior.log_density(current)
                    + log_step;
                let accepted = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
                if accepted {
                    for (x, d) in state.betas[b].iter_mut().zip(&delta) {
                        *x += d;
                    }
                    state.variances[b][j] = proposal;
                    state.eta = eta;
                    state.log_lik = log_lik;
                }
                accepted
            };
            self.stats.rescale[b][j].record(accepted);
            self.batch.rescale[b][j].record(accepted);
        }
        Ok(())
    }

    /// Free AR coefficients of block `b` from their Gaussian full conditional.
    pub fn sample_coefficients<R: Rng>(
        &mut self,
        state: &mut ChainState,
        b: usize,
        rng: &mut R,
    ) -> Result<()> {
        let (mean, cov) = coefficient_full_conditional(
            state.betas[b].as_slice(),
            self.blocks[b].p,
            state.variances[b][0],
        )?;
        let root = psd_sqrt(&cov);
        let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let draw = mean + root * z;
        state.coefficients[b] = draw.iter().copied().collect();
        Ok(())
    }

    /// Robbins-Monro update of the random-walk scales from the last batch.
    fn adapt(&mut self) {
        self.batches_done += 1;
        let gain = 2.0 / (self.batches_done as f64).sqrt();
        for (ib, c) in self.batch.alpha.iter().enumerate() {
            if c.proposed > 0 {
                self.alpha_scales[ib] *= (gain * (c.rate() - TARGET_ACCEPTANCE)).exp();
            }
        }
        for (b, comps) in self.batch.variance.iter().enumerate() {
            for (j, c) in comps.iter().enumerate() {
                if c.proposed > 0 {
                    self.variance_scales[b][j] *= (gain * (c.rate() - TARGET_ACCEPTANCE)).exp();
                }
            }
        }
        for (b, comps) in self.batch.rescale.iter().enumerate() {
            for (j, c) in comps.iter().enumerate() {
                if c.proposed > 0 {
                    self.rescale_scales[b][j] *= (gain * (c.rate() - TARGET_ACCEPTANCE)).exp();
                }
            }
        }
        let dims: Vec<usize> = self.blocks.iter().map(|b| b.q).collect();
        self.batch = KernelStats::new(self.blocks.len(), self.alpha_blocks.len(), &dims);
    }

    /// Unnormalized log posterior (constants dropped), for audits.
    pub fn log_posterior(&self, state: &ChainState) -> f64 {
        let n = self.model.n() as f64;
        let mut total = self.model.log_likelihood(&state.eta);
        if !self.model.fixed.is_empty() {
            total += self.alpha_log_prior(&state.alpha);
        }
        for (b, setup) in self.blocks.iter().enumerate() {
            let k = self.precision(state, b);
            total += -0.5 * k.band().quad_form(state.betas[b].as_slice());
            for (j, &v) in state.variances[b].iter().enumerate() {
                total += -0.5 * n * v.ln() + setup.priors[j].log_density(v);
            }
            let spec = &self.model.dynamic[b].ar_spec;
            for l in 0..setup.p {
                let x = DVector::from_column_slice(&state.betas[b].as_slice()[l * setup.q..(l + 1) * setup.q]);
                let d = x - &spec.init_mean;
                total += -0.5 * d.dot(&(&setup.init_prec * &d));
            }
        }
        total
    }

    /// Checks the cached predictor and likelihood against a fresh computation.
    pub fn audit_cache(&self, state: &ChainState) -> Result<()> {
        let eta = self.model.eta_unchecked(&state.betas, &state.alpha);
        let worst = (&eta - &state.eta).amax();
        let lik = self.model.log_likelihood(&eta);
        let tol = 1e-8 * (1.0 + lik.abs());
        if worst > 1e-8 || (lik - state.log_lik).abs() > tol {
            return Err(DglmError::Numerical(format!(
                "cached state drifted: |d eta| = {worst:e}, d loglik = {:e}",
                lik - state.log_lik
            )));
        }
        Ok(())
    }
}

fn initializer_system(
    k: &ArPrecision,
    beta: &DVector<f64>,
    setup: &BlockSetup,
) -> Result<(DVector<f64>, crate::linalg::BandCholesky)> {
    let (p, q) = (setup.p, setup.q);
    let (mut sub, mut rhs) = conditional_system(k, beta.as_slice(), 0, p * q);
    for l in 0..p {
        for i in 0..q {
            for j in 0..=i {
                sub.add(l * q + i, l * q + j, setup.init_prec[(i, j)]);
            }
            rhs[l * q + i] += setup.init_prec_mean[i];
        }
    }
    let factor = sub.cholesky()?;
    let mean = DVector::from_vec(factor.solve(&rhs));
    Ok((mean, factor))
}

/// Mean and covariance of the initializers given the rest of the path, under
/// the AR prior `k` and independent `N(init_mean, init_cov)` initializer priors.
pub fn initializer_full_conditional(
    k: &ArPrecision,
    beta: &[f64],
    init_mean: &DVector<f64>,
    init_cov: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let init_prec = spd_inverse(init_cov, "initializer covariance")?;
    let setup = BlockSetup {
        p: k.order,
        q: k.block_size,
        init_prec_mean: &init_prec * init_mean,
        init_prec,
        priors: Vec::new(),
        free: false,
    };
    let (mean, factor) = initializer_system(k, &DVector::from_column_slice(beta), &setup)?;
    Ok((mean, factor.inverse()))
}

/// Draw from `IG(shape + n/2, scale + ss/2)`, the conjugate update of an
/// `IG(shape, scale)` prior given `n` innovations with sum of squares `ss`.
pub fn draw_inverse_gamma_posterior<R: Rng + ?Sized>(
    shape: f64,
    scale: f64,
    n: usize,
    ss: f64,
    rng: &mut R,
) -> Result<f64> {
    let a = shape + 0.5 * n as f64;
    let b = scale + 0.5 * ss;
    if !(b > 0.0) {
        return Err(DglmError::Numerical(
            "inverse-gamma posterior scale is zero (all innovations zero and zero prior scale)".into(),
        ));
    }
    let g = Gamma::new(a, 1.0 / b).map_err(|e| DglmError::Numerical(e.to_string()))?;
    Ok(1.0 / g.sample(rng))
}

/// Log target of an evolution variance under the truncated Gaussian prior
/// `N(0, g)` on `(0, inf)` with `n` innovations of sum of squares `ss`.
pub fn truncated_variance_log_target(sigma2: f64, g: f64, n: usize, ss: f64) -> f64 {
    if !(sigma2 > 0.0) {
        return f64::NEG_INFINITY;
    }
    -0.5 * sigma2 * sigma2 / g - 0.5 * n as f64 * sigma2.ln() - 0.5 * ss / sigma2
}

/// One random-walk Metropolis step for a truncated-prior variance; proposals
/// outside `(0, inf)` are rejected.
pub fn truncated_variance_step<R: Rng + ?Sized>(
    current: f64,
    step: f64,
    g: f64,
    n: usize,
    ss: f64,
    rng: &mut R,
) -> (f64, bool) {
    let proposal = current + step;
    if !(proposal > 0.0) {
        return (current, false);
    }
    let log_ratio = truncated_variance_log_target(proposal, g, n, ss)
        - truncated_variance_log_target(current, g, n, ss);
    if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
        (proposal, true)
    } else {
        (current, false)
    }
}

/// Gaussian full conditional of free scalar AR coefficients under a flat prior:
/// the least-squares regression of `beta_t` on its `p` lags, `t = 1..n`.
pub fn coefficient_full_conditional(
    beta: &[f64],
    p: usize,
    sigma2: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if p == 0 || beta.len() <= p {
        return Err(DglmError::Dimension("path too short for AR coefficients".into()));
    }
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    for t in p..beta.len() {
        for a in 0..p {
            xty[a] += beta[t - 1 - a] * beta[t];
            for c in 0..p {
                xtx[(a, c)] += beta[t - 1 - a] * beta[t - 1 - c];
            }
        }
    }
    if p == 1 {
        if xtx[(0, 0)] == 0.0 {
            return Err(DglmError::Numerical(
                "AR coefficient conditional undefined: all lagged values are zero".into(),
            ));
        }
        let mean = DVector::from_element(1, xty[0] / xtx[(0, 0)]);
        return Ok((mean, DMatrix::from_element(1, 1, sigma2 / xtx[(0, 0)])));
    }
    let inv = xtx.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| {
        DglmError::Numerical("AR coefficient conditional undefined: lagged values are collinear".into())
    })?;
    let mean = &inv * xty;
    Ok((mean, inv * sigma2))
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Runs one chain on an assembled model.
pub fn run_single_chain(
    model: &AssembledModel,
    settings: &SamplerSettings,
    chain: usize,
) -> Result<ChainSamples> {
    let mut rng = chain_rng(settings.seed, chain);
    let mut sampler = Sampler::new(model, settings.clone())?;
    let mut state = sampler.initial_state(&mut rng)?;
    run_from_state(&mut sampler, &mut state, &mut rng, chain)
}

/// Runs burn-in and sampling from `state` with an existing sampler.
pub fn run_from_state<R: Rng>(
    sampler: &mut Sampler<'_>,
    state: &mut ChainState,
    rng: &mut R,
    chain: usize,
) -> Result<ChainSamples> {
    let settings = sampler.settings.clone();
    let model = sampler.model;
    let n = model.n();
    for it in 1..=settings.n_burnin {
        sampler.sweep(state, rng)?;
        if settings.adapt && it % ADAPT_BATCH == 0 {
            sampler.adapt();
        }
        if cfg!(debug_assertions) && it % 1000 == 0 {
            sampler.audit_cache(state)?;
        }
    }
    let dims: Vec<usize> = sampler.blocks.iter().map(|b| b.q).collect();
    sampler.stats = KernelStats::new(sampler.blocks.len(), sampler.alpha_blocks.len(), &dims);

    let keep = settings.retained_draws();
    let mut beta: Vec<DrawMatrix> = state
        .betas
        .iter()
        .map(|b| DrawMatrix::with_capacity(b.len(), keep))
        .collect();
    let mut alpha = DrawMatrix::with_capacity(model.fixed.len(), keep);
    let mut variances: Vec<DrawMatrix> = dims.iter().map(|&q| DrawMatrix::with_capacity(q, keep)).collect();
    let mut coefficients: Vec<DrawMatrix> = state
        .coefficients
        .iter()
        .map(|c| DrawMatrix::with_capacity(c.len(), keep))
        .collect();
    let mut log_lik = Vec::with_capacity(keep);
    let mut eta_sum = vec![0.0; n];
    for it in 1..=settings.n_iterations {
        sampler.sweep(state, rng)?;
        if cfg!(debug_assertions) && it % 1000 == 0 {
            sampler.audit_cache(state)?;
        }
        if it % settings.thin == 0 {
            for (m, b) in beta.iter_mut().zip(&state.betas) {
                m.push(b.as_slice());
            }
            alpha.push(state.alpha.as_slice());
            for (m, v) in variances.iter_mut().zip(&state.variances) {
                m.push(v);
            }
            for (m, c) in coefficients.iter_mut().zip(&state.coefficients) {
                m.push(c);
            }
            log_lik.push(state.log_lik);
            for (s, e) in eta_sum.iter_mut().zip(state.eta.iter()) {
                *s += e;
            }
        }
    }
    let kept = log_lik.len().max(1) as f64;
    Ok(ChainSamples {
        chain,
        seed: settings.seed,
        beta,
        alpha,
        variances,
        coefficients,
        log_lik,
        eta_mean: eta_sum.into_iter().map(|s| s / kept).collect(),
        stats: sampler.stats.clone(),
        alpha_scales: sampler.alpha_scales.clone(),
        variance_scales: sampler.variance_scales.clone(),
        audit: std::mem::take(&mut sampler.audit),
    })
}

/// Runs `settings.n_chains` chains in parallel on an assembled model.
pub fn run_model(model: &AssembledModel, settings: &SamplerSettings) -> Result<PosteriorSamples> {
    settings.validate()?;
    let chains: Vec<ChainSamples> = (0..settings.n_chains)
        .into_par_iter()
        .map(|c| run_single_chain(model, settings, c))
        .collect::<Result<_>>()?;
    Ok(PosteriorSamples {
        chains,
        settings: settings.clone(),
        model_id: model.model_id,
        block_names: model.dynamic.iter().map(|b| b.name.clone()).collect(),
        fixed_names: model.fixed.names.clone(),
        n: model.n(),
    })
}

/// Assembles `config` on `dataset` and samples its posterior.
pub fn run_chain(
    dataset: &TimeSeriesDataset,
    config: &ModelConfig,
    settings: &SamplerSettings,
) -> Result<(AssembledModel, PosteriorSamples)> {
    let model = assemble_model(dataset, config)?;
    let samples = run_model(&model, settings)?;
    Ok((model, samples))
}
