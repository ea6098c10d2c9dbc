//! Model family: Poisson counts with a log-linear predictor made of fixed effects
//! and dynamic (AR-process) coefficients.
//!
//! `ln mu_t = sum_blocks x_t^T beta_t + z_t^T alpha`, `y_t ~ Poisson(mu_t)`.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::ar::{ArProcessSpec, VariancePrior};
use crate::error::{DglmError, Result};
use crate::spline::ncs_basis;

/// Covariate key of the pollutant series.
pub const POLLUTANT: &str = "pm10";
/// Covariate key of the temperature series.
pub const TEMPERATURE: &str = "temperature";

/// Linear predictors above this are treated as divergent (`exp` overflows near 709.8).
pub const ETA_LIMIT: f64 = 700.0;

/// Daily counts with aligned covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    /// Date of the first row; rows are consecutive days.
    pub start_date: Option<NaiveDate>,
    pub counts: Vec<u64>,
    pub covariates: BTreeMap<String, Vec<f64>>,
}

impl TimeSeriesDataset {
    pub fn new(
        counts: Vec<u64>,
        covariates: BTreeMap<String, Vec<f64>>,
        start_date: Option<NaiveDate>,
    ) -> Result<Self> {
        if counts.is_empty() {
            return Err(DglmError::Data("dataset must contain at least one day".into()));
        }
        for (name, series) in &covariates {
            if series.len() != counts.len() {
                return Err(DglmError::Data(format!(
                    "covariate `{name}` has {} values but there are {} counts",
                    series.len(),
                    counts.len()
                )));
            }
            if let Some(i) = series.iter().position(|v| !v.is_finite()) {
                return Err(DglmError::DataRow {
                    row: i + 1,
                    column: name.clone(),
                    message: "non-finite value".into(),
                });
            }
        }
        Ok(Self {
            start_date,
            counts,
            covariates,
        })
    }

    pub fn n(&self) -> usize {
        self.counts.len()
    }

    pub fn covariate(&self, name: &str) -> Result<&[f64]> {
        self.covariates
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| DglmError::Data(format!("dataset has no covariate `{name}`")))
    }

    pub fn date(&self, row: usize) -> Option<NaiveDate> {
        self.start_date
            .map(|d| d + chrono::Days::new(row as u64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendModel {
    /// (a) intercept plus a natural cubic spline of calendar time.
    NaturalSpline { df: usize },
    /// (b) first order random walk.
    RandomWalk1,
    /// (c) second order random walk.
    RandomWalk2,
    /// (d) local linear trend.
    LocalLinearTrend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PollutionEffect {
    /// (i) constant effect, a fixed coefficient.
    Constant,
    /// (ii) first order random walk.
    RandomWalk1,
}

/// Prior hyperparameters. Variances of the truncated Gaussian evolution-variance
/// priors are `g1` (pollution random walk), `g2` (RW1 trend), `g3` (RW2 trend),
/// `g4`, `g5` (local linear trend level and slope).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub g4: f64,
    pub g5: f64,
    pub trend_init_mean: f64,
    pub trend_init_var: f64,
    pub slope_init_mean: f64,
    pub slope_init_var: f64,
    pub effect_init_mean: f64,
    pub effect_init_var: f64,
    /// Prior mean of the fixed intercept (spline trend only).
    pub intercept_prior_mean: f64,
    /// Prior variance of every fixed coefficient.
    pub alpha_prior_var: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            g1: 1e-10,
            g2: 1e-7,
            g3: 1e-14,
            g4: 1e-16,
            g5: 1e-16,
            trend_init_mean: 3.5,
            trend_init_var: 10.0,
            slope_init_mean: 0.0,
            slope_init_var: 10.0,
            effect_init_mean: 0.0,
            effect_init_var: 10.0,
            intercept_prior_mean: 3.5,
            alpha_prior_var: 1e4,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("g1", self.g1),
            ("g2", self.g2),
            ("g3", self.g3),
            ("g4", self.g4),
            ("g5", self.g5),
            ("trend_init_var", self.trend_init_var),
            ("slope_init_var", self.slope_init_var),
            ("effect_init_var", self.effect_init_var),
            ("alpha_prior_var", self.alpha_prior_var),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DglmError::Config(format!("priors.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub trend: TrendModel,
    pub pollution_effect: PollutionEffect,
    /// Days between pollutant exposure and outcome.
    pub pollution_lag: usize,
    /// Degrees of freedom of the temperature spline.
    pub temperature_df: usize,
    /// Adds six standardized day-of-week indicators (Sunday baseline) as fixed effects.
    pub day_of_week: bool,
    pub hyper: Hyperparameters,
}

/// Degrees of freedom of the calendar-time spline used by models 1 and 2.
pub const DEFAULT_TREND_DF: usize = 27;

impl ModelConfig {
    pub fn new(trend: TrendModel, pollution_effect: PollutionEffect) -> Self {
        Self {
            trend,
            pollution_effect,
            pollution_lag: 1,
            temperature_df: 3,
            day_of_week: false,
            hyper: Hyperparameters::default(),
        }
    }

    /// One of the eight standard models.
    pub fn from_model_id(id: u8) -> Result<Self> {
        let (trend, effect) = model_id_pair(id, DEFAULT_TREND_DF)?;
        Ok(Self::new(trend, effect))
    }

    pub fn model_id(&self) -> u8 {
        model_id_of(self.trend, self.pollution_effect)
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature_df < 1 {
            return Err(DglmError::Config("temperature_df must be >= 1".into()));
        }
        if let TrendModel::NaturalSpline { df } = self.trend {
            if df < 1 {
                return Err(DglmError::Config("trend spline df must be >= 1".into()));
            }
        }
        self.hyper.validate()
    }
}

/// `(trend, effect)` for a model id in `1..=8`.
pub fn model_id_pair(id: u8, spline_df: usize) -> Result<(TrendModel, PollutionEffect)> {
    if !(1..=8).contains(&id) {
        return Err(DglmError::Config(format!("unknown model id {id}; expected 1..=8")));
    }
    let trend = match (id - 1) / 2 {
        0 => TrendModel::NaturalSpline { df: spline_df },
        1 => TrendModel::RandomWalk1,
        2 => TrendModel::RandomWalk2,
        _ => TrendModel::LocalLinearTrend,
    };
    let effect = if (id - 1) % 2 == 0 {
        PollutionEffect::Constant
    } else {
        PollutionEffect::RandomWalk1
    };
    Ok((trend, effect))
}

pub fn model_id_of(trend: TrendModel, effect: PollutionEffect) -> u8 {
    let t = match trend {
        TrendModel::NaturalSpline { .. } => 0,
        TrendModel::RandomWalk1 => 1,
        TrendModel::RandomWalk2 => 2,
        TrendModel::LocalLinearTrend => 3,
    };
    let e = match effect {
        PollutionEffect::Constant => 0,
        PollutionEffect::RandomWalk1 => 1,
    };
    (2 * t + e + 1) as u8
}

/// Observation model. `Gaussian` (identity link) and `Flat` (likelihood switched
/// off) exist for checking the samplers against closed-form answers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    Poisson,
    Gaussian { variance: f64 },
    Flat,
}

impl Likelihood {
    /// Log density of one observation given its linear predictor.
    #[inline]
    pub fn log_density(&self, y: f64, eta: f64, log_factorial: f64) -> f64 {
        match *self {
            Likelihood::Poisson => y * eta - eta.exp() - log_factorial,
            Likelihood::Gaussian { variance } => {
                let r = y - eta;
                -0.5 * r * r / variance - 0.5 * (2.0 * std::f64::consts::PI * variance).ln()
            }
            Likelihood::Flat => 0.0,
        }
    }

    pub fn diverges(&self, eta: f64) -> bool {
        match self {
            Likelihood::Poisson => !(eta <= ETA_LIMIT),
            _ => !eta.is_finite(),
        }
    }
}

/// Centre and scale applied to a design column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedEffectBlock {
    /// `n x r` design.
    pub design: DMatrix<f64>,
    pub names: Vec<String>,
    /// `None` for columns used as-is (the intercept).
    pub standardization: Vec<Option<Standardization>>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
}

impl FixedEffectBlock {
    pub fn empty(n: usize) -> Self {
        Self {
            design: DMatrix::zeros(n, 0),
            names: Vec::new(),
            standardization: Vec::new(),
            prior_mean: DVector::zeros(0),
            prior_cov: DMatrix::zeros(0, 0),
        }
    }

    pub fn len(&self) -> usize {
        self.design.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRole {
    Trend,
    Pollution,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicEffectBlock {
    pub name: String,
    pub role: BlockRole,
    /// `n x q` covariates multiplying `beta_t`.
    pub design: DMatrix<f64>,
    pub ar_spec: ArProcessSpec,
    /// Standardization of the covariate (only when `q = 1` and it was rescaled).
    pub standardization: Option<Standardization>,
}

impl DynamicEffectBlock {
    pub fn q(&self) -> usize {
        self.ar_spec.dim
    }
    pub fn p(&self) -> usize {
        self.ar_spec.order
    }
}

/// Response, design blocks and priors ready for fitting.
#[derive(Debug, Clone)]
pub struct AssembledModel {
    pub response: DVector<f64>,
    pub log_factorial: Vec<f64>,
    pub fixed: FixedEffectBlock,
    pub dynamic: Vec<DynamicEffectBlock>,
    pub likelihood: Likelihood,
    /// Dataset row of model time `t = 1`.
    pub first_row: usize,
    pub start_date: Option<NaiveDate>,
    pub model_id: Option<u8>,
    /// Fixed columns that make up the trend (intercept and calendar spline).
    pub trend_columns: Vec<usize>,
}

impl AssembledModel {
    /// Builds a model directly from blocks, validating dimensions.
    pub fn new(
        response: DVector<f64>,
        fixed: FixedEffectBlock,
        dynamic: Vec<DynamicEffectBlock>,
        likelihood: Likelihood,
    ) -> Result<Self> {
        let n = response.len();
        if n == 0 {
            return Err(DglmError::Data("empty response".into()));
        }
        if fixed.design.nrows() != n {
            return Err(DglmError::Dimension("fixed design rows != n".into()));
        }
        let r = fixed.len();
        if fixed.prior_mean.len() != r || fixed.prior_cov.shape() != (r, r) {
            return Err(DglmError::Dimension("fixed-effect prior dimension mismatch".into()));
        }
        if r > 0 && fixed.prior_cov.clone().cholesky().is_none() {
            return Err(DglmError::Config(
                "fixed-effect prior covariance must be positive definite".into(),
            ));
        }
        for block in &dynamic {
            block.ar_spec.validate()?;
            if block.design.shape() != (n, block.q()) {
                return Err(DglmError::Dimension(format!(
                    "dynamic block `{}` design must be {n}x{}",
                    block.name,
                    block.q()
                )));
            }
        }
        if let Likelihood::Poisson = likelihood {
            if response.iter().any(|&y| y < 0.0 || y.fract() != 0.0) {
                return Err(DglmError::Data("Poisson response must be non-negative integers".into()));
            }
        }
        let log_factorial = match likelihood {
            Likelihood::Poisson => response.iter().map(|&y| log_factorial(y)).collect(),
            _ => vec![0.0; n],
        };
        Ok(Self {
            response,
            log_factorial,
            fixed,
            dynamic,
            likelihood,
            first_row: 0,
            start_date: None,
            model_id: None,
            trend_columns: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    /// `eta_t = sum_blocks x_t^T beta_t + z_t^T alpha`, without divergence checks.
    pub fn eta_unchecked(&self, betas: &[DVector<f64>], alpha: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let mut eta = if self.fixed.is_empty() {
            DVector::zeros(n)
        } else {
            &self.fixed.design * alpha
        };
        for (block, beta) in self.dynamic.iter().zip(betas) {
            let (p, q) = (block.p(), block.q());
            for t in 0..n {
                let base = (t + p) * q;
                let mut acc = 0.0;
                for j in 0..q {
                    acc += block.design[(t, j)] * beta[base + j];
                }
                eta[t] += acc;
            }
        }
        eta
    }

    /// Linear predictor; fails with the first divergent `t` (1-based).
    pub fn linear_predictor(
        &self,
        betas: &[DVector<f64>],
        alpha: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if betas.len() != self.dynamic.len() || alpha.len() != self.fixed.len() {
            return Err(DglmError::Dimension("parameter blocks do not match model".into()));
        }
        for (block, beta) in self.dynamic.iter().zip(betas) {
            if beta.len() != block.ar_spec.stacked_len(self.n()) {
                return Err(DglmError::Dimension(format!(
                    "block `{}` expects {} stacked values, got {}",
                    block.name,
                    block.ar_spec.stacked_len(self.n()),
                    beta.len()
                )));
            }
        }
        let eta = self.eta_unchecked(betas, alpha);
        if let Some(t) = eta.iter().position(|&e| self.likelihood.diverges(e)) {
            return Err(DglmError::Divergence { t: t + 1, eta: eta[t] });
        }
        Ok(eta)
    }

    /// Log likelihood of the whole series at `eta`.
    pub fn log_likelihood(&self, eta: &DVector<f64>) -> f64 {
        (0..self.n())
            .map(|t| {
                self.likelihood
                    .log_density(self.response[t], eta[t], self.log_factorial[t])
            })
            .sum()
    }

    pub fn dynamic_index(&self, role: BlockRole) -> Option<usize> {
        self.dynamic.iter().position(|b| b.role == role)
    }
}

/// `ln(y!)` via the log-gamma function.
pub fn log_factorial(y: f64) -> f64 {
    if y < 2.0 {
        0.0
    } else {
        ln_gamma(y + 1.0)
    }
}

/// `sum_t [y_t ln mu_t - mu_t - ln(y_t!)]`.
pub fn poisson_loglik(y: &[f64], mu: &[f64]) -> Result<f64> {
    if y.len() != mu.len() {
        return Err(DglmError::Dimension("count and mean vectors differ in length".into()));
    }
    let mut total = 0.0;
    for (t, (&yt, &mt)) in y.iter().zip(mu).enumerate() {
        if !(mt > 0.0) || !mt.is_finite() {
            return Err(DglmError::Numerical(format!(
                "Poisson mean must be positive and finite, got {mt} at t = {}",
                t + 1
            )));
        }
        total += yt * mt.ln() - mt - log_factorial(yt);
    }
    Ok(total)
}

/// Standardizes a column in place (sample sd, `n - 1` denominator).
pub(crate) fn standardize_column(col: &mut [f64], name: &str) -> Result<Standardization> {
    let n = col.len();
    if n < 2 {
        return Err(DglmError::Data(format!(
            "cannot standardize covariate `{name}` with fewer than two rows"
        )));
    }
    let mean = col.iter().sum::<f64>() / n as f64;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(DglmError::Data(format!(
            "covariate column `{name}` is constant (zero standard deviation)"
        )));
    }
    for v in col.iter_mut() {
        *v = (*v - mean) / sd;
    }
    Ok(Standardization { mean, sd })
}

struct FixedBuilder {
    columns: Vec<Vec<f64>>,
    names: Vec<String>,
    standardization: Vec<Option<Standardization>>,
    prior_mean: Vec<f64>,
}

impl FixedBuilder {
    fn push_raw(&mut self, name: String, values: Vec<f64>, prior_mean: f64) {
        self.columns.push(values);
        self.names.push(name);
        self.standardization.push(None);
        self.prior_mean.push(prior_mean);
    }

    fn push_standardized(&mut self, name: String, mut values: Vec<f64>) -> Result<()> {
        let s = standardize_column(&mut values, &name)?;
        self.columns.push(values);
        self.names.push(name);
        self.standardization.push(Some(s));
        self.prior_mean.push(0.0);
        Ok(())
    }

    fn finish(self, n: usize, prior_var: f64) -> FixedEffectBlock {
        let r = self.columns.len();
        let mut design = DMatrix::zeros(n, r);
        for (j, col) in self.columns.iter().enumerate() {
            design.set_column(j, &DVector::from_column_slice(col));
        }
        FixedEffectBlock {
            design,
            names: self.names,
            standardization: self.standardization,
            prior_mean: DVector::from_vec(self.prior_mean),
            prior_cov: DMatrix::identity(r, r) * prior_var,
        }
    }
}

/// AR prior of a dynamic trend; `None` for the spline trend. The evolution
/// variances start at the prior scale `sqrt(g)`.
pub fn trend_process(trend: TrendModel, h: &Hyperparameters) -> Option<ArProcessSpec> {
    match trend {
        TrendModel::NaturalSpline { .. } => None,
        TrendModel::RandomWalk1 => Some(ArProcessSpec::random_walk1(
            h.g2.sqrt(),
            h.trend_init_mean,
            h.trend_init_var,
            VariancePrior::TruncatedGaussian { variance: h.g2 },
        )),
        TrendModel::RandomWalk2 => Some(ArProcessSpec::random_walk2(
            h.g3.sqrt(),
            h.trend_init_mean,
            h.trend_init_var,
            VariancePrior::TruncatedGaussian { variance: h.g3 },
        )),
        TrendModel::LocalLinearTrend => Some(ArProcessSpec::local_linear_trend(
            h.g4.sqrt(),
            h.g5.sqrt(),
            (h.trend_init_mean, h.trend_init_var),
            (h.slope_init_mean, h.slope_init_var),
            VariancePrior::TruncatedGaussian { variance: h.g4 },
            VariancePrior::TruncatedGaussian { variance: h.g5 },
        )),
    }
}

/// AR prior of the random-walk pollution effect (on the standardized scale).
pub fn effect_process(h: &Hyperparameters) -> ArProcessSpec {
    ArProcessSpec::random_walk1(
        h.g1.sqrt(),
        h.effect_init_mean,
        h.effect_init_var,
        VariancePrior::TruncatedGaussian { variance: h.g1 },
    )
}

/// Builds the standardized design blocks for `config` from `dataset`.
///
/// Model time `t = 1..n` corresponds to dataset rows `lag..`, so that day `t`
/// is paired with the pollutant `lag` days earlier.
pub fn assemble_model(dataset: &TimeSeriesDataset, config: &ModelConfig) -> Result<AssembledModel> {
    config.validate()?;
    let lag = config.pollution_lag;
    if dataset.n() <= lag {
        return Err(DglmError::Data(format!(
            "series of length {} is too short for pollution lag {lag}",
            dataset.n()
        )));
    }
    let n = dataset.n() - lag;
    let h = &config.hyper;
    let pm_raw = dataset.covariate(POLLUTANT)?;
    let pm: Vec<f64> = pm_raw[..n].to_vec();
    let temperature: Vec<f64> = dataset.covariate(TEMPERATURE)?[lag..].to_vec();
    let response = DVector::from_iterator(n, dataset.counts[lag..].iter().map(|&c| c as f64));

    let mut fixed = FixedBuilder {
        columns: Vec::new(),
        names: Vec::new(),
        standardization: Vec::new(),
        prior_mean: Vec::new(),
    };
    let mut trend_columns = Vec::new();
    let mut dynamic = Vec::new();

    match (config.trend, trend_process(config.trend, h)) {
        (TrendModel::NaturalSpline { df }, _) => {
            trend_columns.push(0);
            fixed.push_raw("intercept".into(), vec![1.0; n], h.intercept_prior_mean);
            let time: Vec<f64> = (1..=n).map(|t| t as f64).collect();
            let basis = ncs_basis(&time, df)?;
            for j in 0..df {
                trend_columns.push(fixed.columns.len());
                fixed.push_standardized(
                    format!("trend_spline_{}", j + 1),
                    basis.basis.column(j).iter().copied().collect(),
                )?;
            }
        }
        (_, Some(ar_spec)) => {
            let mut design = DMatrix::zeros(n, ar_spec.dim);
            design.column_mut(0).fill(1.0);
            dynamic.push(DynamicEffectBlock {
                name: "trend".into(),
                role: BlockRole::Trend,
                design,
                ar_spec,
                standardization: None,
            });
        }
        (_, None) => unreachable!("dynamic trends always have a process"),
    }

    let temp_basis = ncs_basis(&temperature, config.temperature_df)?;
    for j in 0..config.temperature_df {
        fixed.push_standardized(
            format!("temperature_spline_{}", j + 1),
            temp_basis.basis.column(j).iter().copied().collect(),
        )?;
    }

    match config.pollution_effect {
        PollutionEffect::Constant => fixed.push_standardized(POLLUTANT.into(), pm)?,
        PollutionEffect::RandomWalk1 => {
            let mut x = pm;
            let s = standardize_column(&mut x, POLLUTANT)?;
            dynamic.push(DynamicEffectBlock {
                name: POLLUTANT.into(),
                role: BlockRole::Pollution,
                design: DMatrix::from_column_slice(n, 1, &x),
                ar_spec: effect_process(h),
                standardization: Some(s),
            });
        }
    }

    if config.day_of_week {
        let names = ["mon", "tue", "wed", "thu", "fri", "sat"];
        for (k, name) in names.iter().enumerate() {
            let col: Vec<f64> = (0..n)
                .map(|t| {
                    let weekday = match dataset.date(lag + t) {
                        Some(d) => d.weekday().num_days_from_monday() as usize,
                        None => (lag + t) % 7,
                    };
                    if weekday == k {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            fixed.push_standardized(format!("dow_{name}"), col)?;
        }
    }

    let fixed = fixed.finish(n, h.alpha_prior_var);
    let mut model = AssembledModel::new(response, fixed, dynamic, Likelihood::Poisson)?;
    model.first_row = lag;
    model.start_date = dataset.date(lag);
    model.model_id = Some(config.model_id());
    model.trend_columns = trend_columns;
    Ok(model)
}
