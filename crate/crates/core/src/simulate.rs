//! Synthetic datasets with a known truth, for recovery checks.
//!
//! Temperature is a seasonal sinusoid plus Gaussian noise; the pollutant is a
//! positive AR(1) series. Counts are Poisson with log mean
//! `trend_t + gamma_t * pm_{t - lag} + temperature effect`.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ar::{ar_recursion, ArProcessSpec};
use crate::error::{DglmError, Result};
use crate::model::{trend_process, ModelConfig, TimeSeriesDataset, ETA_LIMIT, POLLUTANT, TEMPERATURE};

/// True log-scale trend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrendTruth {
    /// Path of the configured dynamic trend with the given evolution variances
    /// (one per state component) and initializers `beta_{-p+1}, ..., beta_0`
    /// (stacked, `p * q` values).
    Process { variances: Vec<f64>, init: Vec<f64> },
    /// `level + amplitude * cos(2 pi (t - peak_day) / 365.25)`.
    Seasonal { level: f64, amplitude: f64, peak_day: f64 },
    /// Explicit values, one per row.
    Path { values: Vec<f64> },
}

/// True pollutant effect per unit of the pollutant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectTruth {
    Constant { gamma: f64 },
    /// First order random walk from `gamma0` with per-day variance `variance`.
    RandomWalk { gamma0: f64, variance: f64 },
    Path { values: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemperatureGenerator {
    pub mean: f64,
    pub amplitude: f64,
    pub noise_sd: f64,
    /// Day of the year with the highest mean temperature.
    pub peak_day: f64,
}

impl Default for TemperatureGenerator {
    fn default() -> Self {
        Self {
            mean: 11.0,
            amplitude: 7.0,
            noise_sd: 2.0,
            peak_day: 200.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PollutantGenerator {
    pub mean: f64,
    pub sd: f64,
    /// Lag-one autocorrelation.
    pub phi: f64,
    /// Values are floored here to stay positive.
    pub floor: f64,
}

impl Default for PollutantGenerator {
    fn default() -> Self {
        Self {
            mean: 30.0,
            sd: 10.0,
            phi: 0.7,
            floor: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub trend: TrendTruth,
    pub effect: EffectTruth,
    /// Log-rate change per degree away from `temperature.mean`, applied to
    /// `|temperature - mean|` so that both cold and hot days raise counts.
    #[serde(default)]
    pub temperature_effect: f64,
    #[serde(default)]
    pub temperature: TemperatureGenerator,
    #[serde(default)]
    pub pollutant: PollutantGenerator,
    #[serde(default = "default_start")]
    pub start_date: NaiveDate,
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(1995, 1, 1).expect("valid date")
}

impl GroundTruth {
    pub fn new(trend: TrendTruth, effect: EffectTruth) -> Self {
        Self {
            trend,
            effect,
            temperature_effect: 0.0,
            temperature: TemperatureGenerator::default(),
            pollutant: PollutantGenerator::default(),
            start_date: default_start(),
        }
    }
}

/// Per-row truth behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    /// Log-scale trend level.
    pub trend: Vec<f64>,
    /// Full state of a dynamic trend, `(n + p) x q`, when one was simulated.
    pub trend_state: Option<Vec<Vec<f64>>>,
    /// Pollutant effect per unit.
    pub gamma: Vec<f64>,
    pub temperature_term: Vec<f64>,
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    /// Evolution variances used, by name.
    pub variances: BTreeMap<String, f64>,
    pub pollution_lag: usize,
}

fn process_path<R: Rng>(
    spec: &ArProcessSpec,
    variances: &[f64],
    init: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (p, q) = (spec.order, spec.dim);
    if variances.len() != q || init.len() != p * q {
        return Err(DglmError::Config(format!(
            "trend truth needs {q} variances and {} initializer values",
            p * q
        )));
    }
    if variances.iter().any(|&v| !(v >= 0.0)) {
        return Err(DglmError::Config("true evolution variances must be >= 0".into()));
    }
    let initializers = DMatrix::from_row_slice(p, q, init);
    let sd: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
    let innov = DMatrix::from_fn(n, q, |_, j| sd[j] * rng.sample::<f64, _>(StandardNormal));
    Ok(ar_recursion(&spec.coefficients, &initializers, &innov))
}

/// Simulates `n` days from `truth` under `config` (which fixes the trend
/// process shape and the pollution lag). Deterministic in `seed`.
pub fn simulate_dataset(
    config: &ModelConfig,
    truth: &GroundTruth,
    n: usize,
    seed: u64,
) -> Result<(TimeSeriesDataset, TruthRecord)> {
    if n == 0 {
        return Err(DglmError::Config("simulation length must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lag = config.pollution_lag;
    let tg = truth.temperature;
    let pg = truth.pollutant;
    if !(pg.sd >= 0.0) || !(pg.phi.abs() < 1.0) {
        return Err(DglmError::Config("pollutant generator needs sd >= 0 and |phi| < 1".into()));
    }

    let two_pi = 2.0 * std::f64::consts::PI;
    let temperature: Vec<f64> = (0..n)
        .map(|i| {
            let season = (two_pi * (i as f64 - tg.peak_day) / 365.25).cos();
            tg.mean + tg.amplitude * season + tg.noise_sd * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();

    // `pm_full[i]` is the exposure acting on row `i`, i.e. the pollutant `lag` days earlier.
    let innov_sd = pg.sd * (1.0 - pg.phi * pg.phi).sqrt();
    let mut level = pg.mean + pg.sd * rng.sample::<f64, _>(StandardNormal);
    let mut pm_full = Vec::with_capacity(n + lag);
    for _ in 0..n + lag {
        pm_full.push(level.max(pg.floor));
        level = pg.mean + pg.phi * (level - pg.mean) + innov_sd * rng.sample::<f64, _>(StandardNormal);
    }
    let pm_observed = pm_full[lag..].to_vec();

    let mut variances = BTreeMap::new();
    let (trend, trend_state) = match &truth.trend {
        TrendTruth::Process { variances: v, init } => {
            let spec = trend_process(config.trend, &config.hyper).ok_or_else(|| {
                DglmError::Config("a process trend truth needs a dynamic trend model".into())
            })?;
            let path = process_path(&spec, v, init, n, &mut rng)?;
            let names = if spec.dim == 2 { vec!["tau2", "psi2"] } else { vec!["tau2"] };
            for (name, &val) in names.iter().zip(v) {
                variances.insert(name.to_string(), val);
            }
            let p = spec.order;
            let trend: Vec<f64> = (0..n).map(|t| path[(t + p, 0)]).collect();
            let state = (0..path.nrows())
                .map(|r| path.row(r).iter().copied().collect())
                .collect();
            (trend, Some(state))
        }
        TrendTruth::Seasonal { level, amplitude, peak_day } => (
            (0..n)
                .map(|i| level + amplitude * (two_pi * (i as f64 - peak_day) / 365.25).cos())
                .collect(),
            None,
        ),
        TrendTruth::Path { values } => {
            if values.len() != n {
                return Err(DglmError::Config(format!(
                    "trend path has {} values, expected {n}",
                    values.len()
                )));
            }
            (values.clone(), None)
        }
    };

    let gamma: Vec<f64> = match &truth.effect {
        EffectTruth::Constant { gamma } => vec![*gamma; n],
        EffectTruth::RandomWalk { gamma0, variance } => {
            if !(*variance >= 0.0) {
                return Err(DglmError::Config("effect variance must be >= 0".into()));
            }
            variances.insert("sigma2".into(), *variance);
            let sd = variance.sqrt();
            let mut g = *gamma0;
            (0..n)
                .map(|_| {
                    g += sd * rng.sample::<f64, _>(StandardNormal);
                    g
                })
                .collect()
        }
        EffectTruth::Path { values } => {
            if values.len() != n {
                return Err(DglmError::Config(format!(
                    "effect path has {} values, expected {n}",
                    values.len()
                )));
            }
            values.clone()
        }
    };

    let temperature_term: Vec<f64> = temperature
        .iter()
        .map(|&x| truth.temperature_effect * (x - tg.mean).abs())
        .collect();
    let eta: Vec<f64> = (0..n)
        .map(|t| trend[t] + gamma[t] * pm_full[t] + temperature_term[t])
        .collect();
    if let Some(t) = eta.iter().position(|e| !(*e <= ETA_LIMIT)) {
        return Err(DglmError::Divergence { t: t + 1, eta: eta[t] });
    }
    let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
    let mut counts = Vec::with_capacity(n);
    for &m in &mu {
        let y = if m > 0.0 {
            Poisson::new(m)
                .map_err(|e| DglmError::Numerical(format!("Poisson mean {m}: {e}")))?
                .sample(&mut rng)
        } else {
            0.0
        };
        counts.push(y as u64);
    }

    let mut covariates = BTreeMap::new();
    covariates.insert(POLLUTANT.to_string(), pm_observed);
    covariates.insert(TEMPERATURE.to_string(), temperature);
    let dataset = TimeSeriesDataset::new(counts, covariates, Some(truth.start_date))?;
    Ok((
        dataset,
        TruthRecord {
            trend,
            trend_state,
            gamma,
            temperature_term,
            eta,
            mu,
            variances,
            pollution_lag: lag,
        },
    ))
}
