//! Posterior summaries and model checks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DglmError, Result};
use crate::model::{AssembledModel, BlockRole, Likelihood, POLLUTANT};
use crate::sampler::{ChainSamples, PosteriorSamples};

/// Pollutant increment used for relative risks.
pub const RR_INCREMENT: f64 = 10.0;
pub const DEFAULT_MAX_LAG: usize = 30;
pub const INTERVAL: [f64; 3] = [0.025, 0.5, 0.975];

/// Empirical quantile with linear interpolation between order statistics
/// (`h = (n - 1) p`). `sorted` must be ascending.
pub fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quantiles of an unsorted sample.
pub fn quantiles(values: &[f64], probs: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    probs.iter().map(|&p| sorted_quantile(&v, p)).collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Sample autocorrelations at lags `0..=max_lag`, with the `±1.96/sqrt(n)` band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acf {
    pub values: Vec<f64>,
    pub band: f64,
}

impl Acf {
    /// Number of lags in `1..=max_lag` that fall inside the band.
    pub fn inside_band(&self, max_lag: usize) -> usize {
        self.values[1..=max_lag.min(self.values.len() - 1)]
            .iter()
            .filter(|r| r.abs() <= self.band)
            .count()
    }
}

pub fn acf(series: &[f64], max_lag: usize) -> Result<Acf> {
    let n = series.len();
    if n <= max_lag {
        return Err(DglmError::Data(format!(
            "series of length {n} is too short for lag {max_lag}"
        )));
    }
    let m = mean(series);
    let c0: f64 = series.iter().map(|x| (x - m).powi(2)).sum();
    if !(c0 > 0.0) {
        return Err(DglmError::Data("autocorrelation of a constant series".into()));
    }
    let values = (0..=max_lag)
        .map(|k| {
            if k == 0 {
                1.0
            } else {
                (0..n - k).map(|t| (series[t] - m) * (series[t + k] - m)).sum::<f64>() / c0
            }
        })
        .collect();
    Ok(Acf {
        values,
        band: 1.96 / (n as f64).sqrt(),
    })
}

/// Split-chain potential scale reduction factor; `None` with fewer than two
/// chains or fewer than four draws per chain.
pub fn rhat(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.len() < 2 {
        return None;
    }
    let len = chains.iter().map(Vec::len).min()?;
    let half = len / 2;
    if half < 2 {
        return None;
    }
    let splits: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[len - half..len]])
        .collect();
    let m = splits.len() as f64;
    let nh = half as f64;
    let means: Vec<f64> = splits.iter().map(|s| mean(s)).collect();
    let w = splits.iter().map(|s| variance(s)).sum::<f64>() / m;
    let b = nh * variance(&means);
    if w == 0.0 {
        return Some(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (nh - 1.0) / nh * w + b / nh;
    Some((var_plus / w).sqrt())
}

/// Batch-means estimate of the Monte Carlo standard error of the mean and the
/// effective sample size, using `floor(sqrt(n))` batches.
pub fn mcse(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let size = (n as f64).sqrt().floor() as usize;
    let batches = if size == 0 { 0 } else { n / size };
    if batches < 2 {
        return (f64::NAN, f64::NAN);
    }
    let used = batches * size;
    let overall = mean(&values[..used]);
    let bm: Vec<f64> = values[..used].chunks(size).map(mean).collect();
    let var_batch = size as f64 * bm.iter().map(|x| (x - overall).powi(2)).sum::<f64>()
        / (batches - 1) as f64;
    let s2 = variance(values);
    let se = (var_batch / n as f64).sqrt();
    let ess = if var_batch > 0.0 { n as f64 * s2 / var_batch } else { n as f64 };
    (se, ess)
}

/// `exp(delta * gamma)` per draw.
pub fn relative_risk(gamma: &[f64], delta: f64) -> Vec<f64> {
    gamma.iter().map(|g| (delta * g).exp()).collect()
}

/// Deviance information criterion with the posterior mean of the linear
/// predictor as plug-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    pub dic: f64,
    pub pd: f64,
    pub mean_deviance: f64,
}

/// DIC from per-draw log likelihoods and the posterior mean linear predictor.
pub fn dic_from_parts(model: &AssembledModel, log_liks: &[f64], eta_mean: &DVector<f64>) -> Dic {
    let mean_deviance = -2.0 * mean(log_liks);
    let plug_in = -2.0 * model.log_likelihood(eta_mean);
    let pd = mean_deviance - plug_in;
    Dic {
        dic: mean_deviance + pd,
        pd,
        mean_deviance,
    }
}

pub fn dic(model: &AssembledModel, samples: &PosteriorSamples) -> Dic {
    let log_liks: Vec<f64> = samples.chains.iter().flat_map(|c| c.log_lik.iter().copied()).collect();
    dic_from_parts(model, &log_liks, &pooled_eta_mean(samples))
}

fn pooled_eta_mean(samples: &PosteriorSamples) -> DVector<f64> {
    let total: usize = samples.chains.iter().map(|c| c.log_lik.len()).sum();
    let mut m = DVector::zeros(samples.n);
    for c in &samples.chains {
        let w = c.log_lik.len() as f64 / total as f64;
        for (a, b) in m.iter_mut().zip(&c.eta_mean) {
            *a += w * b;
        }
    }
    m
}

/// Linear predictor of retained draw `i` of `chain`.
pub fn draw_eta(model: &AssembledModel, chain: &ChainSamples, i: usize) -> DVector<f64> {
    let betas: Vec<DVector<f64>> = chain
        .beta
        .iter()
        .map(|m| DVector::from_column_slice(m.row(i)))
        .collect();
    let alpha = DVector::from_column_slice(chain.alpha.row(i));
    model.eta_unchecked(&betas, &alpha)
}

fn pearson(model: &AssembledModel, eta: &DVector<f64>) -> Vec<f64> {
    model
        .response
        .iter()
        .zip(eta.iter())
        .map(|(&y, &e)| match model.likelihood {
            Likelihood::Poisson => {
                let mu = e.exp();
                (y - mu) / mu.sqrt()
            }
            Likelihood::Gaussian { variance } => (y - e) / variance.sqrt(),
            Likelihood::Flat => y - e,
        })
        .collect()
}

/// Realized Pearson residuals, one row per used draw, plus the residuals at
/// the posterior medians of all parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedResiduals {
    pub draws: DMatrix<f64>,
    pub at_median: Vec<f64>,
}

/// Pearson residuals `(y - mu) / sqrt(mu)` for every `every`-th retained draw.
pub fn realized_residuals(
    model: &AssembledModel,
    samples: &PosteriorSamples,
    every: usize,
) -> RealizedResiduals {
    let every = every.max(1);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for c in &samples.chains {
        for i in (0..c.log_lik.len()).step_by(every) {
            rows.push(pearson(model, &draw_eta(model, c, i)));
        }
    }
    let n = model.n();
    let draws = DMatrix::from_fn(rows.len(), n, |i, t| rows[i][t]);
    let (betas, alpha) = posterior_medians(samples);
    let at_median = pearson(model, &model.eta_unchecked(&betas, &alpha));
    RealizedResiduals { draws, at_median }
}

/// Posterior mean of the per-draw residual ACF. Under a correctly specified
/// model each draw's realized residuals are white, so every lag of this
/// average has variance at most `1/n` and the usual band applies.
pub fn realized_acf(residuals: &RealizedResiduals, max_lag: usize) -> Result<Acf> {
    let draws = residuals.draws.nrows();
    if draws == 0 {
        return Err(DglmError::Data("no residual draws".into()));
    }
    let mut total = vec![0.0; max_lag + 1];
    let mut band = 0.0;
    for i in 0..draws {
        let row: Vec<f64> = residuals.draws.row(i).iter().copied().collect();
        let a = acf(&row, max_lag)?;
        for (t, v) in total.iter_mut().zip(&a.values) {
            *t += v;
        }
        band = a.band;
    }
    Ok(Acf {
        values: total.into_iter().map(|v| v / draws as f64).collect(),
        band,
    })
}

/// Draws used for the realized-residual ACF in [`summarize`].
const REALIZED_ACF_DRAWS: usize = 200;

fn pooled_column(samples: &PosteriorSamples, pick: impl Fn(&ChainSamples) -> &crate::sampler::DrawMatrix, j: usize) -> Vec<f64> {
    samples.chains.iter().flat_map(|c| pick(c).column(j)).collect()
}

/// Componentwise posterior medians of the dynamic paths and fixed effects.
pub fn posterior_medians(samples: &PosteriorSamples) -> (Vec<DVector<f64>>, DVector<f64>) {
    let first = &samples.chains[0];
    let betas = (0..first.beta.len())
        .map(|b| {
            DVector::from_fn(first.beta[b].dim, |j, _| {
                quantiles(&pooled_column(samples, |c| &c.beta[b], j), &[0.5])[0]
            })
        })
        .collect();
    let alpha = DVector::from_fn(first.alpha.dim, |j, _| {
        quantiles(&pooled_column(samples, |c| &c.alpha, j), &[0.5])[0]
    });
    (betas, alpha)
}

/// Per-draw trend on the log scale (`n` values per draw), per chain.
pub fn trend_draws(model: &AssembledModel, chain: &ChainSamples) -> Vec<Vec<f64>> {
    let n = model.n();
    let draws = chain.log_lik.len();
    if let Some(b) = model.dynamic_index(BlockRole::Trend) {
        let (p, q) = (model.dynamic[b].p(), model.dynamic[b].q());
        return (0..draws)
            .map(|i| {
                let row = chain.beta[b].row(i);
                (0..n).map(|t| row[(t + p) * q]).collect()
            })
            .collect();
    }
    (0..draws)
        .map(|i| {
            let a = chain.alpha.row(i);
            (0..n)
                .map(|t| model.trend_columns.iter().map(|&j| model.fixed.design[(t, j)] * a[j]).sum())
                .collect()
        })
        .collect()
}

/// Per-draw pollutant coefficient per unit of pollutant, for each `t`.
pub fn effect_draws(model: &AssembledModel, chain: &ChainSamples) -> Vec<Vec<f64>> {
    let n = model.n();
    let draws = chain.log_lik.len();
    if let Some(b) = model.dynamic_index(BlockRole::Pollution) {
        let block = &model.dynamic[b];
        let sd = block.standardization.map_or(1.0, |s| s.sd);
        return (0..draws)
            .map(|i| {
                let row = chain.beta[b].row(i);
                (0..n).map(|t| row[t + block.p()] / sd).collect()
            })
            .collect();
    }
    match model.fixed.column_index(POLLUTANT) {
        Some(j) => {
            let sd = model.fixed.standardization[j].map_or(1.0, |s| s.sd);
            (0..draws).map(|i| vec![chain.alpha.row(i)[j] / sd; n]).collect()
        }
        None => Vec::new(),
    }
}

/// Pointwise quantiles across draws for each `t`, after `map`.
pub fn path_quantiles(draws: &[Vec<f64>], map: impl Fn(f64) -> f64) -> Vec<[f64; 3]> {
    if draws.is_empty() {
        return Vec::new();
    }
    let n = draws[0].len();
    (0..n)
        .map(|t| {
            let col: Vec<f64> = draws.iter().map(|d| map(d[t])).collect();
            let q = quantiles(&col, &INTERVAL);
            [q[0], q[1], q[2]]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
    pub mcse: f64,
    pub ess: f64,
    pub rhat: Option<f64>,
}

impl ParameterSummary {
    pub fn from_chains(name: impl Into<String>, chains: &[Vec<f64>]) -> Self {
        let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
        let q = quantiles(&pooled, &INTERVAL);
        let (se, ess): (f64, f64) = {
            let per: Vec<(f64, f64)> = chains.iter().map(|c| mcse(c)).collect();
            let k = per.len() as f64;
            let var = per.iter().map(|(s, _)| s * s).sum::<f64>() / (k * k);
            (var.sqrt(), per.iter().map(|(_, e)| e).sum())
        };
        Self {
            name: name.into(),
            mean: mean(&pooled),
            q025: q[0],
            median: q[1],
            q975: q[2],
            mcse: se,
            ess,
            rhat: rhat(chains),
        }
    }
}

/// Names of the evolution variances of a block: `tau2` (and `psi2` for the
/// slope) for trends, `sigma2` otherwise.
pub fn variance_names(role: BlockRole, q: usize) -> Vec<String> {
    match (role, q) {
        (BlockRole::Trend, 1) => vec!["tau2".into()],
        (BlockRole::Trend, 2) => vec!["tau2".into(), "psi2".into()],
        (_, 1) => vec!["sigma2".into()],
        (_, q) => (1..=q).map(|j| format!("sigma2_{j}")).collect(),
    }
}

/// Scalar parameters as per-chain draw vectors: fixed effects, variances and
/// free coefficients. Path entries are handled by [`path_rhat`].
pub fn scalar_parameters(model: &AssembledModel, samples: &PosteriorSamples) -> Vec<(String, Vec<Vec<f64>>)> {
    let mut out = Vec::new();
    let per_chain = |pick: &dyn Fn(&ChainSamples) -> Vec<f64>| -> Vec<Vec<f64>> {
        samples.chains.iter().map(pick).collect()
    };
    for (j, name) in model.fixed.names.iter().enumerate() {
        out.push((name.clone(), per_chain(&|c| c.alpha.column(j))));
    }
    for (b, block) in model.dynamic.iter().enumerate() {
        for (j, v) in variance_names(block.role, block.q()).into_iter().enumerate() {
            out.push((format!("{}_{v}", block.name), per_chain(&|c| c.variances[b].column(j))));
        }
        if block.ar_spec.free_coefficients {
            for l in 0..block.p() {
                out.push((format!("{}_ar{}", block.name, l + 1), per_chain(&|c| c.coefficients[b].column(l))));
            }
        }
    }
    out
}

/// Largest R-hat over the entries of dynamic path `b`.
pub fn path_rhat(samples: &PosteriorSamples, b: usize) -> Option<f64> {
    let dim = samples.chains.first()?.beta.get(b)?.dim;
    (0..dim)
        .filter_map(|i| {
            let chains: Vec<Vec<f64>> = samples.chains.iter().map(|c| c.beta[b].column(i)).collect();
            rhat(&chains)
        })
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
}

/// Posterior summary of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    /// Fixed effects (fitted scale), variances, coefficients and, when
    /// present, the pollutant relative risk per increment.
    pub parameters: Vec<ParameterSummary>,
    /// Trend on the count scale: `exp(trend_t)` quantiles.
    pub trend: Vec<[f64; 3]>,
    /// Relative risk per pollutant increment at each `t`.
    pub effect: Vec<[f64; 3]>,
    pub dic: Dic,
    pub acceptance: Vec<(String, f64)>,
    /// Largest R-hat over every scalar parameter including path entries.
    pub max_rhat: Option<f64>,
    /// Largest R-hat per dynamic path.
    pub path_rhat: Vec<(String, Option<f64>)>,
    /// Residual ACF at posterior medians.
    pub residual_acf: Acf,
    /// Posterior mean of the realized-residual ACF.
    pub realized_acf: Acf,
    pub divergences: u64,
}

pub fn summarize(model: &AssembledModel, samples: &PosteriorSamples, max_lag: usize) -> Result<FitSummary> {
    if samples.chains.is_empty() || samples.retained_per_chain() == 0 {
        return Err(DglmError::Data("no retained draws to summarize".into()));
    }
    let scalars = scalar_parameters(model, samples);
    let mut parameters: Vec<ParameterSummary> = scalars
        .iter()
        .map(|(name, chains)| ParameterSummary::from_chains(name.clone(), chains))
        .collect();
    let path_rhat: Vec<(String, Option<f64>)> = (0..model.dynamic.len())
        .map(|b| (model.dynamic[b].name.clone(), path_rhat(samples, b)))
        .collect();
    let max_rhat = scalars
        .iter()
        .filter_map(|(_, c)| rhat(c))
        .chain(path_rhat.iter().filter_map(|(_, r)| *r))
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));

    let trend_chains: Vec<Vec<Vec<f64>>> = samples.chains.iter().map(|c| trend_draws(model, c)).collect();
    let trend = path_quantiles(&trend_chains.concat(), f64::exp);
    let effect_chains: Vec<Vec<Vec<f64>>> = samples.chains.iter().map(|c| effect_draws(model, c)).collect();
    let effect = path_quantiles(&effect_chains.concat(), |g| (RR_INCREMENT * g).exp());
    if model.fixed.column_index(POLLUTANT).is_some() {
        let rr: Vec<Vec<f64>> = effect_chains
            .iter()
            .map(|c| relative_risk(&c.iter().map(|d| d[0]).collect::<Vec<_>>(), RR_INCREMENT))
            .collect();
        parameters.push(ParameterSummary::from_chains(format!("{POLLUTANT}_rr_per_{RR_INCREMENT}"), &rr));
    }

    let mut acceptance = Vec::new();
    let mut divergences = 0;
    for (b, block) in model.dynamic.iter().enumerate() {
        let (a, p) = samples.chains.iter().fold((0, 0), |(a, p), c| {
            (a + c.stats.beta[b].accepted, p + c.stats.beta[b].proposed)
        });
        if p > 0 {
            acceptance.push((format!("{}_path", block.name), a as f64 / p as f64));
        }
        for (j, v) in variance_names(block.role, block.q()).into_iter().enumerate() {
            let (a, p) = samples.chains.iter().fold((0, 0), |(a, p), c| {
                (a + c.stats.variance[b][j].accepted, p + c.stats.variance[b][j].proposed)
            });
            if p > 0 {
                acceptance.push((format!("{}_{v}", block.name), a as f64 / p as f64));
            }
            let (a, p) = samples.chains.iter().fold((0, 0), |(a, p), c| {
                c.stats.rescale.get(b).and_then(|r| r.get(j)).map_or((a, p), |r| (a + r.accepted, p + r.proposed))
            });
            if p > 0 {
                acceptance.push((format!("{}_{v}_rescale", block.name), a as f64 / p as f64));
            }
        }
    }
    let n_alpha_blocks = samples.chains[0].stats.alpha.len();
    for ib in 0..n_alpha_blocks {
        let (a, p) = samples.chains.iter().fold((0, 0), |(a, p), c| {
            (a + c.stats.alpha[ib].accepted, p + c.stats.alpha[ib].proposed)
        });
        if p > 0 {
            acceptance.push((format!("fixed_block_{}", ib + 1), a as f64 / p as f64));
        }
    }
    for c in &samples.chains {
        divergences += c.stats.divergences;
    }

    let total_draws = samples.chains.len() * samples.retained_per_chain();
    let every = (total_draws / REALIZED_ACF_DRAWS).max(1);
    let residuals = realized_residuals(model, samples, every);
    let max_lag = max_lag.min(model.n().saturating_sub(1));
    let residual_acf = acf(&residuals.at_median, max_lag)?;
    let realized_acf = realized_acf(&residuals, max_lag)?;
    Ok(FitSummary {
        parameters,
        trend,
        effect,
        dic: dic(model, samples),
        acceptance,
        max_rhat,
        path_rhat,
        residual_acf,
        realized_acf,
        divergences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn quantile_interpolation() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(sorted_quantile(&v, 0.0), 1.0);
        assert_eq!(sorted_quantile(&v, 1.0), 4.0);
        assert!((sorted_quantile(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((sorted_quantile(&v, 0.1) - 1.3).abs() < 1e-15);
        assert_eq!(quantiles(&[3.0, 1.0, 2.0], &[0.5]), vec![2.0]);
    }

    #[test]
    fn acf_basics() {
        let alt: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let a = acf(&alt, 3).unwrap();
        assert_eq!(a.values[0], 1.0);
        assert!((a.values[1] + 1.0).abs() < 2e-3);
        assert!(acf(&[2.0; 10], 2).is_err());
        assert!(acf(&[1.0, 2.0], 2).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wn: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a = acf(&wn, 20).unwrap();
        assert!(a.values[1..].iter().all(|r| r.abs() < 0.03));
    }

    #[test]
    fn rhat_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r = rhat(&[c.clone(), c.clone()]).unwrap();
        assert!((r - 1.0).abs() < 1e-3, "{r}");
        let shifted: Vec<f64> = c.iter().map(|x| x + 10.0).collect();
        assert!(rhat(&[c.clone(), shifted]).unwrap() > 1.1);
        assert!(rhat(&[c]).is_none());
        assert_eq!(rhat(&[vec![1.0; 10], vec![1.0; 10]]), Some(1.0));
    }

    #[test]
    fn relative_risk_examples() {
        assert_eq!(relative_risk(&[0.0], 10.0), vec![1.0]);
        let g = (1.007f64).ln() / 10.0;
        assert!((relative_risk(&[g], 10.0)[0] - 1.007).abs() < 1e-12);
    }

    #[test]
    fn mcse_of_iid_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (se, ess) = mcse(&v);
        assert!((se - 0.01).abs() < 0.003, "{se}");
        assert!(ess > 5_000.0 && ess < 20_000.0, "{ess}");
    }
}
