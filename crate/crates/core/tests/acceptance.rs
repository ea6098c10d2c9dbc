//! Acceptance suite. Each test prints one `criterion N ... PASS|FAIL` line and
//! asserts the same outcome.
//!
//! Run with `cargo test -p dglm --test acceptance`.

use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use dglm::ar::{block_conditional, build_precision, log_prior_quadform, ArProcessSpec, VariancePrior};
use dglm::diagnostics::{effect_draws, mcse, path_quantiles, quantiles, relative_risk, summarize, trend_draws};
use dglm::kalman::{aic_search, default_grid, iwkf_smooth};
use dglm::model::{
    assemble_model, AssembledModel, BlockRole, DynamicEffectBlock, FixedEffectBlock, Likelihood, ModelConfig,
};
use dglm::sampler::{run_chain, run_model, run_single_chain, PosteriorSamples, Sampler, SamplerSettings};
use dglm::simulate::{simulate_dataset, EffectTruth, GroundTruth, TrendTruth};

/// Writes straight to stderr so the line survives the test harness's output capture.
fn emit(line: std::fmt::Arguments) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn report(id: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    emit(format_args!(
        "criterion {id:>2} {name}: {} [{:.2}s] {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    ));
}

// ---------------------------------------------------------------------------
// Shared oracles

/// Largest gap between the empirical CDF of `draws` and `cdf`.
fn ks_one_sample(draws: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// Largest gap between two empirical CDFs.
fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

fn random_spd(q: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(q, q, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(q, q) * 0.5
}

fn random_spec(rng: &mut ChaCha8Rng) -> (ArProcessSpec, usize) {
    let p = rng.random_range(1..=2usize);
    let q = rng.random_range(1..=2usize);
    let n = rng.random_range(1..=6usize);
    let coefficients = (0..p)
        .map(|_| DMatrix::from_fn(q, q, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let spec = ArProcessSpec {
        order: p,
        dim: q,
        coefficients,
        free_coefficients: false,
        sigma_beta: random_spd(q, rng),
        init_mean: DVector::zeros(q),
        init_cov: DMatrix::identity(q, q),
        variance_priors: vec![VariancePrior::Fixed; q],
    };
    (spec, n)
}

/// State at time `t` (from `-p+1`) of a stacked path.
fn state_at(beta: &[f64], t: i64, p: usize, q: usize) -> DVector<f64> {
    let base = (t + p as i64 - 1) as usize * q;
    DVector::from_column_slice(&beta[base..base + q])
}

/// Dense innovation operator: row block `t` maps the stacked path to
/// `beta_t - sum_l F_l beta_{t-l}`.
fn innovation_operator(spec: &ArProcessSpec, n: usize) -> DMatrix<f64> {
    let (p, q) = (spec.order, spec.dim);
    let mut a = DMatrix::zeros(n * q, (n + p) * q);
    for t in 1..=n {
        let row = (t - 1) * q;
        let col = (t + p - 1) * q;
        a.view_mut((row, col), (q, q)).copy_from(&DMatrix::identity(q, q));
        for (l, f) in spec.coefficients.iter().enumerate() {
            let c = (t + p - 2 - l) * q;
            let mut v = a.view_mut((row, c), (q, q));
            v -= f;
        }
    }
    a
}

fn rw_block(name: &str, spec: ArProcessSpec, n: usize, role: BlockRole) -> DynamicEffectBlock {
    DynamicEffectBlock {
        name: name.into(),
        role,
        design: DMatrix::from_element(n, 1, 1.0),
        ar_spec: spec,
        standardization: None,
    }
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_ar_precision_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_quad = 0.0f64;
    let mut worst_block = 0.0f64;
    let mut ar1_specs = 0;
    for _ in 0..100 {
        let (spec, n) = random_spec(&mut rng);
        let (p, q) = (spec.order, spec.dim);
        let k = build_precision(&spec, n).unwrap();
        let beta: Vec<f64> = (0..(n + p) * q).map(|_| rng.sample(StandardNormal)).collect();
        let sigma_inv = spec.sigma_beta.clone().try_inverse().unwrap();
        let mut kernel_sum = 0.0;
        for t in 1..=n as i64 {
            let mut e = state_at(&beta, t, p, q);
            for (l, f) in spec.coefficients.iter().enumerate() {
                e -= f * state_at(&beta, t - 1 - l as i64, p, q);
            }
            kernel_sum += -0.5 * e.dot(&(&sigma_inv * &e));
        }
        let quad = -2.0 * log_prior_quadform(&k, &beta).unwrap();
        worst_quad = worst_quad.max((quad - (-2.0 * kernel_sum)).abs());

        if p == 1 {
            ar1_specs += 1;
            let f = &spec.coefficients[0];
            let ftsf = f.transpose() * &sigma_inv * f;
            let dense = k.to_dense();
            for t in 0..=n {
                for u in 0..=n {
                    let expected = if t == u {
                        match t {
                            0 => ftsf.clone(),
                            _ if t == n => sigma_inv.clone(),
                            _ => &ftsf + &sigma_inv,
                        }
                    } else if u == t + 1 {
                        -(f.transpose() * &sigma_inv)
                    } else if t == u + 1 {
                        -(&sigma_inv * f)
                    } else {
                        DMatrix::zeros(q, q)
                    };
                    let got = dense.view((t * q, u * q), (q, q));
                    worst_block = worst_block.max((got - expected).abs().max());
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_quad <= 1e-9 && worst_block <= 1e-12 && ar1_specs > 0 && elapsed.as_secs_f64() < 5.0;
    report(
        1,
        "AR precision oracle",
        pass,
        elapsed,
        &format!("max |quadform gap| {worst_quad:.2e}; max AR(1) block gap {worst_block:.2e} over {ar1_specs} AR(1) specs"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_block_conditional_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut covariance_form = 0;
    for _ in 0..100 {
        let (spec, n) = random_spec(&mut rng);
        let (p, q) = (spec.order, spec.dim);
        let first = -(p as i64) + 1;
        let (r, s) = loop {
            let a = rng.random_range(first..=n as i64);
            let b = rng.random_range(first..=n as i64);
            let (r, s) = (a.min(b), a.max(b));
            // The conditional is proper only when p consecutive states lie
            // outside the block; otherwise a zero-innovation path can vanish
            // outside it and the block precision is singular.
            if r - first >= p as i64 || n as i64 - s >= p as i64 {
                break (r, s);
            }
        };
        let dim = (n + p) * q;
        let beta: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let cond = block_conditional(&build_precision(&spec, n).unwrap(), &beta, r, s).unwrap();

        let inside: Vec<usize> = ((r + p as i64 - 1) as usize * q..(s + p as i64) as usize * q).collect();
        let outside: Vec<usize> = (0..dim).filter(|i| !inside.contains(i)).collect();
        let rest = DVector::from_iterator(outside.len(), outside.iter().map(|&i| beta[i]));
        let a = innovation_operator(&spec, n);
        let sigma_inv = spec.sigma_beta.clone().try_inverse().unwrap();
        let mut q_big = DMatrix::zeros(n * q, n * q);
        for t in 0..n {
            q_big.view_mut((t * q, t * q), (q, q)).copy_from(&sigma_inv);
        }
        let k = a.transpose() * q_big * &a;

        let (mean, cov) = if r >= 1 {
            // The initializers are conditioned on, so adding a proper prior on
            // them leaves this conditional unchanged and allows covariance form.
            covariance_form += 1;
            let mut proper = k.clone();
            for i in 0..p * q {
                proper[(i, i)] += 1.0;
            }
            let full = proper.try_inverse().unwrap();
            let s_io = full.select_rows(&inside).select_columns(&outside);
            let s_oo_inv = full.select_rows(&outside).select_columns(&outside).try_inverse().unwrap();
            let s_ii = full.select_rows(&inside).select_columns(&inside);
            (&s_io * &s_oo_inv * &rest, &s_ii - &s_io * &s_oo_inv * s_io.transpose())
        } else {
            let k_ii_inv = k.select_rows(&inside).select_columns(&inside).try_inverse().unwrap();
            let k_io = k.select_rows(&inside).select_columns(&outside);
            (-(&k_ii_inv * k_io * &rest), k_ii_inv)
        };
        let scale = |x: f64| x.abs().max(1.0);
        for (g, e) in cond.mean.iter().zip(mean.iter()) {
            worst = worst.max((g - e).abs() / scale(*e));
        }
        for (g, e) in cond.cov().iter().zip(cov.iter()) {
            worst = worst.max((g - e).abs() / scale(*e));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-9 && elapsed.as_secs_f64() < 5.0;
    report(
        2,
        "block-conditional oracle",
        pass,
        elapsed,
        &format!("max scaled gap {worst:.2e}; {covariance_form} of 100 checked in covariance form"),
    );
    assert!(pass);
}

/// Flat-likelihood model with one univariate dynamic block.
fn flat_model(spec: ArProcessSpec, n: usize) -> AssembledModel {
    AssembledModel::new(
        DVector::zeros(n),
        FixedEffectBlock::empty(n),
        vec![rw_block("trend", spec, n, BlockRole::Trend)],
        Likelihood::Flat,
    )
    .unwrap()
}

#[test]
fn criterion_03_conjugate_kernels() {
    let start = Instant::now();
    const DRAWS: usize = 100_000;

    // Variance: IW(n_sigma = 1, S_sigma^{-1} = 1) prior, innovations (1, 1).
    // Posterior IW(a, b) with a = n_sigma + n = 3 and b = (S_sigma + 2)^{-1};
    // univariate, sigma^{-2} ~ b chi2_a.
    let prior = VariancePrior::from_inverse_wishart(1.0, 1.0);
    let model = flat_model(ArProcessSpec::random_walk1(1.0, 0.0, 1.0, prior), 2);
    let mut sampler = Sampler::new(&model, SamplerSettings::default()).unwrap();
    let mut state = sampler
        .state_from(vec![DVector::from_vec(vec![0.0, 1.0, 2.0])], DVector::zeros(0), vec![vec![1.0]], vec![vec![]])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut gibbs: Vec<f64> = (0..DRAWS)
        .map(|_| {
            sampler.sample_variance(&mut state, 0, &mut rng).unwrap();
            state.variances[0][0]
        })
        .collect();
    let (a, b) = (1.0 + 2.0, 1.0 / (1.0 + 2.0));
    let chi = ChiSquared::new(a).unwrap();
    let mut direct: Vec<f64> = (0..DRAWS).map(|_| 1.0 / (b * chi.sample(&mut rng))).collect();
    let ks_var = ks_two_sample(&mut gibbs, &mut direct);

    // AR(1) coefficient: mean sum b_t b_{t-1} / sum b_{t-1}^2, variance sigma2 / sum b_{t-1}^2.
    let mut spec = ArProcessSpec::univariate(&[0.5], 0.7, 0.0, 1.0, VariancePrior::Fixed);
    spec.free_coefficients = true;
    let n = 12;
    let model = flat_model(spec, n);
    let mut sampler = Sampler::new(&model, SamplerSettings::default()).unwrap();
    let path: Vec<f64> = (0..=n).map(|_| rng.sample(StandardNormal)).collect();
    let num: f64 = (1..=n).map(|t| path[t] * path[t - 1]).sum();
    let den: f64 = (1..=n).map(|t| path[t - 1] * path[t - 1]).sum();
    let (mean, var) = (num / den, 0.7 / den);
    let (m, c) = dglm::sampler::coefficient_full_conditional(&path, 1, 0.7).unwrap();
    let formula_gap = (m[0] - mean).abs().max((c[(0, 0)] - var).abs());
    let mut state = sampler
        .state_from(vec![DVector::from_vec(path)], DVector::zeros(0), vec![vec![0.7]], vec![vec![0.5]])
        .unwrap();
    let mut f_draws: Vec<f64> = (0..DRAWS)
        .map(|_| {
            sampler.sample_coefficients(&mut state, 0, &mut rng).unwrap();
            state.coefficients[0][0]
        })
        .collect();
    let normal = Normal::new(mean, var.sqrt()).unwrap();
    let ks_f = ks_one_sample(&mut f_draws, |x| normal.cdf(x));

    let elapsed = start.elapsed();
    let pass = ks_var < 0.02 && formula_gap <= 1e-15 && ks_f < 0.02 && elapsed.as_secs_f64() < 30.0;
    report(
        3,
        "conjugate kernels",
        pass,
        elapsed,
        &format!("variance KS {ks_var:.4}; AR coefficient formula gap {formula_gap:.1e}, KS {ks_f:.4}"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_truncated_variance_mh() {
    let start = Instant::now();
    const DRAWS: usize = 100_000;
    const THIN: usize = 10;
    let g = 1.0;
    let model = flat_model(
        ArProcessSpec::random_walk1(1.0, 0.0, 1.0, VariancePrior::TruncatedGaussian { variance: g }),
        3,
    );
    let mut sampler = Sampler::new(&model, SamplerSettings::default()).unwrap();
    // Innovations (0.5, -1, 0.8).
    let path = vec![0.0, 0.5, -0.5, 0.3];
    let ss: f64 = 0.25 + 1.0 + 0.64;
    let mut state = sampler
        .state_from(vec![DVector::from_vec(path)], DVector::zeros(0), vec![vec![1.0]], vec![vec![]])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        sampler.sample_variance(&mut state, 0, &mut rng).unwrap();
    }
    let mut draws = Vec::with_capacity(DRAWS);
    for i in 1..=DRAWS * THIN {
        sampler.sample_variance(&mut state, 0, &mut rng).unwrap();
        if i % THIN == 0 {
            draws.push(state.variances[0][0]);
        }
    }

    // Target on a fine grid, normalized by the trapezoid rule.
    let density = |s: f64| -> f64 {
        if s <= 0.0 {
            0.0
        } else {
            (-0.5 * s * s / g - 1.5 * s.ln() - 0.5 * ss / s).exp()
        }
    };
    let (upper, cells) = (12.0, 400_000usize);
    let h = upper / cells as f64;
    let mut cdf = vec![0.0; cells + 1];
    for i in 1..=cells {
        let (x0, x1) = ((i - 1) as f64 * h, i as f64 * h);
        cdf[i] = cdf[i - 1] + 0.5 * h * (density(x0) + density(x1));
    }
    let total = cdf[cells];
    let tail = density(upper) / total;
    let grid_cdf = |x: f64| -> f64 {
        if x >= upper {
            return 1.0;
        }
        let pos = x / h;
        let i = (pos.floor() as usize).min(cells - 1);
        let w = pos - i as f64;
        ((1.0 - w) * cdf[i] + w * cdf[i + 1]) / total
    };
    let ks = ks_one_sample(&mut draws, grid_cdf);
    let elapsed = start.elapsed();
    let pass = ks < 0.02 && tail < 1e-12 && elapsed.as_secs_f64() < 60.0;
    report(
        4,
        "truncated-Gaussian variance MH",
        pass,
        elapsed,
        &format!("KS {ks:.4} over {DRAWS} draws (grid tail density {tail:.1e})"),
    );
    assert!(pass);
}

/// `|estimate - target| <= 3 mcse`, recorded for the report.
struct MomentCheck {
    worst: f64,
    failures: Vec<String>,
}

impl MomentCheck {
    fn new() -> Self {
        Self { worst: 0.0, failures: Vec::new() }
    }

    fn check(&mut self, name: &str, values: &[f64], target: f64) {
        let (se, _) = mcse(values);
        let est = values.iter().sum::<f64>() / values.len() as f64;
        let z = (est - target).abs() / se;
        self.worst = self.worst.max(z);
        if z > 3.0 {
            self.failures.push(format!("{name}: {est:.4} vs {target:.4} ({z:.1} se)"));
        }
    }

    /// Second central moment about the known mean.
    fn check_variance(&mut self, name: &str, values: &[f64], mean: f64, target: f64) {
        let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        self.check(name, &sq, target);
    }
}

#[test]
fn criterion_05_prior_recovery() {
    let start = Instant::now();
    let n = 50;
    let (mu_a, var_a) = (1.0, 2.0);
    let (mu_b, var_b) = (-1.0, 0.5);
    let g = 1.0;
    let spec_a = ArProcessSpec::random_walk1(1.0, mu_a, var_a, VariancePrior::InverseGamma { shape: 3.0, scale: 2.0 });
    let spec_b = ArProcessSpec::random_walk1(0.5, mu_b, var_b, VariancePrior::TruncatedGaussian { variance: g });
    let alpha_mean = DVector::from_vec(vec![0.5, -0.3]);
    let alpha_var = [0.2, 0.4];
    let fixed = FixedEffectBlock {
        design: DMatrix::from_fn(n, 2, |t, j| ((t + 1) as f64 / (3.0 + j as f64)).sin()),
        names: vec!["x1".into(), "x2".into()],
        standardization: vec![None, None],
        prior_mean: alpha_mean.clone(),
        prior_cov: DMatrix::from_diagonal(&DVector::from_row_slice(&alpha_var)),
    };
    let model = AssembledModel::new(
        DVector::zeros(n),
        fixed,
        vec![
            rw_block("a", spec_a, n, BlockRole::Trend),
            rw_block("b", spec_b, n, BlockRole::Other),
        ],
        Likelihood::Flat,
    )
    .unwrap();
    let settings = SamplerSettings {
        n_burnin: 2000,
        n_iterations: 100_000,
        thin: 1,
        n_chains: 1,
        seed: 5,
        ..SamplerSettings::default()
    };
    let chain = run_single_chain(&model, &settings, 0).unwrap();

    // E[tau2] under IG(3, 2) is 1; E[sigma2] under N(0, 1) truncated to (0, inf) is sqrt(2 / pi).
    let e_tau2 = 2.0 / (3.0 - 1.0);
    let e_sigma2 = (2.0 * g / std::f64::consts::PI).sqrt();
    let mut m = MomentCheck::new();
    m.check("tau2", &chain.variances[0].column(0), e_tau2);
    m.check("sigma2", &chain.variances[1].column(0), e_sigma2);
    // RW1 marginals: beta_t ~ N(mu0, var0 + t E[variance]).
    for t in [0usize, 1, 25, 50] {
        let a = chain.beta[0].column(t);
        m.check(&format!("a[{t}] mean"), &a, mu_a);
        m.check_variance(&format!("a[{t}] var"), &a, mu_a, var_a + t as f64 * e_tau2);
        let b = chain.beta[1].column(t);
        m.check(&format!("b[{t}] mean"), &b, mu_b);
        m.check_variance(&format!("b[{t}] var"), &b, mu_b, var_b + t as f64 * e_sigma2);
    }
    for j in 0..2 {
        let a = chain.alpha.column(j);
        m.check(&format!("alpha[{j}] mean"), &a, alpha_mean[j]);
        m.check_variance(&format!("alpha[{j}] var"), &a, alpha_mean[j], alpha_var[j]);
    }
    let elapsed = start.elapsed();
    let pass = m.failures.is_empty() && elapsed.as_secs_f64() < 300.0;
    report(
        5,
        "prior recovery",
        pass,
        elapsed,
        &format!("largest deviation {:.2} mcse; failures {:?}", m.worst, m.failures),
    );
    assert!(pass);
}

/// Exact posterior of a Gaussian-likelihood model with known variances:
/// stacked paths (one per block) followed by the fixed effects.
fn dense_posterior(model: &AssembledModel, obs_var: f64) -> DVector<f64> {
    let n = model.n();
    let sizes: Vec<usize> = model.dynamic.iter().map(|b| n + b.p()).collect();
    let r = model.fixed.len();
    let dim = sizes.iter().sum::<usize>() + r;
    let mut prec = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    let mut design = DMatrix::zeros(n, dim);
    let mut offset = 0;
    for (block, &size) in model.dynamic.iter().zip(&sizes) {
        let spec = &block.ar_spec;
        let p = spec.order;
        let a = innovation_operator(spec, n);
        let k = a.transpose() * &a / spec.sigma_beta[(0, 0)];
        let mut view = prec.view_mut((offset, offset), (size, size));
        view += k;
        let init_prec = 1.0 / spec.init_cov[(0, 0)];
        for i in 0..p {
            prec[(offset + i, offset + i)] += init_prec;
            rhs[offset + i] += init_prec * spec.init_mean[0];
        }
        for t in 0..n {
            design[(t, offset + p + t)] = block.design[(t, 0)];
        }
        offset += size;
    }
    let c_inv = model.fixed.prior_cov.clone().try_inverse().unwrap();
    prec.view_mut((offset, offset), (r, r)).copy_from(&c_inv);
    rhs.rows_mut(offset, r).copy_from(&(&c_inv * &model.fixed.prior_mean));
    design.view_mut((0, offset), (n, r)).copy_from(&model.fixed.design);
    prec += design.transpose() * &design / obs_var;
    rhs += design.transpose() * &model.response / obs_var;
    prec.cholesky().unwrap().solve(&rhs)
}

#[test]
fn criterion_06_gaussian_surrogate() {
    let start = Instant::now();
    let n = 50;
    let obs_var: f64 = 0.25;
    let tau2 = 0.01;
    let mut mcmc_failures = Vec::new();
    let mut worst_z = 0.0f64;
    let mut worst_kalman = 0.0f64;
    for (label, spec) in [
        ("RW1", ArProcessSpec::random_walk1(tau2, 0.0, 1.0, VariancePrior::Fixed)),
        ("RW2", ArProcessSpec::random_walk2(tau2, 0.0, 1.0, VariancePrior::Fixed)),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..n).map(|t| (t as f64 / 5.0).sin()).collect();
        let y = DVector::from_fn(n, |t, _| {
            1.0 + 0.3 * (t as f64 / 8.0).cos() + 0.5 * x[t] + obs_var.sqrt() * rng.sample::<f64, _>(StandardNormal)
        });
        let fixed = FixedEffectBlock {
            design: DMatrix::from_column_slice(n, 1, &x),
            names: vec!["x".into()],
            standardization: vec![None],
            prior_mean: DVector::zeros(1),
            prior_cov: DMatrix::identity(1, 1),
        };
        let model = AssembledModel::new(
            y,
            fixed,
            vec![rw_block("trend", spec, n, BlockRole::Trend)],
            Likelihood::Gaussian { variance: obs_var },
        )
        .unwrap();
        let exact = dense_posterior(&model, obs_var);
        let p = model.dynamic[0].p();

        let smooth = iwkf_smooth(&model, &[vec![tau2]]).unwrap();
        let mut kalman: Vec<f64> = smooth.beta[0].iter().copied().collect();
        kalman.extend(smooth.alpha.iter());
        for (k, e) in kalman.iter().zip(exact.iter()) {
            worst_kalman = worst_kalman.max((k - e).abs());
        }

        let settings = SamplerSettings {
            n_burnin: 5000,
            n_iterations: 100_000,
            thin: 1,
            n_chains: 1,
            seed: 6,
            ..SamplerSettings::default()
        };
        let chain = run_single_chain(&model, &settings, 0).unwrap();
        // First, middle and last time points, plus the fixed effect.
        let mut checks: Vec<(String, Vec<f64>, f64)> = [1usize, n / 2, n]
            .iter()
            .map(|&t| {
                let col = t + p - 1;
                (format!("{label} beta[{t}]"), chain.beta[0].column(col), exact[col])
            })
            .collect();
        checks.push((format!("{label} alpha"), chain.alpha.column(0), exact[n + p]));
        for (name, draws, target) in checks {
            let (se, _) = mcse(&draws);
            let est = draws.iter().sum::<f64>() / draws.len() as f64;
            let z = (est - target).abs() / se;
            worst_z = worst_z.max(z);
            if z > 3.0 {
                mcmc_failures.push(format!("{name}: {est:.5} vs {target:.5} ({z:.1} se)"));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = mcmc_failures.is_empty() && worst_kalman <= 1e-8 && elapsed.as_secs_f64() < 300.0;
    report(
        6,
        "Gaussian-surrogate end-to-end",
        pass,
        elapsed,
        &format!(
            "MCMC largest deviation {worst_z:.2} mcse, failures {mcmc_failures:?}; smoother max gap {worst_kalman:.2e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_protocol_arithmetic() {
    let start = Instant::now();
    let settings = SamplerSettings {
        n_chains: 1,
        ..SamplerSettings::default()
    };
    let model = flat_model(ArProcessSpec::random_walk1(1.0, 0.0, 1.0, VariancePrior::Fixed), 1);
    let chain = run_single_chain(&model, &settings, 0).unwrap();
    let protocol = (settings.n_burnin, settings.n_iterations, settings.thin) == (40_000, 100_000, 5);
    let retained = chain.log_lik.len();
    let rr = relative_risk(&[0.0], 10.0)[0];
    let elapsed = start.elapsed();
    let pass = protocol
        && settings.retained_draws() == 20_000
        && retained == 20_000
        && chain.beta[0].n_draws() == 20_000
        && rr == 1.0
        && elapsed.as_secs_f64() < 1.0;
    report(
        10,
        "protocol arithmetic",
        pass,
        elapsed,
        &format!("retained {retained} draws per chain; RR(0) = {rr}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Simulation studies on daily Poisson series of three years.

const DAYS: usize = 1095;
const GAMMA: f64 = 7e-4;
const TEMPERATURE_EFFECT: f64 = 0.01;

/// Root mean square difference after removing each series' mean. The level
/// of the trend is shared with the centered covariates, so only its shape is
/// identified.
fn demeaned_rmse(fit: &[f64], truth: &[f64]) -> f64 {
    let mf = fit.iter().sum::<f64>() / fit.len() as f64;
    let mt = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss: f64 = fit.iter().zip(truth).map(|(f, t)| ((f - mf) - (t - mt)).powi(2)).sum();
    (ss / fit.len() as f64).sqrt()
}

fn truth_with(trend: TrendTruth, effect: EffectTruth) -> GroundTruth {
    let mut truth = GroundTruth::new(trend, effect);
    truth.temperature_effect = TEMPERATURE_EFFECT;
    truth
}

/// Posterior median trend and the 95% interval of the constant pollutant
/// effect per unit, from all chains.
fn trend_and_gamma(model: &AssembledModel, samples: &PosteriorSamples) -> (Vec<f64>, [f64; 3]) {
    let mut trend = Vec::new();
    let mut gamma = Vec::new();
    for chain in &samples.chains {
        trend.extend(trend_draws(model, chain));
        gamma.extend(effect_draws(model, chain).iter().map(|d| d[0]));
    }
    let median = path_quantiles(&trend, |x| x).iter().map(|q| q[1]).collect();
    let q = quantiles(&gamma, &[0.025, 0.5, 0.975]);
    (median, [q[0], q[1], q[2]])
}

#[test]
fn criterion_07_simulation_recovery() {
    const REPLICATES: u64 = 50;
    let start = Instant::now();
    let rw2 = ModelConfig::from_model_id(5).unwrap();
    let spline = ModelConfig::from_model_id(1).unwrap();
    let truth = truth_with(
        TrendTruth::Process { variances: vec![1e-9], init: vec![3.5, 3.5] },
        EffectTruth::Constant { gamma: GAMMA },
    );
    let mut covered = 0;
    let mut rmse_rw2 = Vec::new();
    let mut rmse_spline = Vec::new();
    for rep in 1..=REPLICATES {
        let (data, record) = simulate_dataset(&rw2, &truth, DAYS, rep).unwrap();
        let settings = SamplerSettings {
            n_chains: 1,
            seed: rep,
            ..SamplerSettings::default()
        };
        let (model, samples) = run_chain(&data, &rw2, &settings).unwrap();
        let true_trend = &record.trend[model.first_row..model.first_row + model.n()];
        let (trend, gamma) = trend_and_gamma(&model, &samples);
        rmse_rw2.push(demeaned_rmse(&trend, true_trend));
        covered += (gamma[0] <= GAMMA && GAMMA <= gamma[2]) as usize;

        let (model, samples) = run_chain(&data, &spline, &settings).unwrap();
        let (trend, _) = trend_and_gamma(&model, &samples);
        rmse_spline.push(demeaned_rmse(&trend, true_trend));
        emit(format_args!(
            "  replicate {rep}: gamma [{:.2e}, {:.2e}] covered {}, trend rmse rw2 {:.4} spline {:.4}",
            gamma[0],
            gamma[2],
            gamma[0] <= GAMMA && GAMMA <= gamma[2],
            rmse_rw2.last().unwrap(),
            rmse_spline.last().unwrap()
        ));
    }
    let coverage = covered as f64 / REPLICATES as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m_rw2, m_spline) = (mean(&rmse_rw2), mean(&rmse_spline));
    let elapsed = start.elapsed();
    let pass = (0.90..=0.99).contains(&coverage) && m_rw2 < m_spline && elapsed.as_secs_f64() < 7200.0;
    report(
        7,
        "simulation recovery",
        pass,
        elapsed,
        &format!("gamma coverage {coverage:.2}; mean trend rmse rw2 {m_rw2:.4} vs spline {m_spline:.4}"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_likelihood_vs_bayes() {
    let start = Instant::now();
    let config = ModelConfig::from_model_id(2).unwrap();
    let truth = truth_with(
        TrendTruth::Seasonal { level: 3.5, amplitude: 0.15, peak_day: 15.0 },
        EffectTruth::RandomWalk { gamma0: GAMMA, variance: 1e-9 },
    );
    let (data, _) = simulate_dataset(&config, &truth, DAYS, 8).unwrap();
    let model = assemble_model(&data, &config).unwrap();
    let grid = default_grid();
    let search = aic_search(&model, &grid).unwrap();
    let selected = search.best_row().variances[0][0];
    let near_floor = selected <= grid[2];

    let settings = SamplerSettings { seed: 8, ..SamplerSettings::default() };
    let samples = run_model(&model, &settings).unwrap();
    let sigma2: Vec<f64> = samples.chains.iter().flat_map(|c| c.variances[0].column(0)).collect();
    let median = quantiles(&sigma2, &[0.5])[0];
    let elapsed = start.elapsed();
    let pass = near_floor && median > selected && elapsed.as_secs_f64() < 1800.0;
    report(
        8,
        "likelihood vs Bayes variance",
        pass,
        elapsed,
        &format!(
            "AIC selects {selected:.1e} (grid floor {:.1e}); posterior median {median:.2e}",
            grid[0]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_diagnostics_calibration() {
    let start = Instant::now();
    let config = ModelConfig::from_model_id(3).unwrap();
    let truth = truth_with(
        TrendTruth::Process { variances: vec![1e-4], init: vec![3.5] },
        EffectTruth::Constant { gamma: GAMMA },
    );
    let (data, _) = simulate_dataset(&config, &truth, DAYS, 9).unwrap();
    let settings = SamplerSettings {
        n_burnin: 4000,
        n_iterations: 10_000,
        thin: 5,
        n_chains: 2,
        seed: 9,
        ..SamplerSettings::default()
    };
    let (model, samples) = run_chain(&data, &config, &settings).unwrap();
    let summary = summarize(&model, &samples, 20).unwrap();
    let max_rhat = summary.max_rhat.unwrap_or(f64::INFINITY);
    let inside = |acf: &dglm::diagnostics::Acf| (1..=20).filter(|&lag| acf.values[lag].abs() <= acf.band).count();
    let realized = inside(&summary.realized_acf);
    let plug_in = inside(&summary.residual_acf);
    let elapsed = start.elapsed();
    let pass = max_rhat < 1.05 && realized >= 18 && elapsed.as_secs_f64() < 600.0;
    report(
        9,
        "diagnostics calibration",
        pass,
        elapsed,
        &format!(
            "max R-hat {max_rhat:.3} over all parameters and path entries; {realized} of 20 realized-residual ACF lags inside the band ({plug_in} at posterior medians)"
        ),
    );
    assert!(pass);
}
