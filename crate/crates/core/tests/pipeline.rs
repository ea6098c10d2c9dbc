//! End-to-end checks of assembly, sampling, file output and diagnostics.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{Discrete, Poisson};

use dglm::ar::{ArProcessSpec, VariancePrior};
use dglm::diagnostics::{dic_from_parts, mcse};
use dglm::io::{ingest_csv, run_fit, run_simulate, RunConfig};
use dglm::model::{
    assemble_model, AssembledModel, BlockRole, DynamicEffectBlock, FixedEffectBlock, Likelihood, ModelConfig,
    Standardization,
};
use dglm::sampler::{run_single_chain, SamplerSettings};
use dglm::simulate::{simulate_dataset, EffectTruth, GroundTruth, TrendTruth};

fn rw1_block(n: usize, tau2: f64) -> DynamicEffectBlock {
    DynamicEffectBlock {
        name: "trend".into(),
        role: BlockRole::Trend,
        design: DMatrix::from_element(n, 1, 1.0),
        ar_spec: ArProcessSpec::random_walk1(tau2, 0.0, 4.0, VariancePrior::Fixed),
        standardization: None,
    }
}

fn short_run(seed: u64) -> SamplerSettings {
    SamplerSettings {
        n_burnin: 200,
        n_iterations: 400,
        thin: 2,
        n_chains: 1,
        seed,
        ..SamplerSettings::default()
    }
}

fn truth_for(id: u8) -> GroundTruth {
    let cfg = ModelConfig::from_model_id(id).unwrap();
    let trend = match cfg.trend {
        dglm::model::TrendModel::NaturalSpline { .. } => TrendTruth::Seasonal {
            level: 3.5,
            amplitude: 0.15,
            peak_day: 10.0,
        },
        dglm::model::TrendModel::RandomWalk1 => TrendTruth::Process { variances: vec![1e-5], init: vec![3.5] },
        dglm::model::TrendModel::RandomWalk2 => TrendTruth::Process { variances: vec![1e-8], init: vec![3.5, 3.5] },
        dglm::model::TrendModel::LocalLinearTrend => TrendTruth::Process {
            variances: vec![1e-6, 1e-9],
            init: vec![3.5, 0.0],
        },
    };
    GroundTruth::new(trend, EffectTruth::Constant { gamma: 7e-4 })
}

#[test]
fn standardized_columns_have_zero_mean_and_unit_sd() {
    for id in 1..=8u8 {
        let cfg = ModelConfig::from_model_id(id).unwrap();
        let (data, _) = simulate_dataset(&cfg, &truth_for(id), 400, 100 + id as u64).unwrap();
        let model = assemble_model(&data, &cfg).unwrap();
        let n = model.n() as f64;
        let mut columns: Vec<Vec<f64>> = Vec::new();
        for (j, s) in model.fixed.standardization.iter().enumerate() {
            if s.is_some() {
                columns.push(model.fixed.design.column(j).iter().copied().collect());
            }
        }
        for b in &model.dynamic {
            if b.standardization.is_some() {
                columns.push(b.design.column(0).iter().copied().collect());
            }
        }
        assert!(!columns.is_empty(), "model {id} has no standardized columns");
        for c in columns {
            let m = c.iter().sum::<f64>() / n;
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!(m.abs() < 1e-10, "model {id}: mean {m}");
            assert!((sd - 1.0).abs() < 1e-10, "model {id}: sd {sd}");
        }
    }
}

#[test]
fn logged_proposals_use_the_poisson_likelihood_ratio() {
    let n = 40;
    let y: Vec<f64> = (0..n).map(|t| (5.0 + 3.0 * (t as f64 / 6.0).sin()).round()).collect();
    let model = AssembledModel::new(
        DVector::from_vec(y),
        FixedEffectBlock::empty(n),
        vec![rw1_block(n, 0.01)],
        Likelihood::Poisson,
    )
    .unwrap();
    let settings = SamplerSettings {
        audit: true,
        n_burnin: 0,
        n_iterations: 300,
        thin: 1,
        ..short_run(21)
    };
    let chain = run_single_chain(&model, &settings, 0).unwrap();
    assert!(!chain.audit.is_empty());
    let mut accepted = 0;
    for rec in &chain.audit {
        let ll = |eta: &[f64]| -> f64 {
            rec.y
                .iter()
                .zip(eta)
                .map(|(&k, &e)| Poisson::new(e.exp()).unwrap().ln_pmf(k as u64))
                .sum()
        };
        let expected = ll(&rec.eta_proposed) - ll(&rec.eta_current);
        assert!(
            (rec.log_ratio - expected).abs() < 1e-9 * expected.abs().max(1.0),
            "log ratio {} vs {}",
            rec.log_ratio,
            expected
        );
        accepted += rec.accepted as usize;
    }
    assert!(accepted > 0);
}

#[test]
fn block_size_leaves_posterior_means_compatible() {
    let n = 50;
    let y: Vec<f64> = (0..n).map(|t| (t as f64 / 8.0).cos() + 0.3 * ((t * 7 % 11) as f64 / 11.0 - 0.5)).collect();
    let model = AssembledModel::new(
        DVector::from_vec(y),
        FixedEffectBlock::empty(n),
        vec![rw1_block(n, 0.01)],
        Likelihood::Gaussian { variance: 0.25 },
    )
    .unwrap();
    let fits: Vec<_> = [5usize, 20]
        .iter()
        .map(|&g| {
            let settings = SamplerSettings {
                beta_block_size: g,
                n_burnin: 2_000,
                n_iterations: 20_000,
                thin: 1,
                n_chains: 1,
                seed: 1,
                ..SamplerSettings::default()
            };
            run_single_chain(&model, &settings, 0).unwrap()
        })
        .collect();
    for t in [1usize, 25, 50] {
        let (a, b) = (fits[0].beta[0].column(t), fits[1].beta[0].column(t));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (se_a, se_b) = (mcse(&a).0, mcse(&b).0);
        let gap = (mean(&a) - mean(&b)).abs();
        assert!(gap <= 1.96 * (se_a + se_b), "t = {t}: gap {gap}, se {se_a} and {se_b}");
    }
}

#[test]
fn dic_has_no_complexity_for_a_degenerate_chain() {
    let n = 12;
    let y: Vec<f64> = (0..n).map(|t| (3 + t % 4) as f64).collect();
    let model = AssembledModel::new(
        DVector::from_vec(y),
        FixedEffectBlock::empty(n),
        vec![rw1_block(n, 0.01)],
        Likelihood::Poisson,
    )
    .unwrap();
    let eta = DVector::from_element(n, 1.3);
    let ll = model.log_likelihood(&eta);
    let dic = dic_from_parts(&model, &vec![ll; 50], &eta);
    assert!(dic.pd.abs() < 1e-12 * ll.abs());
    assert!((dic.dic + 2.0 * ll).abs() < 1e-12 * ll.abs());
}

#[test]
fn dic_is_unchanged_by_covariate_standardization() {
    let n = 30;
    let x: Vec<f64> = (0..n).map(|t| 20.0 + 5.0 * (t as f64 / 4.0).sin()).collect();
    let y: Vec<f64> = x.iter().map(|v| 0.1 * v + 0.2).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let fixed = |col: Vec<f64>, s: Option<Standardization>| FixedEffectBlock {
        design: DMatrix::from_fn(n, 2, |t, j| if j == 0 { 1.0 } else { col[t] }),
        names: vec!["intercept".into(), "x".into()],
        standardization: vec![None, s],
        prior_mean: DVector::zeros(2),
        prior_cov: DMatrix::identity(2, 2),
    };
    let z: Vec<f64> = x.iter().map(|v| (v - mean) / sd).collect();
    let like = Likelihood::Gaussian { variance: 0.3 };
    let raw = AssembledModel::new(DVector::from_vec(y.clone()), fixed(x, None), vec![], like).unwrap();
    let std = AssembledModel::new(DVector::from_vec(y), fixed(z, Some(Standardization { mean, sd })), vec![], like)
        .unwrap();
    // Matched draws: (a, b) on the standardized scale is (a - b mean / sd, b / sd) on the raw one.
    let draws: Vec<(f64, f64)> = (0..40).map(|i| (4.0 + 0.01 * i as f64, 0.5 - 0.003 * i as f64)).collect();
    let summarize = |model: &AssembledModel, to_alpha: &dyn Fn(f64, f64) -> DVector<f64>| {
        let etas: Vec<DVector<f64>> = draws.iter().map(|&(a, b)| &model.fixed.design * to_alpha(a, b)).collect();
        let lls: Vec<f64> = etas.iter().map(|e| model.log_likelihood(e)).collect();
        let eta_mean = etas.iter().fold(DVector::zeros(n), |acc, e| acc + e) / etas.len() as f64;
        dic_from_parts(model, &lls, &eta_mean)
    };
    let d_std = summarize(&std, &|a, b| DVector::from_vec(vec![a, b]));
    let d_raw = summarize(&raw, &|a, b| DVector::from_vec(vec![a - b * mean / sd, b / sd]));
    assert!((d_std.dic - d_raw.dic).abs() < 1e-9 * d_std.dic.abs().max(1.0));
    assert!((d_std.pd - d_raw.pd).abs() < 1e-9);
}

fn config_for(id: u8, seed: u64, n: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.set_model_id(id).unwrap();
    cfg.sampler = short_run(seed);
    cfg.simulate.n = n;
    cfg
}

#[test]
fn simulated_data_survives_the_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for id in [1u8, 4, 6] {
        let cfg = config_for(id, 3, 150);
        let out = dir.path().join(format!("m{id}"));
        let (dataset, truth) = run_simulate(&cfg, &out, 3).unwrap();
        let read = ingest_csv(&out.join("data.csv"), &cfg.io.columns).unwrap();
        assert_eq!(read, dataset);
        assert_eq!(truth.model_id, id);
        assert!(out.join("truth.json").exists() && out.join("truth.csv").exists());
    }
}

fn read_all(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn fits_are_reproducible_and_files_are_labelled() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_for(3, 5, 120);
    let (dataset, _) = run_simulate(&cfg, &dir.path().join("data"), 5).unwrap();
    let first = run_fit(&cfg, &dataset, &dir.path().join("a")).unwrap();
    run_fit(&cfg, &dataset, &dir.path().join("b")).unwrap();

    for name in &first.files {
        if name == "manifest.json" {
            continue;
        }
        let a = read_all(&dir.path().join("a"), name);
        assert_eq!(a, read_all(&dir.path().join("b"), name), "{name} differs between identical runs");
        if name.ends_with(".csv") {
            assert!(a.starts_with('#'), "{name} lacks a header comment");
        }
    }
    assert!(first.files.iter().any(|f| f == "samples.csv"));

    // The manifest's config alone reproduces the run.
    let manifest: serde_json::Value = serde_json::from_str(&read_all(&dir.path().join("a"), "manifest.json")).unwrap();
    let replay = RunConfig::from_toml_str(manifest["config"].as_str().unwrap()).unwrap();
    run_fit(&replay, &dataset, &dir.path().join("c")).unwrap();
    assert_eq!(
        read_all(&dir.path().join("a"), "samples.csv"),
        read_all(&dir.path().join("c"), "samples.csv")
    );
}
