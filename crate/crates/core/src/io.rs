//! Configuration, CSV ingestion and the fit / simulate / score / diagnose pipelines.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{Duration, NaiveDate};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, quantiles, FitSummary, INTERVAL, RR_INCREMENT};
use crate::error::{DglmError, Result};
use crate::kalman::{aic_search, log_grid, AicSearch, SmootherOutput};
use crate::model::{
    assemble_model, AssembledModel, BlockRole, Hyperparameters, ModelConfig, PollutionEffect,
    TimeSeriesDataset, TrendModel, DEFAULT_TREND_DF, POLLUTANT, TEMPERATURE,
};
use crate::sampler::{run_model, ChainSamples, DrawMatrix, KernelStats, PosteriorSamples, SamplerSettings};
use crate::simulate::{simulate_dataset, EffectTruth, GroundTruth, TrendTruth, TruthRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Bayes,
    Kalman,
    Both,
}

impl Estimator {
    pub fn bayes(self) -> bool {
        matches!(self, Estimator::Bayes | Estimator::Both)
    }
    pub fn kalman(self) -> bool {
        matches!(self, Estimator::Kalman | Estimator::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendKind {
    NaturalSpline,
    RandomWalk1,
    RandomWalk2,
    LocalLinearTrend,
}

/// `[model]` section. Either `id` (1..=8) or both `trend` and `effect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub id: Option<u8>,
    pub trend: Option<TrendKind>,
    pub effect: Option<PollutionEffect>,
    pub trend_df: usize,
    pub temperature_df: usize,
    pub pollution_lag: usize,
    pub day_of_week: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            id: None,
            trend: None,
            effect: None,
            trend_df: DEFAULT_TREND_DF,
            temperature_df: 3,
            pollution_lag: 1,
            day_of_week: false,
        }
    }
}

/// Input column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnBindings {
    pub date: String,
    pub count: String,
    pub pollutant: String,
    pub temperature: String,
}

impl Default for ColumnBindings {
    fn default() -> Self {
        Self {
            date: "date".into(),
            count: "deaths".into(),
            pollutant: POLLUTANT.into(),
            temperature: TEMPERATURE.into(),
        }
    }
}

/// `[io]` section. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    pub format: SampleFormat,
    pub estimator: Estimator,
    pub columns: ColumnBindings,
    /// Largest residual ACF lag.
    pub max_lag: usize,
    /// Keep every k-th retained draw for the realized residual file.
    pub residual_every: usize,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            input: None,
            output: PathBuf::from("out"),
            format: SampleFormat::Csv,
            estimator: Estimator::Bayes,
            columns: ColumnBindings::default(),
            max_lag: diagnostics::DEFAULT_MAX_LAG,
            residual_every: 10,
        }
    }
}

/// `[kalman]` section: the log-spaced variance grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanSection {
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
}

impl Default for KalmanSection {
    fn default() -> Self {
        Self {
            grid_min: 1e-8,
            grid_max: 1.0,
            grid_points: 17,
        }
    }
}

/// `[simulate]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    pub truth: GroundTruth,
}

/// Seasonal log trend around 3.5 and a constant effect giving RR 1.007 per 10 units.
pub fn default_truth() -> GroundTruth {
    GroundTruth::new(
        TrendTruth::Seasonal {
            level: 3.5,
            amplitude: 0.15,
            peak_day: 15.0,
        },
        EffectTruth::Constant { gamma: 7e-4 },
    )
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            n: 1095,
            truth: default_truth(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub priors: Hyperparameters,
    pub sampler: SamplerSettings,
    pub io: IoSection,
    pub kalman: KalmanSection,
    pub simulate: SimulateSection,
    /// Directory that relative paths refer to; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| DglmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DglmError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.sampler.validate()?;
        if self.kalman.grid_points == 0 {
            return Err(DglmError::Config("kalman.grid_points must be >= 1".into()));
        }
        log_grid(self.kalman.grid_min, self.kalman.grid_max, self.kalman.grid_points)?;
        Ok(())
    }

    /// Model specification from the `[model]` and `[priors]` sections.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let (trend, effect) = match (m.id, m.trend, m.effect) {
            (Some(id), None, None) => crate::model::model_id_pair(id, m.trend_df)?,
            (None, Some(t), Some(e)) => (
                match t {
                    TrendKind::NaturalSpline => TrendModel::NaturalSpline { df: m.trend_df },
                    TrendKind::RandomWalk1 => TrendModel::RandomWalk1,
                    TrendKind::RandomWalk2 => TrendModel::RandomWalk2,
                    TrendKind::LocalLinearTrend => TrendModel::LocalLinearTrend,
                },
                e,
            ),
            (None, None, None) => {
                return Err(DglmError::Config("set model.id or both model.trend and model.effect".into()))
            }
            _ => {
                return Err(DglmError::Config(
                    "model.id cannot be combined with model.trend / model.effect, and trend needs effect".into(),
                ))
            }
        };
        let cfg = ModelConfig {
            trend,
            pollution_effect: effect,
            pollution_lag: m.pollution_lag,
            temperature_df: m.temperature_df,
            day_of_week: m.day_of_week,
            hyper: self.priors,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the model with standard model `id`.
    pub fn set_model_id(&mut self, id: u8) -> Result<()> {
        crate::model::model_id_pair(id, self.model.trend_df)?;
        self.model.id = Some(id);
        self.model.trend = None;
        self.model.effect = None;
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn kalman_grid(&self) -> Vec<f64> {
        log_grid(self.kalman.grid_min, self.kalman.grid_max, self.kalman.grid_points)
            .expect("validated grid")
    }
}

fn row_error(row: usize, column: &str, message: impl Into<String>) -> DglmError {
    DglmError::DataRow {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Reads a daily series. Rows must be consecutive days in increasing order.
/// Error rows are 1-based data rows (the header is not counted).
pub fn read_dataset<R: Read>(reader: R, columns: &ColumnBindings) -> Result<TimeSeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DglmError::Data(format!("cannot read header: {e}")))?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DglmError::Data(format!("missing column `{name}`")))
    };
    let (ic, ip, it) = (find(&columns.count)?, find(&columns.pollutant)?, find(&columns.temperature)?);
    let id = find(&columns.date)?;
    let mut counts = Vec::new();
    let mut pm = Vec::new();
    let mut temp = Vec::new();
    let mut start: Option<NaiveDate> = None;
    let mut previous: Option<NaiveDate> = None;
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| row_error(row, "", e.to_string()))?;
        let field = |k: usize, name: &str| -> Result<&str> {
            record.get(k).ok_or_else(|| row_error(row, name, "missing value"))
        };
        let date_text = field(id, &columns.date)?;
        let date = NaiveDate::parse_from_str(date_text, "%Y-%m-%d")
            .map_err(|e| row_error(row, &columns.date, format!("`{date_text}` is not an ISO date: {e}")))?;
        if let Some(prev) = previous {
            let expected = prev + Duration::days(1);
            if date != expected {
                return Err(row_error(
                    row,
                    &columns.date,
                    format!("dates must be consecutive days: expected {expected}, found {date} (gap after {prev})"),
                ));
            }
        } else {
            start = Some(date);
        }
        previous = Some(date);
        let count_text = field(ic, &columns.count)?;
        let count: u64 = count_text.parse().map_err(|_| {
            row_error(row, &columns.count, format!("`{count_text}` is not a non-negative integer count"))
        })?;
        counts.push(count);
        for (k, name, out) in [(ip, &columns.pollutant, &mut pm), (it, &columns.temperature, &mut temp)] {
            let text = field(k, name)?;
            let v: f64 = text
                .parse()
                .map_err(|_| row_error(row, name, format!("`{text}` is not a number")))?;
            if !v.is_finite() {
                return Err(row_error(row, name, format!("`{text}` is not finite")));
            }
            out.push(v);
        }
    }
    if counts.is_empty() {
        return Err(DglmError::Data("no data rows".into()));
    }
    let mut covariates = BTreeMap::new();
    covariates.insert(POLLUTANT.to_string(), pm);
    covariates.insert(TEMPERATURE.to_string(), temp);
    TimeSeriesDataset::new(counts, covariates, start)
}

pub fn ingest_csv(path: &Path, columns: &ColumnBindings) -> Result<TimeSeriesDataset> {
    let file = File::open(path).map_err(|e| DglmError::io(path, e))?;
    read_dataset(BufReader::new(file), columns)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| DglmError::io(path, e))?))
}

fn csv_writer(path: &Path, comments: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = create(path)?;
    for c in comments {
        writeln!(w, "# {c}").map_err(|e| DglmError::io(path, e))?;
    }
    Ok(csv::Writer::from_writer(w))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> DglmError + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => DglmError::io(path, io),
        other => DglmError::Data(format!("{}: {other:?}", path.display())),
    }
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

/// Writes a dataset in the layout `read_dataset` accepts.
pub fn write_dataset(path: &Path, dataset: &TimeSeriesDataset, columns: &ColumnBindings) -> Result<()> {
    let start = dataset
        .start_date
        .ok_or_else(|| DglmError::Data("dataset has no start date".into()))?;
    let mut w = csv_writer(path, &["daily counts; pollutant and temperature in input units"])?;
    let err = csv_err(path);
    w.write_record([&columns.date, &columns.count, &columns.pollutant, &columns.temperature])
        .map_err(&err)?;
    let pm = dataset.covariate(POLLUTANT)?;
    let temp = dataset.covariate(TEMPERATURE)?;
    for i in 0..dataset.n() {
        let date = start + Duration::days(i as i64);
        w.write_record([
            date.to_string(),
            dataset.counts[i].to_string(),
            fmt(pm[i]),
            fmt(temp[i]),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| DglmError::io(path, e))
}

/// Truth file contents written next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub seed: u64,
    pub model_id: u8,
    pub truth: GroundTruth,
    pub record: TruthRecord,
}

/// Simulates a dataset from `config.simulate` and writes `data.csv`,
/// `truth.csv` and `truth.json` into `out`.
pub fn run_simulate(config: &RunConfig, out: &Path, seed: u64) -> Result<(TimeSeriesDataset, TruthFile)> {
    let model = config.model_config()?;
    let (dataset, record) = simulate_dataset(&model, &config.simulate.truth, config.simulate.n, seed)?;
    fs::create_dir_all(out).map_err(|e| DglmError::io(out, e))?;
    write_dataset(&out.join("data.csv"), &dataset, &config.io.columns)?;

    let path = out.join("truth.csv");
    let mut w = csv_writer(
        &path,
        &["true values per row; trend and eta on the log scale, mu on the count scale, gamma per pollutant unit"],
    )?;
    let err = csv_err(&path);
    w.write_record(["row", "date", "trend", "gamma", "temperature_term", "eta", "mu"]).map_err(&err)?;
    for i in 0..dataset.n() {
        w.write_record([
            (i + 1).to_string(),
            dataset.date(i).map(|d| d.to_string()).unwrap_or_default(),
            fmt(record.trend[i]),
            fmt(record.gamma[i]),
            fmt(record.temperature_term[i]),
            fmt(record.eta[i]),
            fmt(record.mu[i]),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| DglmError::io(&path, e))?;

    let truth = TruthFile {
        seed,
        model_id: model.model_id(),
        truth: config.simulate.truth.clone(),
        record,
    };
    write_json(&out.join("truth.json"), &truth)?;
    Ok((dataset, truth))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| DglmError::Data(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| DglmError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| DglmError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| DglmError::Data(format!("{}: {e}", path.display())))
}

/// Column names of the samples file after `chain, draw, log_lik`.
pub fn sample_columns(model: &AssembledModel) -> Vec<String> {
    let mut names: Vec<String> = model.fixed.names.clone();
    for b in &model.dynamic {
        for v in diagnostics::variance_names(b.role, b.q()) {
            names.push(format!("{}_{v}", b.name));
        }
        if b.ar_spec.free_coefficients {
            for l in 0..b.p() {
                names.push(format!("{}_ar{}", b.name, l + 1));
            }
        }
    }
    for b in &model.dynamic {
        let (p, q) = (b.p() as i64, b.q());
        for t in (1 - p)..=(model.n() as i64) {
            for j in 0..q {
                names.push(format!("{}[{t}][{j}]", b.name));
            }
        }
    }
    names
}

fn draw_row(chain: &ChainSamples, i: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(chain.alpha.row(i));
    for (v, c) in chain.variances.iter().zip(&chain.coefficients) {
        out.extend_from_slice(v.row(i));
        out.extend_from_slice(c.row(i));
    }
    for b in &chain.beta {
        out.extend_from_slice(b.row(i));
    }
}

const BINARY_MAGIC: &[u8; 8] = b"DGLMDRW1";

/// Writes retained draws as CSV or in the binary layout
/// `magic, u64 header length, JSON column names, u64 rows, rows of
/// (chain, draw, log_lik, values...)` as little-endian `f64`.
pub fn write_samples(path: &Path, model: &AssembledModel, samples: &PosteriorSamples, format: SampleFormat) -> Result<()> {
    let names = sample_columns(model);
    let mut row = Vec::with_capacity(names.len());
    match format {
        SampleFormat::Csv => {
            let mut w = csv_writer(
                path,
                &["retained draws; fixed effects and paths on the standardized design scale, variances on the log-rate scale"],
            )?;
            let err = csv_err(path);
            let header: Vec<&str> = ["chain", "draw", "log_lik"]
                .into_iter()
                .chain(names.iter().map(String::as_str))
                .collect();
            w.write_record(&header).map_err(&err)?;
            let mut rec = Vec::with_capacity(header.len());
            for c in &samples.chains {
                for i in 0..c.log_lik.len() {
                    draw_row(c, i, &mut row);
                    rec.clear();
                    rec.push(c.chain.to_string());
                    rec.push((i + 1).to_string());
                    rec.push(fmt(c.log_lik[i]));
                    rec.extend(row.iter().map(|x| fmt(*x)));
                    w.write_record(&rec).map_err(&err)?;
                }
            }
            w.flush().map_err(|e| DglmError::io(path, e))
        }
        SampleFormat::Binary => {
            let mut w = create(path)?;
            let io = |e| DglmError::io(path, e);
            let header = serde_json::to_vec(&names).map_err(|e| DglmError::Data(e.to_string()))?;
            let rows: usize = samples.chains.iter().map(|c| c.log_lik.len()).sum();
            w.write_all(BINARY_MAGIC).map_err(io)?;
            w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&header).map_err(io)?;
            w.write_all(&(rows as u64).to_le_bytes()).map_err(io)?;
            for c in &samples.chains {
                for i in 0..c.log_lik.len() {
                    draw_row(c, i, &mut row);
                    for x in [c.chain as f64, (i + 1) as f64, c.log_lik[i]].iter().chain(&row) {
                        w.write_all(&x.to_le_bytes()).map_err(io)?;
                    }
                }
            }
            w.flush().map_err(io)
        }
    }
}

/// Reads a samples file back into per-chain draws for `model`.
pub fn read_samples(path: &Path, model: &AssembledModel, settings: &SamplerSettings) -> Result<PosteriorSamples> {
    let expected = sample_columns(model);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut magic = [0u8; 8];
    let mut file = BufReader::new(File::open(path).map_err(|e| DglmError::io(path, e))?);
    let io = |e| DglmError::io(path, e);
    let is_binary = file.read_exact(&mut magic).is_ok() && &magic == BINARY_MAGIC;
    if is_binary {
        let mut u = [0u8; 8];
        file.read_exact(&mut u).map_err(io)?;
        let mut header = vec![0u8; u64::from_le_bytes(u) as usize];
        file.read_exact(&mut header).map_err(io)?;
        let names: Vec<String> = serde_json::from_slice(&header).map_err(|e| DglmError::Data(e.to_string()))?;
        if names != expected {
            return Err(DglmError::Data("samples file does not match the configured model".into()));
        }
        file.read_exact(&mut u).map_err(io)?;
        let n_rows = u64::from_le_bytes(u) as usize;
        let width = names.len() + 3;
        let mut buf = vec![0u8; width * 8];
        for _ in 0..n_rows {
            file.read_exact(&mut buf).map_err(io)?;
            rows.push(buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect());
        }
    } else {
        let file = File::open(path).map_err(|e| DglmError::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(BufReader::new(file));
        let headers = rdr.headers().map_err(csv_err(path))?.clone();
        if headers.iter().skip(3).ne(expected.iter().map(String::as_str)) {
            return Err(DglmError::Data("samples file does not match the configured model".into()));
        }
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err(path))?;
            let row: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            rows.push(row.map_err(|_| row_error(i + 1, "", "non-numeric sample"))?);
        }
    }
    let mut chains: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for r in rows {
        chains.entry(r[0] as usize).or_default().push(r);
    }
    let n = model.n();
    let dims: Vec<usize> = model.dynamic.iter().map(|b| b.q()).collect();
    let chains = chains
        .into_iter()
        .map(|(chain, rows)| {
            let mut alpha = DrawMatrix::with_capacity(model.fixed.len(), rows.len());
            let mut variances: Vec<DrawMatrix> = dims.iter().map(|&q| DrawMatrix::new(q)).collect();
            let mut coefficients: Vec<DrawMatrix> = model
                .dynamic
                .iter()
                .map(|b| DrawMatrix::new(if b.ar_spec.free_coefficients { b.p() } else { 0 }))
                .collect();
            let mut beta: Vec<DrawMatrix> =
                model.dynamic.iter().map(|b| DrawMatrix::new(b.ar_spec.stacked_len(n))).collect();
            let mut log_lik = Vec::with_capacity(rows.len());
            let mut eta_sum = DVector::zeros(n);
            for r in &rows {
                log_lik.push(r[2]);
                let mut k = 3;
                let mut take = |m: &mut DrawMatrix| {
                    m.push(&r[k..k + m.dim]);
                    k += m.dim;
                };
                take(&mut alpha);
                for (v, c) in variances.iter_mut().zip(coefficients.iter_mut()) {
                    take(v);
                    take(c);
                }
                for b in beta.iter_mut() {
                    take(b);
                }
            }
            let mut chain_samples = ChainSamples {
                chain,
                seed: settings.seed,
                beta,
                alpha,
                variances,
                coefficients,
                log_lik,
                eta_mean: Vec::new(),
                stats: KernelStats::new(dims.len(), 0, &dims),
                alpha_scales: Vec::new(),
                variance_scales: Vec::new(),
                audit: Vec::new(),
            };
            for i in 0..rows.len() {
                eta_sum += diagnostics::draw_eta(model, &chain_samples, i);
            }
            chain_samples.eta_mean = (eta_sum / rows.len() as f64).iter().copied().collect();
            chain_samples
        })
        .collect();
    Ok(PosteriorSamples {
        chains,
        settings: settings.clone(),
        model_id: model.model_id,
        block_names: model.dynamic.iter().map(|b| b.name.clone()).collect(),
        fixed_names: model.fixed.names.clone(),
        n,
    })
}

/// Log-scale mean and variance of the trend under the smoother.
fn kalman_trend(model: &AssembledModel, fit: &SmootherOutput) -> Vec<(f64, f64)> {
    let n = model.n();
    if let Some(b) = model.dynamic_index(BlockRole::Trend) {
        let (p, q) = (model.dynamic[b].p(), model.dynamic[b].q());
        return (0..n)
            .map(|t| (fit.beta[b][(t + p) * q], fit.beta_var[b][(t + p) * q]))
            .collect();
    }
    let cols = &model.trend_columns;
    (0..n)
        .map(|t| {
            let z: Vec<f64> = cols.iter().map(|&j| model.fixed.design[(t, j)]).collect();
            let m = cols.iter().zip(&z).map(|(&j, zj)| zj * fit.alpha[j]).sum();
            let mut v = 0.0;
            for (a, &ja) in cols.iter().enumerate() {
                for (c, &jc) in cols.iter().enumerate() {
                    v += z[a] * z[c] * fit.alpha_cov[(ja, jc)];
                }
            }
            (m, v.max(0.0))
        })
        .collect()
}

/// Per-unit pollutant coefficient mean and variance under the smoother.
fn kalman_effect(model: &AssembledModel, fit: &SmootherOutput) -> Vec<(f64, f64)> {
    let n = model.n();
    if let Some(b) = model.dynamic_index(BlockRole::Pollution) {
        let block = &model.dynamic[b];
        let sd = block.standardization.map_or(1.0, |s| s.sd);
        return (0..n)
            .map(|t| (fit.beta[b][t + block.p()] / sd, fit.beta_var[b][t + block.p()] / (sd * sd)))
            .collect();
    }
    match model.fixed.column_index(POLLUTANT) {
        Some(j) => {
            let sd = model.fixed.standardization[j].map_or(1.0, |s| s.sd);
            vec![(fit.alpha[j] / sd, fit.alpha_var[j] / (sd * sd)); n]
        }
        None => Vec::new(),
    }
}

const Z95: f64 = 1.959963984540054;

/// Everything produced by one `fit` run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: AssembledModel,
    pub samples: Option<PosteriorSamples>,
    pub summary: Option<FitSummary>,
    pub aic: Option<AicSearch>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub model_id: u8,
    pub estimator: Estimator,
    pub format: SampleFormat,
    pub input: Option<String>,
    pub config: String,
    pub files: Vec<String>,
    pub first_row: usize,
    pub n: usize,
    pub kalman_converged: Option<bool>,
    pub kalman_boundary: Option<Vec<Vec<bool>>>,
    pub wall_time_seconds: f64,
}

fn write_path_file(
    path: &Path,
    model: &AssembledModel,
    comment: &str,
    columns: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut w = csv_writer(path, &[comment])?;
    let err = csv_err(path);
    let mut header = vec!["t".to_string(), "row".to_string(), "date".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.clone()));
    w.write_record(&header).map_err(&err)?;
    for t in 0..model.n() {
        let date = model.start_date.map(|d| (d + Duration::days(t as i64)).to_string()).unwrap_or_default();
        let mut rec = vec![(t + 1).to_string(), (model.first_row + t + 1).to_string(), date];
        rec.extend(columns.iter().map(|(_, v)| fmt(v[t])));
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(|e| DglmError::io(path, e))
}

fn write_summary(path: &Path, summary: &FitSummary) -> Result<()> {
    let mut w = csv_writer(
        path,
        &[
            "posterior summary; fixed effects on the standardized design scale, variances on the log-rate scale",
            "rr rows are relative risks per 10 pollutant units; criterion and acceptance rows use the value column",
        ],
    )?;
    let err = csv_err(path);
    w.write_record(["kind", "name", "value", "q025", "median", "q975", "mcse", "ess", "rhat"]).map_err(&err)?;
    let opt = |x: Option<f64>| x.map(fmt).unwrap_or_default();
    for p in &summary.parameters {
        w.write_record([
            "parameter".to_string(),
            p.name.clone(),
            fmt(p.mean),
            fmt(p.q025),
            fmt(p.median),
            fmt(p.q975),
            fmt(p.mcse),
            fmt(p.ess),
            opt(p.rhat),
        ])
        .map_err(&err)?;
    }
    let blank = || String::new();
    for (name, v) in [
        ("dic", summary.dic.dic),
        ("pd", summary.dic.pd),
        ("mean_deviance", summary.dic.mean_deviance),
        ("divergences", summary.divergences as f64),
    ] {
        w.write_record(["criterion".into(), name.into(), fmt(v), blank(), blank(), blank(), blank(), blank(), blank()])
            .map_err(&err)?;
    }
    if let Some(r) = summary.max_rhat {
        w.write_record(["criterion".into(), "max_rhat".into(), fmt(r), blank(), blank(), blank(), blank(), blank(), blank()])
            .map_err(&err)?;
    }
    for (name, r) in &summary.path_rhat {
        w.write_record(["path_rhat".into(), name.clone(), opt(*r), blank(), blank(), blank(), blank(), blank(), blank()])
            .map_err(&err)?;
    }
    for (name, a) in &summary.acceptance {
        w.write_record(["acceptance".into(), name.clone(), fmt(*a), blank(), blank(), blank(), blank(), blank(), blank()])
            .map_err(&err)?;
    }
    w.flush().map_err(|e| DglmError::io(path, e))
}

fn write_acf(path: &Path, plug_in: &diagnostics::Acf, realized: Option<&diagnostics::Acf>) -> Result<()> {
    let mut w = csv_writer(
        path,
        &["autocorrelation of Pearson residuals: acf at the point estimate (posterior medians, or the smoothed mode without sampling), realized_acf averaged over posterior draws; band is +-1.96/sqrt(n)"],
    )?;
    let err = csv_err(path);
    w.write_record(["lag", "acf", "realized_acf", "band_lower", "band_upper"]).map_err(&err)?;
    for (k, v) in plug_in.values.iter().enumerate() {
        let r = realized.and_then(|a| a.values.get(k)).map_or_else(String::new, |x| fmt(*x));
        w.write_record([k.to_string(), fmt(*v), r, fmt(-plug_in.band), fmt(plug_in.band)]).map_err(&err)?;
    }
    w.flush().map_err(|e| DglmError::io(path, e))
}

fn write_aic(path: &Path, model: &AssembledModel, search: &AicSearch) -> Result<()> {
    let mut w = csv_writer(path, &["AIC over evolution-variance grid; variances on the standardized design scale"])?;
    let err = csv_err(path);
    let mut header = Vec::new();
    for b in &model.dynamic {
        for v in diagnostics::variance_names(b.role, b.q()) {
            header.push(format!("{}_{v}", b.name));
        }
    }
    header.extend(["aic", "loglik", "edf", "converged", "iterations", "selected"].map(String::from));
    w.write_record(&header).map_err(&err)?;
    for (i, r) in search.table.iter().enumerate() {
        let mut rec: Vec<String> = r.variances.iter().flatten().map(|v| fmt(*v)).collect();
        rec.extend([
            fmt(r.aic),
            fmt(r.loglik),
            fmt(r.edf),
            r.converged.to_string(),
            r.iterations.to_string(),
            (i == search.best).to_string(),
        ]);
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(|e| DglmError::io(path, e))
}

/// Writes summary, trend, effect and ACF files for posterior samples and/or a
/// smoother fit; returns the file names written.
fn write_reports(
    out: &Path,
    model: &AssembledModel,
    samples: Option<&PosteriorSamples>,
    summary: Option<&FitSummary>,
    kalman: Option<&SmootherOutput>,
    residual_every: usize,
    max_lag: usize,
) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut trend_cols = Vec::new();
    let mut effect_cols = Vec::new();
    if let (Some(samples), Some(summary)) = (samples, summary) {
        write_summary(&out.join("summary.csv"), summary)?;
        files.push("summary.csv".into());
        for (k, name) in [(1, "bayes_median"), (0, "bayes_q025"), (2, "bayes_q975")] {
            trend_cols.push((name.to_string(), summary.trend.iter().map(|q| q[k]).collect::<Vec<_>>()));
            if !summary.effect.is_empty() {
                let rr_name = name.replace("bayes_", "bayes_rr_");
                effect_cols.push((rr_name, summary.effect.iter().map(|q| q[k]).collect::<Vec<_>>()));
            }
        }
        write_acf(&out.join("acf.csv"), &summary.residual_acf, Some(&summary.realized_acf))?;
        files.push("acf.csv".into());
        let res = diagnostics::realized_residuals(model, samples, residual_every);
        let path = out.join("residuals.csv");
        let mut w = csv_writer(&path, &["realized Pearson residuals (y - mu) / sqrt(mu); one row per day, one column per used draw after the summary columns"])?;
        let err = csv_err(&path);
        w.write_record(["t", "at_median", "q025", "median", "q975"]).map_err(&err)?;
        for t in 0..model.n() {
            let col: Vec<f64> = res.draws.column(t).iter().copied().collect();
            let q = quantiles(&col, &INTERVAL);
            w.write_record([(t + 1).to_string(), fmt(res.at_median[t]), fmt(q[0]), fmt(q[1]), fmt(q[2])])
                .map_err(&err)?;
        }
        w.flush().map_err(|e| DglmError::io(&path, e))?;
        files.push("residuals.csv".into());
    }
    if let Some(fit) = kalman {
        let trend = kalman_trend(model, fit);
        trend_cols.push(("kalman_mode".into(), trend.iter().map(|(m, _)| m.exp()).collect()));
        trend_cols.push(("kalman_q025".into(), trend.iter().map(|(m, v)| (m - Z95 * v.sqrt()).exp()).collect()));
        trend_cols.push(("kalman_q975".into(), trend.iter().map(|(m, v)| (m + Z95 * v.sqrt()).exp()).collect()));
        let effect = kalman_effect(model, fit);
        if !effect.is_empty() {
            let rr = |g: f64| (RR_INCREMENT * g).exp();
            effect_cols.push(("kalman_rr_mode".into(), effect.iter().map(|(m, _)| rr(*m)).collect()));
            effect_cols.push(("kalman_rr_q025".into(), effect.iter().map(|(m, v)| rr(m - Z95 * v.sqrt())).collect()));
            effect_cols.push(("kalman_rr_q975".into(), effect.iter().map(|(m, v)| rr(m + Z95 * v.sqrt())).collect()));
        }
        if summary.is_none() {
            let pearson: Vec<f64> = model
                .response
                .iter()
                .zip(fit.eta.iter())
                .map(|(y, e)| (y - e.exp()) / e.exp().sqrt())
                .collect();
            let acf = diagnostics::acf(&pearson, max_lag.min(model.n().saturating_sub(1)))?;
            write_acf(&out.join("acf.csv"), &acf, None)?;
            files.push("acf.csv".into());
        }
    }
    write_path_file(
        &out.join("trend.csv"),
        model,
        "trend on the count scale (exp of the log-rate trend); pointwise 95% intervals",
        &trend_cols,
    )?;
    files.push("trend.csv".into());
    if !effect_cols.is_empty() {
        write_path_file(
            &out.join("effect.csv"),
            model,
            "relative risk per 10-unit pollutant increase; pointwise 95% intervals",
            &effect_cols,
        )?;
        files.push("effect.csv".into());
    }
    Ok(files)
}

/// Runs the configured estimators on `dataset` and writes all artifacts to `out`.
pub fn run_fit(config: &RunConfig, dataset: &TimeSeriesDataset, out: &Path) -> Result<FitOutcome> {
    let started = Instant::now();
    let model_config = config.model_config()?;
    let model = assemble_model(dataset, &model_config)?;
    fs::create_dir_all(out).map_err(|e| DglmError::io(out, e))?;
    let estimator = config.io.estimator;
    let mut files = Vec::new();

    let (samples, summary) = if estimator.bayes() {
        let samples = run_model(&model, &config.sampler)?;
        let name = match config.io.format {
            SampleFormat::Csv => "samples.csv",
            SampleFormat::Binary => "samples.bin",
        };
        write_samples(&out.join(name), &model, &samples, config.io.format)?;
        files.push(name.to_string());
        let summary = diagnostics::summarize(&model, &samples, config.io.max_lag)?;
        (Some(samples), Some(summary))
    } else {
        (None, None)
    };
    let aic = if estimator.kalman() {
        let search = aic_search(&model, &config.kalman_grid())?;
        write_aic(&out.join("aic.csv"), &model, &search)?;
        files.push("aic.csv".into());
        Some(search)
    } else {
        None
    };
    files.extend(write_reports(
        out,
        &model,
        samples.as_ref(),
        summary.as_ref(),
        aic.as_ref().map(|a| &a.best_fit),
        config.io.residual_every,
        config.io.max_lag,
    )?);
    if let Some(s) = &summary {
        write_json(&out.join("summary.json"), s)?;
        files.push("summary.json".into());
    }
    files.push("manifest.json".into());
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.sampler.seed,
        model_id: model_config.model_id(),
        estimator,
        format: config.io.format,
        input: config.io.input.as_ref().map(|p| config.resolve(p).display().to_string()),
        config: config.to_toml(),
        files: files.clone(),
        first_row: model.first_row,
        n: model.n(),
        kalman_converged: aic.as_ref().map(|a| a.best_fit.converged),
        kalman_boundary: aic.as_ref().map(|a| a.boundary.clone()),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(FitOutcome {
        model,
        samples,
        summary,
        aic,
        files,
    })
}

/// Loads the config and data recorded in a fit directory's manifest.
pub fn load_fit_context(fit_dir: &Path) -> Result<(Manifest, RunConfig, TimeSeriesDataset)> {
    let manifest: Manifest = read_json(&fit_dir.join("manifest.json"))?;
    let config = RunConfig::from_toml_str(&manifest.config)?;
    let input = manifest
        .input
        .as_ref()
        .ok_or_else(|| DglmError::Config("manifest records no input file".into()))?;
    let dataset = ingest_csv(Path::new(input), &config.io.columns)?;
    Ok((manifest, config, dataset))
}

/// Recomputes the Bayesian summary files from a fit directory's samples.
pub fn run_diagnose(fit_dir: &Path, out: &Path) -> Result<FitSummary> {
    let (manifest, config, dataset) = load_fit_context(fit_dir)?;
    let model = assemble_model(&dataset, &config.model_config()?)?;
    let name = match manifest.format {
        SampleFormat::Csv => "samples.csv",
        SampleFormat::Binary => "samples.bin",
    };
    let samples = read_samples(&fit_dir.join(name), &model, &config.sampler)?;
    let summary = diagnostics::summarize(&model, &samples, config.io.max_lag)?;
    fs::create_dir_all(out).map_err(|e| DglmError::io(out, e))?;
    write_reports(out, &model, Some(&samples), Some(&summary), None, config.io.residual_every, config.io.max_lag)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Recovery of the true trend and pollutant effect by one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Root mean square error of the posterior median log trend.
    pub trend_rmse: f64,
    /// Share of days whose 95% trend interval covers the truth.
    pub trend_coverage: f64,
    /// RMSE of the posterior median pollutant coefficient per unit.
    pub gamma_rmse: f64,
    pub gamma_coverage: f64,
    /// Day (1-based model time) of the largest true trend.
    pub peak_day: usize,
    /// Relative error of the fitted count-scale trend at that day.
    pub peak_relative_error: f64,
}

/// Scores interval paths against truth. Each path entry is
/// `[q025, median, q975]` on the same scale as `truth`.
pub fn score_paths(
    trend: &[[f64; 3]],
    trend_truth: &[f64],
    gamma: &[[f64; 3]],
    gamma_truth: &[f64],
) -> Result<RecoveryReport> {
    if trend.len() != trend_truth.len() || gamma.len() != gamma_truth.len() {
        return Err(DglmError::Dimension("fit and truth lengths differ".into()));
    }
    let rmse = |p: &[[f64; 3]], t: &[f64]| {
        if p.is_empty() {
            return f64::NAN;
        }
        (p.iter().zip(t).map(|(q, x)| (q[1] - x).powi(2)).sum::<f64>() / p.len() as f64).sqrt()
    };
    let coverage = |p: &[[f64; 3]], t: &[f64]| {
        if p.is_empty() {
            return f64::NAN;
        }
        p.iter().zip(t).filter(|(q, x)| q[0] <= **x && **x <= q[2]).count() as f64 / p.len() as f64
    };
    let peak = trend_truth
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let peak_relative_error = if trend.is_empty() {
        f64::NAN
    } else {
        (trend[peak][1] - trend_truth[peak]).exp() - 1.0
    };
    Ok(RecoveryReport {
        trend_rmse: rmse(trend, trend_truth),
        trend_coverage: coverage(trend, trend_truth),
        gamma_rmse: rmse(gamma, gamma_truth),
        gamma_coverage: coverage(gamma, gamma_truth),
        peak_day: peak + 1,
        peak_relative_error,
    })
}

fn read_path_columns(path: &Path, names: [&str; 3]) -> Result<(Vec<usize>, Vec<[f64; 3]>)> {
    let file = File::open(path).map_err(|e| DglmError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(BufReader::new(file));
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    let idx = |n: &str| {
        headers
            .iter()
            .position(|h| h == n)
            .ok_or_else(|| DglmError::Data(format!("{}: missing column `{n}`", path.display())))
    };
    let (ir, i0, i1, i2) = (idx("row")?, idx(names[0])?, idx(names[1])?, idx(names[2])?);
    let mut rows = Vec::new();
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| row_error(k + 1, headers.get(i).unwrap_or(""), "not a number"))
        };
        rows.push(num(ir)? as usize);
        out.push([num(i0)?, num(i1)?, num(i2)?]);
    }
    Ok((rows, out))
}

/// Scores the Bayesian trend and effect files of `fit_dir` against a truth file.
pub fn run_recovery_score(fit_dir: &Path, truth_path: &Path) -> Result<RecoveryReport> {
    let truth: TruthFile = read_json(truth_path)?;
    let (rows, trend) = read_path_columns(&fit_dir.join("trend.csv"), ["bayes_q025", "bayes_median", "bayes_q975"])?;
    let trend: Vec<[f64; 3]> = trend.iter().map(|q| q.map(f64::ln)).collect();
    let pick = |v: &[f64]| -> Result<Vec<f64>> {
        rows.iter()
            .map(|&r| {
                v.get(r.wrapping_sub(1))
                    .copied()
                    .ok_or_else(|| DglmError::Dimension(format!("truth has no row {r}")))
            })
            .collect()
    };
    let trend_truth = pick(&truth.record.trend)?;
    let effect_path = fit_dir.join("effect.csv");
    let (gamma, gamma_truth) = if effect_path.exists() {
        let (erows, rr) = read_path_columns(&effect_path, ["bayes_rr_q025", "bayes_rr_median", "bayes_rr_q975"])?;
        if erows != rows {
            return Err(DglmError::Dimension("trend and effect files cover different rows".into()));
        }
        (
            rr.iter().map(|q| q.map(|x| x.ln() / RR_INCREMENT)).collect(),
            pick(&truth.record.gamma)?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let report = score_paths(&trend, &trend_truth, &gamma, &gamma_truth)?;
    write_json(&fit_dir.join("score.json"), &report)?;
    Ok(report)
}
