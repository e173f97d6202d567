//! Metrics, the synthetic generator and experiment sweeps.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    run_private_pgd, run_private_svd, DenseModel, PgdConfig, StepRule, SvdConfig,
};
use crate::data::ObservedMatrix;
use crate::data::{
    clip_rows, parse_ratings, prepare, rescale_ratings, Prepared, Rating, RatingFormat,
    RatingsDataset,
};
use crate::error::{Error, Result};
use crate::fw::{run_nonprivate_fw, run_private_fw, EigBackend, FactoredModel, FwConfig};
use crate::privacy::{AlgoTag, NoiseSchedule, PrivacyParams, Purpose, RngStream};

/// Anything that predicts a centred entry and knows the per-user means.
pub trait Predictor: Sync {
    fn num_users(&self) -> usize;
    fn num_items(&self) -> usize;
    /// Prediction in the centred space.
    fn centered(&self, user: usize, item: usize) -> f64;
    fn user_mean(&self, user: usize) -> f64;
    fn rating_bounds(&self) -> (f64, f64);

    /// Prediction on the rating scale, optionally clamped to it.
    fn rating(&self, user: usize, item: usize, clip: bool) -> Result<f64> {
        if user >= self.num_users() || item >= self.num_items() {
            return Err(Error::OutOfRange(format!(
                "({user}, {item}) outside {} x {}",
                self.num_users(),
                self.num_items()
            )));
        }
        let raw = self.centered(user, item) + self.user_mean(user);
        let (lo, hi) = self.rating_bounds();
        Ok(if clip { raw.clamp(lo, hi) } else { raw })
    }
}

impl Predictor for FactoredModel {
    fn num_users(&self) -> usize {
        FactoredModel::num_users(self)
    }
    fn num_items(&self) -> usize {
        self.num_items
    }
    fn centered(&self, user: usize, item: usize) -> f64 {
        self.entry(user, item)
    }
    fn user_mean(&self, user: usize) -> f64 {
        self.means[user]
    }
    fn rating_bounds(&self) -> (f64, f64) {
        (self.rating_lo, self.rating_hi)
    }
}

impl Predictor for DenseModel {
    fn num_users(&self) -> usize {
        self.num_users
    }
    fn num_items(&self) -> usize {
        self.num_items
    }
    fn centered(&self, user: usize, item: usize) -> f64 {
        self.entry(user, item)
    }
    fn user_mean(&self, user: usize) -> f64 {
        self.means[user]
    }
    fn rating_bounds(&self) -> (f64, f64) {
        (self.rating_lo, self.rating_hi)
    }
}

/// `(1 / 2|Omega|) ||P_Omega(Y - Y*)||_F^2` in the centred space.
pub fn empirical_risk<P: Predictor + ?Sized>(model: &P, obs: &ObservedMatrix) -> Result<f64> {
    if model.num_users() != obs.num_users() {
        return Err(Error::DimensionMismatch {
            expected: obs.num_users(),
            got: model.num_users(),
        });
    }
    if model.num_items() != obs.num_items() {
        return Err(Error::DimensionMismatch {
            expected: obs.num_items(),
            got: model.num_items(),
        });
    }
    let omega = obs.num_observed();
    if omega == 0 {
        return Err(Error::EmptyObservations);
    }
    let mut total = 0.0;
    for (i, row) in obs.rows.rows.iter().enumerate() {
        for (j, y) in row.iter() {
            let d = model.centered(i, j) - y;
            total += d * d;
        }
    }
    Ok(total / (2.0 * omega as f64))
}

/// Root mean squared error against raw held-out ratings.
pub fn test_rmse<P: Predictor + ?Sized>(model: &P, test: &[Rating], clip: bool) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut total = 0.0;
    for r in test {
        let d = model.rating(r.user, r.item, clip)? - r.value;
        total += d * d;
    }
    Ok((total / test.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub empirical_risk: f64,
    pub test_rmse: f64,
    /// `sqrt(2 F_hat)`: RMSE over the training entries, centred space.
    pub train_rmse: f64,
    pub n_test: usize,
}

pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    obs: &ObservedMatrix,
    test: &[Rating],
    clip: bool,
) -> Result<Metrics> {
    let risk = empirical_risk(model, obs)?;
    Ok(Metrics {
        empirical_risk: risk,
        test_rmse: test_rmse(model, test, clip)?,
        train_rmse: (2.0 * risk).sqrt(),
        n_test: test.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub entries_per_user: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Ratings on the scale `[-1, 1]`.
    pub dataset: RatingsDataset,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn unit_linf_uniform<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
    x
}

/// Rank-one `Y* = u v^T` with `u`, `v` uniform on `[-1, 1]` rescaled to unit
/// `l_inf` norm, revealed at `entries_per_user` uniformly chosen items per user.
pub fn synthetic_rank_one(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.users == 0 || cfg.items == 0 {
        return Err(Error::invalid(
            "synthetic matrix needs at least one user and item",
        ));
    }
    if cfg.entries_per_user > cfg.items {
        return Err(Error::invalid(format!(
            "entries per user {} exceeds item count {}",
            cfg.entries_per_user, cfg.items
        )));
    }
    let mut rng = RngStream::new(cfg.seed, AlgoTag::Data, 0, Purpose::Synthetic).rng();
    let u = unit_linf_uniform(&mut rng, cfg.users);
    let v = unit_linf_uniform(&mut rng, cfg.items);
    let mut ratings = Vec::with_capacity(cfg.users * cfg.entries_per_user);
    for (i, ui) in u.iter().enumerate() {
        let mut items = index::sample(&mut rng, cfg.items, cfg.entries_per_user).into_vec();
        items.sort_unstable();
        ratings.extend(items.into_iter().map(|j| Rating {
            user: i,
            item: j,
            value: ui * v[j],
        }));
    }
    let dataset = RatingsDataset::from_ratings(cfg.users, cfg.items, ratings, -1.0, 1.0)?;
    Ok(SyntheticData { dataset, u, v })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    FwPrivate,
    FwNonprivate,
    SvdPrivate,
    PgdPrivate,
    PgdNonprivate,
    ZeroBaseline,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::FwPrivate,
        Algorithm::FwNonprivate,
        Algorithm::SvdPrivate,
        Algorithm::PgdPrivate,
        Algorithm::PgdNonprivate,
        Algorithm::ZeroBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::FwPrivate => "fw_private",
            Algorithm::FwNonprivate => "fw_nonprivate",
            Algorithm::SvdPrivate => "svd_private",
            Algorithm::PgdPrivate => "pgd_private",
            Algorithm::PgdNonprivate => "pgd_nonprivate",
            Algorithm::ZeroBaseline => "zero_baseline",
        }
    }

    pub fn is_private(self) -> bool {
        matches!(
            self,
            Algorithm::FwPrivate | Algorithm::SvdPrivate | Algorithm::PgdPrivate
        )
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown algorithm '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    File {
        path: PathBuf,
        #[serde(default = "default_format")]
        format: RatingFormat,
        /// Affine rescale of the rating scale to `[lo, hi]`.
        #[serde(default)]
        rescale: Option<[f64; 2]>,
    },
    Synthetic(SyntheticConfig),
}

fn default_format() -> RatingFormat {
    RatingFormat::CsvComma
}

impl DatasetSpec {
    /// Relative file paths resolve against `base`.
    pub fn resolve_relative(&mut self, base: &Path) {
        if let DatasetSpec::File { path, .. } = self {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn load(&self) -> Result<RatingsDataset> {
        match self {
            DatasetSpec::File {
                path,
                format,
                rescale,
            } => {
                let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
                let ds = parse_ratings(std::io::BufReader::new(file), *format)?;
                match rescale {
                    Some([lo, hi]) => rescale_ratings(&ds, *lo, *hi),
                    None => Ok(ds),
                }
            }
            DatasetSpec::Synthetic(cfg) => Ok(synthetic_rank_one(cfg)?.dataset),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FwSettings {
    pub k: f64,
    pub iterations: usize,
    pub beta: f64,
    pub backend: EigBackend,
    pub oja_iterations: usize,
    pub schedule: NoiseSchedule,
    /// Defaults to the schema bound of the prepared data.
    pub row_bound: Option<f64>,
}

impl Default for FwSettings {
    fn default() -> Self {
        FwSettings {
            k: 10.0,
            iterations: 10,
            beta: 0.1,
            backend: EigBackend::Exact,
            oja_iterations: 100,
            schedule: NoiseSchedule::Uniform,
            row_bound: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvdSettings {
    pub rank: usize,
    pub row_bound: Option<f64>,
}

impl Default for SvdSettings {
    fn default() -> Self {
        SvdSettings {
            rank: 1,
            row_bound: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdSettings {
    pub k: f64,
    pub iterations: usize,
    /// `0.5`, `inv_sqrt`, `inv`, optionally with a scale: `inv_sqrt:0.5`.
    pub step: String,
    pub schedule: NoiseSchedule,
    pub row_bound: Option<f64>,
}

impl Default for PgdSettings {
    fn default() -> Self {
        PgdSettings {
            k: 10.0,
            iterations: 10,
            step: "1".into(),
            schedule: NoiseSchedule::Uniform,
            row_bound: None,
        }
    }
}

/// A grid of runs: every algorithm at every epsilon for every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub algorithms: Vec<Algorithm>,
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_xi")]
    pub xi: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub master_seed: u64,
    /// Clamp predictions to the rating scale before computing RMSE.
    #[serde(default = "default_clip")]
    pub clip: bool,
    /// Record wall-clock seconds; otherwise the column is 0 and the CSV is
    /// reproducible byte for byte.
    #[serde(default)]
    pub timing: bool,
    #[serde(default)]
    pub fw: FwSettings,
    #[serde(default)]
    pub svd: SvdSettings,
    #[serde(default)]
    pub pgd: PgdSettings,
}

fn default_xi() -> usize {
    80
}

fn default_test_fraction() -> f64 {
    0.1
}

fn default_clip() -> bool {
    true
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a TOML spec; a relative dataset path is taken relative to the
    /// spec file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut spec = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            spec.dataset.resolve_relative(dir);
        }
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(Error::Config("algorithms must not be empty".into()));
        }
        if self.epsilons.is_empty() {
            return Err(Error::Config("epsilons must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::DeltaOutOfRange(self.delta));
        }
        if let Some(&e) = self
            .epsilons
            .iter()
            .find(|e| !(**e > 0.0) || !e.is_finite())
        {
            return Err(Error::NonPositiveEpsilon(e));
        }
        if self.xi == 0 {
            return Err(Error::Config("xi must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        self.pgd.step.parse::<StepRule>()?;
        Ok(())
    }

    pub fn model_settings(&self) -> ModelSettings {
        ModelSettings {
            fw: self.fw.clone(),
            svd: self.svd.clone(),
            pgd: self.pgd.clone(),
        }
    }

    /// Seed used for the preprocessing and noise of one sweep seed.
    pub fn cell_seed(&self, seed: u64) -> u64 {
        self.master_seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// A trained model of either shape.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Factored(FactoredModel),
    Dense(DenseModel),
}

impl TrainedModel {
    pub fn predictor(&self) -> &dyn Predictor {
        match self {
            TrainedModel::Factored(m) => m,
            TrainedModel::Dense(m) => m,
        }
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        match self {
            TrainedModel::Factored(m) => m.write(out),
            TrainedModel::Dense(m) => m.write(out),
        }
    }

    /// Reads either model file, keyed on its first line.
    pub fn read<R: BufRead>(mut source: R) -> Result<Self> {
        let mut text = String::new();
        source.read_to_string(&mut text)?;
        if text.starts_with("dpmc-dense") {
            Ok(TrainedModel::Dense(DenseModel::read(text.as_bytes())?))
        } else {
            Ok(TrainedModel::Factored(FactoredModel::read(
                text.as_bytes(),
            )?))
        }
    }
}

/// Per-algorithm hyperparameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSettings {
    pub fw: FwSettings,
    pub svd: SvdSettings,
    pub pgd: PgdSettings,
}

/// The `(T, k)` pair reported for an algorithm; `k` is the rank for SVD.
pub fn reported_shape(alg: Algorithm, spec: &ModelSettings) -> (usize, f64) {
    match alg {
        Algorithm::FwPrivate | Algorithm::FwNonprivate => (spec.fw.iterations, spec.fw.k),
        Algorithm::SvdPrivate => (1, spec.svd.rank as f64),
        Algorithm::PgdPrivate | Algorithm::PgdNonprivate => (spec.pgd.iterations, spec.pgd.k),
        Algorithm::ZeroBaseline => (0, 0.0),
    }
}

/// Trains one algorithm on prepared data. `epsilon` is ignored by the
/// non-private algorithms.
pub fn train_model(
    alg: Algorithm,
    obs: &ObservedMatrix,
    spec: &ModelSettings,
    epsilon: f64,
    delta: f64,
    seed: u64,
) -> Result<TrainedModel> {
    let params = if alg.is_private() {
        Some(PrivacyParams::new(epsilon, delta)?)
    } else {
        None
    };
    let default_bound = obs.row_bound;
    let configured = match alg {
        Algorithm::FwPrivate | Algorithm::FwNonprivate => spec.fw.row_bound,
        Algorithm::SvdPrivate => spec.svd.row_bound,
        Algorithm::PgdPrivate | Algorithm::PgdNonprivate => spec.pgd.row_bound,
        Algorithm::ZeroBaseline => None,
    };
    let bound = configured.unwrap_or(default_bound);
    // A private run with a bound tighter than the data's clips the rows first.
    let clipped;
    let obs = if alg.is_private() && bound < obs.row_bound {
        clipped = clip_rows(obs, bound)?;
        &clipped
    } else {
        obs
    };
    Ok(match alg {
        Algorithm::FwPrivate => {
            let s = &spec.fw;
            let mut cfg = FwConfig::new(s.k, s.iterations, bound);
            cfg.beta = s.beta;
            cfg.backend = s.backend;
            cfg.oja_iterations = s.oja_iterations;
            cfg.schedule = s.schedule;
            let params = params.as_ref().expect("private");
            TrainedModel::Factored(run_private_fw(obs, &cfg, params, seed)?.model)
        }
        Algorithm::FwNonprivate => {
            TrainedModel::Factored(run_nonprivate_fw(obs, spec.fw.k, spec.fw.iterations)?)
        }
        Algorithm::SvdPrivate => {
            let cfg = SvdConfig::new(spec.svd.rank, bound);
            let params = params.as_ref().expect("private");
            TrainedModel::Factored(run_private_svd(obs, &cfg, params, seed)?.model)
        }
        Algorithm::PgdPrivate | Algorithm::PgdNonprivate => {
            let s = &spec.pgd;
            let rule: StepRule = s.step.parse()?;
            let mut cfg = PgdConfig::new(s.k, s.iterations, &rule, bound);
            cfg.schedule = s.schedule;
            let placeholder;
            let params = match &params {
                Some(p) => p,
                None => {
                    cfg.sigma_override = Some(0.0);
                    placeholder = PrivacyParams::new(1.0, 0.5)?;
                    &placeholder
                }
            };
            TrainedModel::Dense(run_private_pgd(obs, &cfg, params, seed)?.model)
        }
        Algorithm::ZeroBaseline => TrainedModel::Factored(FactoredModel::zeros(
            obs.num_items(),
            obs.means.clone(),
            obs.rating_lo,
            obs.rating_hi,
        )),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub algorithm: Algorithm,
    pub epsilon: f64,
    pub delta: f64,
    pub seed: u64,
    pub iterations: usize,
    /// Nuclear-norm budget, or the rank for `svd_private`.
    pub k: f64,
    pub train_risk: f64,
    pub test_rmse: f64,
    pub wallclock_s: f64,
    /// Set when the cell failed; the metrics are then NaN.
    pub error: Option<String>,
}

fn run_cell(
    spec: &ExperimentSpec,
    alg: Algorithm,
    epsilon: f64,
    seed: u64,
    prepared: &std::result::Result<Prepared, String>,
) -> ResultRow {
    let settings = spec.model_settings();
    let (iterations, k) = reported_shape(alg, &settings);
    let mut row = ResultRow {
        algorithm: alg,
        epsilon,
        delta: spec.delta,
        seed,
        iterations,
        k,
        train_risk: f64::NAN,
        test_rmse: f64::NAN,
        wallclock_s: 0.0,
        error: None,
    };
    let start = Instant::now();
    let outcome = prepared.as_ref().map_err(Clone::clone).and_then(|p| {
        let cell_seed = spec.cell_seed(seed);
        let model = train_model(alg, &p.observed, &settings, epsilon, spec.delta, cell_seed)
            .map_err(|e| e.to_string())?;
        let metrics = evaluate(model.predictor(), &p.observed, &p.test, spec.clip)
            .map_err(|e| e.to_string())?;
        if log::log_enabled!(log::Level::Info) {
            if let Ok(other) = test_rmse(model.predictor(), &p.test, !spec.clip) {
                log::info!(
                    "{alg} eps={epsilon} seed={seed}: test_rmse clip={} {} clip={} {other}",
                    spec.clip,
                    metrics.test_rmse,
                    !spec.clip
                );
            }
        }
        Ok(metrics)
    });
    match outcome {
        Ok(m) => {
            row.train_risk = m.empirical_risk;
            row.test_rmse = m.test_rmse;
        }
        Err(e) => {
            log::warn!("{alg} eps={epsilon} seed={seed}: {e}");
            row.error = Some(e);
        }
    }
    if spec.timing {
        row.wallclock_s = start.elapsed().as_secs_f64();
    }
    row
}

/// Runs every `(algorithm, epsilon, seed)` cell on a pool of `threads`
/// workers (`None` for the rayon default). Failed cells become rows with an
/// error message. Rows come back sorted by algorithm, epsilon, then seed.
pub fn run_sweep(spec: &ExperimentSpec, threads: Option<usize>) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let dataset = spec.dataset.load().map_err(|e| e.to_string());
    let mut rows = pool.install(|| {
        let prepared: Vec<std::result::Result<Prepared, String>> = spec
            .seeds
            .par_iter()
            .map(|&seed| {
                let ds = dataset.as_ref().map_err(Clone::clone)?;
                prepare(ds, spec.xi, spec.test_fraction, spec.cell_seed(seed))
                    .map_err(|e| e.to_string())
            })
            .collect();
        let mut cells = Vec::new();
        for &alg in &spec.algorithms {
            for &eps in &spec.epsilons {
                for (s, &seed) in spec.seeds.iter().enumerate() {
                    cells.push((alg, eps, seed, s));
                }
            }
        }
        cells
            .par_iter()
            .map(|&(alg, eps, seed, s)| run_cell(spec, alg, eps, seed, &prepared[s]))
            .collect::<Vec<_>>()
    });
    rows.sort_by(|a, b| {
        a.algorithm
            .cmp(&b.algorithm)
            .then(a.epsilon.total_cmp(&b.epsilon))
            .then(a.seed.cmp(&b.seed))
    });
    Ok(rows)
}

pub const CSV_HEADER: &str = "algo,epsilon,delta,seed,T,k,train_risk,test_rmse,wallclock_s";

/// `%g`-style formatting with six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.algorithm,
            format_sig6(r.epsilon),
            format_sig6(r.delta),
            r.seed,
            r.iterations,
            format_sig6(r.k),
            format_sig6(r.train_risk),
            format_sig6(r.test_rmse),
            format_sig6(r.wallclock_s),
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a results CSV. Error messages are not part of the format, so
/// `error` is always `None`.
pub fn read_results_csv<R: BufRead>(source: R) -> Result<Vec<ResultRow>> {
    let mut lines = source.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing results header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let lineno = idx + 2;
        let bad = |msg: String| Error::Parse { line: lineno, msg };
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(bad(format!("expected 9 fields, got {}", f.len())));
        }
        let real = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("bad number '{s}'")))
        };
        rows.push(ResultRow {
            algorithm: f[0]
                .parse()
                .map_err(|_| bad(format!("unknown algorithm '{}'", f[0])))?,
            epsilon: real(f[1])?,
            delta: real(f[2])?,
            seed: f[3]
                .parse()
                .map_err(|_| bad(format!("bad seed '{}'", f[3])))?,
            iterations: f[4].parse().map_err(|_| bad(format!("bad T '{}'", f[4])))?,
            k: real(f[5])?,
            train_risk: real(f[6])?,
            test_rmse: real(f[7])?,
            wallclock_s: real(f[8])?,
            error: None,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::center_per_user;

    fn obs_single(value: f64) -> ObservedMatrix {
        center_per_user(
            &[Rating {
                user: 0,
                item: 0,
                value,
            }],
            1,
            1,
            -10.0,
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn risk_of_zero_model() {
        let mut obs = obs_single(3.0);
        obs.rows.rows[0].vals[0] = 3.0;
        let model = FactoredModel::zeros(1, vec![0.0], -10.0, 10.0);
        assert_eq!(empirical_risk(&model, &obs).unwrap(), 4.5);
    }

    #[test]
    fn risk_needs_observations() {
        let obs = center_per_user(&[], 2, 2, 0.0, 5.0).unwrap();
        let model = FactoredModel::zeros(2, vec![2.5; 2], 0.0, 5.0);
        assert!(matches!(
            empirical_risk(&model, &obs),
            Err(Error::EmptyObservations)
        ));
    }

    #[test]
    fn rmse_examples() {
        let model = FactoredModel::zeros(1, vec![2.5], 0.0, 5.0);
        let test = [
            Rating {
                user: 0,
                item: 0,
                value: 0.0,
            },
            Rating {
                user: 0,
                item: 0,
                value: 5.0,
            },
        ];
        assert_eq!(test_rmse(&model, &test, true).unwrap(), 2.5);
        assert!(matches!(
            test_rmse(&model, &[], true),
            Err(Error::EmptyTestSet)
        ));

        let mut over = FactoredModel::zeros(1, vec![7.0], 0.0, 5.0);
        let truth = [Rating {
            user: 0,
            item: 0,
            value: 5.0,
        }];
        assert_eq!(test_rmse(&over, &truth, true).unwrap(), 0.0);
        assert_eq!(test_rmse(&over, &truth, false).unwrap(), 2.0);
        over.means[0] = 5.0;
        assert_eq!(test_rmse(&over, &truth, false).unwrap(), 0.0);
    }

    #[test]
    fn synthetic_is_rank_one_on_unit_scale() {
        let cfg = SyntheticConfig {
            users: 30,
            items: 12,
            entries_per_user: 5,
            seed: 4,
        };
        let data = synthetic_rank_one(&cfg).unwrap();
        assert_eq!(data.dataset.ratings.len(), 150);
        let peak = |x: &[f64]| x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(peak(&data.u), 1.0);
        assert_eq!(peak(&data.v), 1.0);
        for r in &data.dataset.ratings {
            assert_eq!(r.value, data.u[r.user] * data.v[r.item]);
        }
        let again = synthetic_rank_one(&cfg).unwrap();
        assert_eq!(again.dataset, data.dataset);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.1), "0.1");
        assert_eq!(format_sig6(1e-6), "1e-06");
        assert_eq!(format_sig6(123456789.0), "1.23457e+08");
        assert_eq!(format_sig6(0.000123456789), "0.000123457");
        assert_eq!(format_sig6(5.0), "5");
        assert_eq!(format_sig6(-2.5), "-2.5");
        assert_eq!(format_sig6(999999.5), "1e+06");
        assert_eq!(format_sig6(f64::NAN), "nan");
    }

    #[test]
    fn csv_empty_and_round_trip() {
        let mut buf = Vec::new();
        write_results_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{CSV_HEADER}\n"));

        let row = ResultRow {
            algorithm: Algorithm::FwPrivate,
            epsilon: 0.5,
            delta: 1e-6,
            seed: 3,
            iterations: 20,
            k: 12.5,
            train_risk: 0.0123,
            test_rmse: 0.75,
            wallclock_s: 0.0,
            error: None,
        };
        let mut buf = Vec::new();
        write_results_csv(std::slice::from_ref(&row), &mut buf).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 2);
        assert_eq!(read_results_csv(buf.as_slice()).unwrap(), vec![row]);
    }

    #[test]
    fn spec_parses_with_defaults() {
        let spec = ExperimentSpec::from_toml_str(
            r#"
            algorithms = ["fw_private", "zero_baseline"]
            epsilons = [0.1, 1.0]
            delta = 1e-6
            seeds = [1, 2]

            [dataset]
            kind = "synthetic"
            users = 20
            items = 8
            entries_per_user = 4
            seed = 1
            "#,
        )
        .unwrap();
        assert_eq!(spec.xi, 80);
        assert!(spec.clip);
        assert_eq!(spec.fw, FwSettings::default());
        let back = ExperimentSpec::from_toml_str(&spec.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn spec_rejects_bad_values() {
        let base = r#"
            algorithms = ["fw_private"]
            delta = 1e-6
            seeds = [1]
            [dataset]
            kind = "synthetic"
            users = 2
            items = 2
            entries_per_user = 1
            seed = 1
        "#;
        assert!(ExperimentSpec::from_toml_str(&format!("epsilons = []\n{base}")).is_err());
        assert!(
            ExperimentSpec::from_toml_str(&format!("epsilons = [1.0]\nbogus = 1\n{base}")).is_err()
        );
        assert!(ExperimentSpec::from_toml_str(&format!("epsilons = [1.0]\n{base}")).is_ok());
    }
}
