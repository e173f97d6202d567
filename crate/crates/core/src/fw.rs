//! Private Frank-Wolfe matrix completion with a global/local split.
//!
//! Each round the server ("global") sees only the aggregate covariance of
//! the current residual rows, perturbed by symmetric Gaussian noise, and
//! broadcasts its noisy top eigenvector `v` together with an inflated
//! eigenvalue `lambda'`. Every user ("local") then updates their own row
//!
//! ```text
//! Y_i <- Pi_{L,Omega}((1 - 1/T) Y_i - (k/T) u_i v^T),   u_i = <A_i, v> / lambda'
//! ```
//!
//! where `A_i = P_Omega(Y_i - Y*_i)` is the residual on that user's observed items.
//! The projection rescales the whole row by one scalar, so every row stays in
//! the span of the broadcast vectors and the iterate is stored as a shared
//! basis plus per-user coefficients: `O((m + n) T)` memory instead of `O(mn)`.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ObservedMatrix;
use crate::error::{Error, Result};
use crate::linalg::{
    covariance_accumulate, oja_with_sigma, top_eig_exact, EigPair, PowerOptions, SparseRow,
    SparseRows, SymMatrix,
};
use crate::privacy::{
    noise_scale, symmetric_noise_matrix, AlgoTag, Mechanism, NoiseSchedule, PrivacyParams, Purpose,
    RngStream,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigBackend {
    /// Dense noisy covariance and power iteration.
    #[default]
    Exact,
    /// Private Oja iteration on the sparse residual; never forms `n x n`.
    Oja,
}

impl std::str::FromStr for EigBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(EigBackend::Exact),
            "oja" => Ok(EigBackend::Oja),
            other => Err(Error::invalid(format!("unknown eigen backend '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FwConfig {
    /// Nuclear-norm budget `k`.
    pub k: f64,
    /// Number of rounds `T`.
    pub iterations: usize,
    /// Row bound `L`.
    pub row_bound: f64,
    /// Failure probability used by the eigenvalue inflation.
    pub beta: f64,
    pub backend: EigBackend,
    /// Inner Oja steps per round (oja backend only).
    pub oja_iterations: usize,
    pub schedule: NoiseSchedule,
    pub power: PowerOptions,
    /// Replaces the calibrated sigma. Test knob: any value other than the
    /// calibrated one voids the privacy guarantee.
    pub sigma_override: Option<f64>,
}

impl FwConfig {
    pub fn new(k: f64, iterations: usize, row_bound: f64) -> Self {
        FwConfig {
            k,
            iterations,
            row_bound,
            beta: 0.1,
            backend: EigBackend::Exact,
            oja_iterations: 100,
            schedule: NoiseSchedule::Uniform,
            power: PowerOptions::default(),
            sigma_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 0.0) || !self.k.is_finite() {
            return Err(Error::invalid(format!(
                "k must be non-negative, got {}",
                self.k
            )));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("T must be at least 1"));
        }
        if !(self.row_bound > 0.0) {
            return Err(Error::invalid(format!(
                "row bound must be positive, got {}",
                self.row_bound
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::invalid(format!(
                "beta must lie in (0, 1), got {}",
                self.beta
            )));
        }
        if self.backend == EigBackend::Oja && self.oja_iterations == 0 {
            return Err(Error::invalid(
                "oja backend needs at least one inner iteration",
            ));
        }
        if let Some(s) = self.sigma_override {
            if !(s >= 0.0) {
                return Err(Error::invalid(format!(
                    "sigma override must be >= 0, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Low-rank model `Y_i = sum_t c_{i,t} v_t^T` plus per-user means.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredModel {
    pub num_items: usize,
    /// Unit basis vectors, one per applied round.
    pub basis: Vec<Vec<f64>>,
    /// `coefficients[i][t]` multiplies `basis[t]` in user `i`'s row.
    pub coefficients: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub rating_lo: f64,
    pub rating_hi: f64,
    pub k: f64,
    pub iterations: usize,
    pub row_bound: f64,
}

impl FactoredModel {
    pub fn zeros(num_items: usize, means: Vec<f64>, rating_lo: f64, rating_hi: f64) -> Self {
        FactoredModel {
            num_items,
            basis: Vec::new(),
            coefficients: vec![Vec::new(); means.len()],
            means,
            rating_lo,
            rating_hi,
            k: 0.0,
            iterations: 0,
            row_bound: f64::INFINITY,
        }
    }

    pub fn num_users(&self) -> usize {
        self.coefficients.len()
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    /// Centred reconstruction `Y_{user,item}` (no mean, no clipping).
    pub fn entry(&self, user: usize, item: usize) -> f64 {
        self.coefficients[user]
            .iter()
            .zip(&self.basis)
            .map(|(c, v)| c * v[item])
            .sum()
    }

    pub fn dense_row(&self, user: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_items];
        for (c, v) in self.coefficients[user].iter().zip(&self.basis) {
            for (r, x) in row.iter_mut().zip(v) {
                *r += c * x;
            }
        }
        row
    }

    /// `m x n` centred reconstruction.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.num_users()).map(|i| self.dense_row(i)).collect()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "dpmc-factored v1")?;
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            self.num_users(),
            self.num_items,
            self.iterations,
            self.k,
            self.row_bound,
            self.rating_lo,
            self.rating_hi,
            self.rank()
        )?;
        write_reals(&mut out, &self.means)?;
        for v in &self.basis {
            write_reals(&mut out, v)?;
        }
        for c in &self.coefficients {
            write_reals(&mut out, c)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(source: R) -> Result<Self> {
        let mut lines = source.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::invalid(format!("model file truncated before {what}")))
        };
        if next("magic")?.trim() != "dpmc-factored v1" {
            return Err(Error::invalid("not a factored model file"));
        }
        let header = next("header")?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 8 {
            return Err(Error::invalid("factored model header needs 8 fields"));
        }
        let num = |i: usize| -> Result<f64> {
            h[i].parse()
                .map_err(|_| Error::invalid(format!("bad header field '{}'", h[i])))
        };
        let m = num(0)? as usize;
        let n = num(1)? as usize;
        let iterations = num(2)? as usize;
        let k = num(3)?;
        let row_bound = num(4)?;
        let rating_lo = num(5)?;
        let rating_hi = num(6)?;
        let rank = num(7)? as usize;
        let means = read_reals(&next("means")?, m)?;
        let basis = (0..rank)
            .map(|_| read_reals(&next("basis")?, n))
            .collect::<Result<Vec<_>>>()?;
        let coefficients = (0..m)
            .map(|_| read_reals(&next("coefficients")?, rank))
            .collect::<Result<Vec<_>>>()?;
        Ok(FactoredModel {
            num_items: n,
            basis,
            coefficients,
            means,
            rating_lo,
            rating_hi,
            k,
            iterations,
            row_bound,
        })
    }
}

pub(crate) fn write_reals<W: Write>(out: &mut W, xs: &[f64]) -> Result<()> {
    let s: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
    writeln!(out, "{}", s.join(" "))?;
    Ok(())
}

pub(crate) fn read_reals(line: &str, expected: usize) -> Result<Vec<f64>> {
    let xs = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad real '{t}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    if xs.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: xs.len(),
        });
    }
    Ok(xs)
}

/// Prediction for `(user, item)`: reconstruction plus the user's mean,
/// optionally clamped to the rating scale.
pub fn predict(model: &FactoredModel, user: usize, item: usize, clip: bool) -> Result<f64> {
    if user >= model.num_users() || item >= model.num_items {
        return Err(Error::OutOfRange(format!(
            "({user}, {item}) outside {} x {}",
            model.num_users(),
            model.num_items
        )));
    }
    let raw = model.entry(user, item) + model.means[user];
    Ok(if clip {
        raw.clamp(model.rating_lo, model.rating_hi)
    } else {
        raw
    })
}

/// What the server sends to every user after round `iteration`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalBroadcast {
    pub v_hat: Vec<f64>,
    pub lambda_prime: f64,
    pub iteration: usize,
}

/// `lambda_hat + sqrt(sigma ln(n / beta)) n^{1/4}`: the noisy singular value
/// inflated by a high-probability bound on the noise spectral norm.
pub fn lambda_prime(lambda_hat: f64, sigma: f64, n: usize, beta: f64) -> f64 {
    let n = n as f64;
    lambda_hat + (sigma * (n / beta).ln()).sqrt() * n.powf(0.25)
}

/// A user's private state: their coefficient row and their current fit on
/// their observed items, `P_Omega(Y_i)` in the order of the observed columns.
///
/// Coefficients are held as `scale * raw` so that the per-round decay and
/// projection cost O(1) instead of O(t).
#[derive(Debug, Clone, PartialEq)]
pub struct UserState {
    raw: Vec<f64>,
    scale: f64,
    pub fitted: Vec<f64>,
}

impl UserState {
    pub fn new(observed: &SparseRow) -> Self {
        UserState {
            raw: Vec::new(),
            scale: 1.0,
            fitted: vec![0.0; observed.nnz()],
        }
    }

    pub fn from_parts(coefficients: Vec<f64>, fitted: Vec<f64>) -> Self {
        UserState {
            raw: coefficients,
            scale: 1.0,
            fitted,
        }
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.raw.iter().map(|c| c * self.scale).collect()
    }

    pub fn into_coefficients(self) -> Vec<f64> {
        let scale = self.scale;
        let mut raw = self.raw;
        raw.iter_mut().for_each(|c| *c *= scale);
        raw
    }

    fn rescale(&mut self, factor: f64) {
        self.scale *= factor;
        if self.scale.abs() < 1e-150 {
            let s = self.scale;
            self.raw.iter_mut().for_each(|c| *c *= s);
            self.scale = 1.0;
        }
    }

    /// `A_i = P_Omega(Y_i - Y*_i)`.
    pub fn residual(&self, observed: &SparseRow) -> SparseRow {
        SparseRow {
            cols: observed.cols.clone(),
            vals: self
                .fitted
                .iter()
                .zip(&observed.vals)
                .map(|(f, y)| f - y)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// New residual `A_i`; its outer product `A_i^T A_i` is the user's
    /// contribution to the next covariance.
    pub residual: SparseRow,
    pub u_hat: f64,
    /// Scalar applied by `Pi_{L,Omega}` (1 when inactive).
    pub projection_scale: f64,
}

fn projection_factor(fitted: &[f64], row_bound: f64) -> f64 {
    let nrm = fitted.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nrm > row_bound {
        row_bound / nrm
    } else {
        1.0
    }
}

/// One user's Frank-Wolfe step given the round's broadcast, applied to
/// `state` in place.
pub fn local_update(
    state: &mut UserState,
    observed: &SparseRow,
    broadcast: &GlobalBroadcast,
    k: f64,
    iterations: usize,
    row_bound: f64,
) -> Result<LocalUpdate> {
    if !(broadcast.lambda_prime > 0.0) {
        return Err(Error::ZeroLambda(broadcast.lambda_prime));
    }
    let residual = state.residual(observed);
    let u_hat = residual.dot(&broadcast.v_hat) / broadcast.lambda_prime;
    let decay = 1.0 - 1.0 / iterations as f64;
    let step = -(k / iterations as f64) * u_hat;

    for (f, &j) in state.fitted.iter_mut().zip(&observed.cols) {
        *f = decay * *f + step * broadcast.v_hat[j];
    }
    state.rescale(decay);
    let raw_step = step / state.scale;
    state.raw.push(raw_step);

    let scale = projection_factor(&state.fitted, row_bound);
    if scale != 1.0 {
        state.rescale(scale);
        state.fitted.iter_mut().for_each(|f| *f *= scale);
    }
    let residual = state.residual(observed);
    Ok(LocalUpdate {
        residual,
        u_hat,
        projection_scale: scale,
    })
}

/// `Pi_{L,Omega}` on a factored row: scales the coefficients by
/// `min(L / ||P_Omega(Y_i)||, 1)`.
pub fn project_row_factored(
    coefficients: &[f64],
    basis: &[Vec<f64>],
    observed_cols: &[usize],
    row_bound: f64,
) -> Vec<f64> {
    let fitted: Vec<f64> = observed_cols
        .iter()
        .map(|&j| coefficients.iter().zip(basis).map(|(c, v)| c * v[j]).sum())
        .collect();
    let scale = projection_factor(&fitted, row_bound);
    coefficients.iter().map(|c| c * scale).collect()
}

/// Source of the per-round covariance noise `N^(t)`.
pub trait CovarianceNoise {
    fn draw(&mut self, iteration: usize, n: usize, sigma: f64) -> SymMatrix;
}

/// Noise drawn from the labelled stream `(seed, Fw, iteration, CovarianceNoise)`.
#[derive(Debug, Clone, Copy)]
pub struct SeededNoise {
    pub seed: u64,
}

impl CovarianceNoise for SeededNoise {
    fn draw(&mut self, iteration: usize, n: usize, sigma: f64) -> SymMatrix {
        let stream = RngStream::new(
            self.seed,
            AlgoTag::Fw,
            iteration as u64,
            Purpose::CovarianceNoise,
        );
        symmetric_noise_matrix(n, sigma, stream)
    }
}

/// Records every matrix drawn from an inner source.
#[derive(Debug, Clone)]
pub struct RecordingNoise<N> {
    pub inner: N,
    pub tape: Vec<SymMatrix>,
}

impl<N> RecordingNoise<N> {
    pub fn new(inner: N) -> Self {
        RecordingNoise {
            inner,
            tape: Vec::new(),
        }
    }
}

impl<N: CovarianceNoise> CovarianceNoise for RecordingNoise<N> {
    fn draw(&mut self, iteration: usize, n: usize, sigma: f64) -> SymMatrix {
        let m = self.inner.draw(iteration, n, sigma);
        self.tape.push(m.clone());
        m
    }
}

/// Replays a recorded tape in order; `sigma` is ignored.
#[derive(Debug, Clone)]
pub struct NoiseTape {
    pub matrices: Vec<SymMatrix>,
    cursor: usize,
}

impl NoiseTape {
    pub fn new(matrices: Vec<SymMatrix>) -> Self {
        NoiseTape {
            matrices,
            cursor: 0,
        }
    }
}

impl CovarianceNoise for NoiseTape {
    fn draw(&mut self, _iteration: usize, n: usize, _sigma: f64) -> SymMatrix {
        let m = self
            .matrices
            .get(self.cursor)
            .cloned()
            .unwrap_or_else(|| SymMatrix::zeros(n));
        self.cursor += 1;
        m
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FwDiagnostics {
    /// Base sigma before any schedule.
    pub sigma: f64,
    /// Rounds whose power iteration hit `max_iter`.
    pub unconverged_eigensolves: usize,
    /// Rounds where `sum_i u_i^2 > 1`.
    pub u_hat_norm_violations: usize,
    /// Rounds skipped because `lambda' = 0` (noiseless, zero residual).
    pub skipped_rounds: usize,
    /// Users whose row was rescaled by the projection, summed over rounds.
    pub projections: usize,
}

#[derive(Debug, Clone)]
pub struct FwOutput {
    pub model: FactoredModel,
    pub broadcasts: Vec<GlobalBroadcast>,
    pub diagnostics: FwDiagnostics,
}

/// Base per-round sigma for `cfg`: the override if set, else the calibrated
/// scale of the chosen backend.
pub fn fw_sigma(cfg: &FwConfig, params: &PrivacyParams) -> Result<f64> {
    if let Some(s) = cfg.sigma_override {
        return Ok(s);
    }
    match cfg.backend {
        EigBackend::Exact => {
            Ok(noise_scale(Mechanism::Fw, cfg.row_bound, cfg.iterations, params)?.sigma)
        }
        EigBackend::Oja => Ok(noise_scale(
            Mechanism::Oja,
            cfg.row_bound,
            cfg.iterations * cfg.oja_iterations,
            params,
        )?
        .sigma),
    }
}

/// Private Frank-Wolfe with seeded noise.
pub fn run_private_fw(
    obs: &ObservedMatrix,
    cfg: &FwConfig,
    params: &PrivacyParams,
    seed: u64,
) -> Result<FwOutput> {
    run_private_fw_with_noise(obs, cfg, params, seed, &mut SeededNoise { seed })
}

/// Private Frank-Wolfe drawing exact-backend covariance noise from `noise`.
pub fn run_private_fw_with_noise(
    obs: &ObservedMatrix,
    cfg: &FwConfig,
    params: &PrivacyParams,
    seed: u64,
    noise: &mut dyn CovarianceNoise,
) -> Result<FwOutput> {
    cfg.validate()?;
    if obs.rows.max_row_norm() > cfg.row_bound * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "observed rows exceed the row bound {}; clip them first",
            cfg.row_bound
        )));
    }
    let sigma = fw_sigma(cfg, params)?;
    drive(obs, cfg, sigma, seed, noise)
}

/// Non-private Frank-Wolfe with an exact linear oracle and step `1/T`.
pub fn run_nonprivate_fw(obs: &ObservedMatrix, k: f64, iterations: usize) -> Result<FactoredModel> {
    let mut cfg = FwConfig::new(k, iterations, f64::INFINITY);
    cfg.sigma_override = Some(0.0);
    cfg.validate()?;
    Ok(drive(obs, &cfg, 0.0, 0, &mut SeededNoise { seed: 0 })?.model)
}

fn drive(
    obs: &ObservedMatrix,
    cfg: &FwConfig,
    base_sigma: f64,
    seed: u64,
    noise: &mut dyn CovarianceNoise,
) -> Result<FwOutput> {
    let n = obs.num_items();
    let big_t = cfg.iterations;
    let mut states: Vec<UserState> = obs.rows.rows.iter().map(UserState::new).collect();
    let mut residuals = SparseRows {
        n_cols: n,
        rows: states
            .iter()
            .zip(&obs.rows.rows)
            .map(|(s, r)| s.residual(r))
            .collect(),
    };
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut broadcasts = Vec::new();
    let mut diag = FwDiagnostics {
        sigma: base_sigma,
        ..Default::default()
    };

    for t in 1..=big_t {
        let sigma_t = cfg.schedule.sigma_at(base_sigma, t, big_t);
        let eig_stream = RngStream::new(seed, AlgoTag::Eigen, t as u64, Purpose::StartVector);
        let pair: EigPair = match cfg.backend {
            EigBackend::Exact => {
                let mut w = covariance_accumulate(&residuals);
                if sigma_t > 0.0 {
                    w.add_assign(&noise.draw(t, n, sigma_t));
                }
                let (pair, d) = top_eig_exact(&w, cfg.power, eig_stream);
                if !d.converged {
                    diag.unconverged_eigensolves += 1;
                }
                pair
            }
            EigBackend::Oja => {
                let stream = RngStream::new(seed, AlgoTag::Oja, t as u64, Purpose::Generic);
                oja_with_sigma(&residuals, sigma_t, cfg.oja_iterations, stream)?
            }
        };
        let lp = lambda_prime(pair.lambda_hat, sigma_t, n, cfg.beta);
        if !(lp > 0.0) {
            diag.skipped_rounds += 1;
            continue;
        }
        let broadcast = GlobalBroadcast {
            v_hat: pair.vector,
            lambda_prime: lp,
            iteration: t,
        };
        let updates: Vec<LocalUpdate> = states
            .par_iter_mut()
            .zip(obs.rows.rows.par_iter())
            .map(|(s, r)| local_update(s, r, &broadcast, cfg.k, big_t, cfg.row_bound))
            .collect::<Result<_>>()?;
        let u_norm_sq: f64 = updates.iter().map(|u| u.u_hat * u.u_hat).sum();
        if u_norm_sq > 1.0 + 1e-12 {
            diag.u_hat_norm_violations += 1;
        }
        diag.projections += updates.iter().filter(|u| u.projection_scale != 1.0).count();
        residuals.rows = updates.into_iter().map(|u| u.residual).collect();
        basis.push(broadcast.v_hat.clone());
        broadcasts.push(broadcast);
    }

    let model = FactoredModel {
        num_items: n,
        basis,
        coefficients: states
            .into_iter()
            .map(UserState::into_coefficients)
            .collect(),
        means: obs.means.clone(),
        rating_lo: obs.rating_lo,
        rating_hi: obs.rating_hi,
        k: cfg.k,
        iterations: big_t,
        row_bound: cfg.row_bound,
    };
    Ok(FwOutput {
        model,
        broadcasts,
        diagnostics: diag,
    })
}

/// Rebuilds every user's final row from a fixed broadcast sequence. Each
/// user's output depends only on their own observed row and the broadcasts.
pub fn replay_local(
    obs: &ObservedMatrix,
    broadcasts: &[GlobalBroadcast],
    k: f64,
    iterations: usize,
    row_bound: f64,
) -> Result<Vec<Vec<f64>>> {
    obs.rows
        .rows
        .par_iter()
        .map(|row| {
            let mut state = UserState::new(row);
            for b in broadcasts {
                local_update(&mut state, row, b, k, iterations, row_bound)?;
            }
            Ok(state.into_coefficients())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundsMode {
    /// Rounds that balance optimisation and privacy error on the empirical
    /// risk.
    Empirical,
    /// Rounds that balance the generalisation error.
    Generalization,
}

/// Suggested number of rounds, evaluated with unit constants and rounded to
/// the nearest integer (at least 1).
///
/// * `Empirical`: `k^{4/5} eps^{2/5} / (n^{1/5} L^{4/5})`
/// * `Generalization`: `k^{4/3} / (|Omega| (m + n))^{1/3}`
pub fn suggest_t(
    mode: RoundsMode,
    k: f64,
    row_bound: f64,
    num_items: usize,
    num_users: usize,
    num_observed: usize,
    epsilon: f64,
) -> usize {
    let raw = match mode {
        RoundsMode::Empirical => {
            k.powf(0.8) * epsilon.powf(0.4) / ((num_items as f64).powf(0.2) * row_bound.powf(0.8))
        }
        RoundsMode::Generalization => {
            k.powf(4.0 / 3.0)
                / (num_observed as f64 * (num_users + num_items) as f64).powf(1.0 / 3.0)
        }
    };
    if raw.is_finite() {
        (raw.round() as usize).max(1)
    } else {
        1
    }
}
