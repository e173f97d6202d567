//! Private baselines: one-shot SVD completion and projected gradient descent.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::ObservedMatrix;
use crate::error::{Error, Result};
use crate::fw::{read_reals, write_reals, FactoredModel};
use crate::linalg::{
    canonical_sign, covariance_accumulate, dot, norm, symmetric_eigen, SparseRow, SparseRows,
    SymMatrix,
};
use crate::privacy::{
    fill_gaussian, noise_scale, symmetric_noise_matrix, AlgoTag, Mechanism, NoiseSchedule,
    PrivacyParams, Purpose, RngStream,
};

const SUBSPACE_TOL: f64 = 1e-12;
const SUBSPACE_MAX_SWEEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SubspaceDiagnostics {
    pub sweeps: usize,
    pub converged: bool,
    /// Shift added to make `W + shift I` positive semidefinite.
    pub shift: f64,
}

/// Modified Gram-Schmidt with one re-orthogonalisation pass. Columns that
/// vanish are replaced by the first standard basis vector that survives.
fn orthonormalize(cols: &mut [Vec<f64>]) {
    let n = cols.first().map_or(0, Vec::len);
    for i in 0..cols.len() {
        let mut candidate = 0;
        loop {
            for _ in 0..2 {
                for j in 0..i {
                    let (done, rest) = cols.split_at_mut(i);
                    let p = dot(&done[j], &rest[0]);
                    for (x, q) in rest[0].iter_mut().zip(&done[j]) {
                        *x -= p * q;
                    }
                }
            }
            let nrm = norm(&cols[i]);
            if nrm > 1e-10 {
                cols[i].iter_mut().for_each(|x| *x /= nrm);
                break;
            }
            if candidate >= n {
                break;
            }
            cols[i] = vec![0.0; n];
            cols[i][candidate] = 1.0;
            candidate += 1;
        }
    }
}

/// Orthonormal basis (as `r` columns) of the top-`r` eigenspace of `W`.
///
/// Subspace iteration on `W + shift I` with an oversampled block and a
/// Rayleigh-Ritz rotation every sweep. Stops once the top-`r` block moves by
/// less than `1e-12` (Frobenius norm of its component outside the previous
/// span) or after 1000 sweeps.
pub fn top_r_subspace(
    w: &SymMatrix,
    r: usize,
    stream: RngStream,
) -> Result<(Vec<Vec<f64>>, SubspaceDiagnostics)> {
    let n = w.dim();
    if r == 0 || r > n {
        return Err(Error::invalid(format!("rank {r} must lie in [1, {n}]")));
    }
    let block = n.min(r + r.max(5));
    let shift = (-w.gershgorin_lower()).max(0.0);
    let mut rng = stream.rng();
    let mut q: Vec<Vec<f64>> = (0..block)
        .map(|_| {
            let mut c = vec![0.0; n];
            fill_gaussian(&mut rng, 1.0, &mut c);
            c
        })
        .collect();
    orthonormalize(&mut q);

    let mut prev: Option<Vec<Vec<f64>>> = None;
    let mut diag = SubspaceDiagnostics {
        shift,
        ..Default::default()
    };
    for sweep in 1..=SUBSPACE_MAX_SWEEPS {
        diag.sweeps = sweep;
        for c in q.iter_mut() {
            let wc = w.matvec(c);
            for (x, y) in c.iter_mut().zip(&wc) {
                *x = y + shift * *x;
            }
        }
        orthonormalize(&mut q);

        let wq: Vec<Vec<f64>> = q.iter().map(|c| w.matvec(c)).collect();
        let mut h = SymMatrix::zeros(block);
        for a in 0..block {
            for b in a..block {
                let v = 0.5 * (dot(&q[a], &wq[b]) + dot(&q[b], &wq[a]));
                h.set_sym(a, b, v);
            }
        }
        let (_, ritz) = symmetric_eigen(&h);
        q = ritz
            .iter()
            .map(|s| {
                let mut c = vec![0.0; n];
                for (coef, col) in s.iter().zip(&q) {
                    for (x, y) in c.iter_mut().zip(col) {
                        *x += coef * y;
                    }
                }
                c
            })
            .collect();
        orthonormalize(&mut q);

        let top: Vec<Vec<f64>> = q[..r].to_vec();
        if let Some(p) = &prev {
            let mut change = 0.0;
            for c in &top {
                let mut resid = c.clone();
                for pc in p {
                    let proj = dot(pc, c);
                    for (x, y) in resid.iter_mut().zip(pc) {
                        *x -= proj * y;
                    }
                }
                change += dot(&resid, &resid);
            }
            if change.sqrt() < SUBSPACE_TOL {
                diag.converged = true;
                prev = Some(top);
                break;
            }
        }
        prev = Some(top);
    }
    let mut basis = prev.unwrap_or_default();
    for c in basis.iter_mut() {
        canonical_sign(c);
    }
    Ok((basis, diag))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdConfig {
    pub rank: usize,
    pub row_bound: f64,
    /// Test knob; see [`crate::fw::FwConfig::sigma_override`].
    pub sigma_override: Option<f64>,
}

impl SvdConfig {
    pub fn new(rank: usize, row_bound: f64) -> Self {
        SvdConfig {
            rank,
            row_bound,
            sigma_override: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvdOutput {
    /// Basis `V_r` with coefficients `(mn / |Omega|) P_Omega(Y*_i) V_r`.
    pub model: FactoredModel,
    pub sigma: f64,
    pub diagnostics: SubspaceDiagnostics,
}

fn clip_row(row: &SparseRow, bound: f64) -> SparseRow {
    let nrm = row.norm();
    let mut out = row.clone();
    if nrm > bound {
        out.scale(bound / nrm);
    }
    out
}

/// Single-release private SVD completion: a noisy top-`r` right subspace of
/// the clipped observations, onto which every user projects their own row.
pub fn run_private_svd(
    obs: &ObservedMatrix,
    cfg: &SvdConfig,
    params: &PrivacyParams,
    seed: u64,
) -> Result<SvdOutput> {
    let omega = obs.num_observed();
    if omega == 0 {
        return Err(Error::EmptyObservations);
    }
    let n = obs.num_items();
    if cfg.rank == 0 || cfg.rank > n {
        return Err(Error::invalid(format!(
            "rank {} must lie in [1, {n}]",
            cfg.rank
        )));
    }
    let sigma = match cfg.sigma_override {
        Some(s) => s,
        None => noise_scale(Mechanism::Svd, cfg.row_bound, 1, params)?.sigma,
    };
    let clipped = SparseRows {
        n_cols: n,
        rows: obs
            .rows
            .rows
            .iter()
            .map(|r| clip_row(r, cfg.row_bound))
            .collect(),
    };
    let mut w = covariance_accumulate(&clipped);
    if sigma > 0.0 {
        let stream = RngStream::new(seed, AlgoTag::Svd, 0, Purpose::CovarianceNoise);
        w.add_assign(&symmetric_noise_matrix(n, sigma, stream));
    }
    let (basis, diagnostics) = top_r_subspace(
        &w,
        cfg.rank,
        RngStream::new(seed, AlgoTag::Svd, 0, Purpose::StartVector),
    )?;
    let scale = (obs.num_users() as f64 * n as f64) / omega as f64;
    let coefficients = obs
        .rows
        .rows
        .iter()
        .map(|row| basis.iter().map(|v| scale * row.dot(v)).collect())
        .collect();
    let model = FactoredModel {
        num_items: n,
        basis,
        coefficients,
        means: obs.means.clone(),
        rating_lo: obs.rating_lo,
        rating_hi: obs.rating_hi,
        k: 0.0,
        iterations: 1,
        row_bound: cfg.row_bound,
    };
    Ok(SvdOutput {
        model,
        sigma,
        diagnostics,
    })
}

/// Projection of a non-negative spectrum onto the `l1` ball of radius `k`:
/// `Z_i = max(0, Lambda_i - tau)` with `tau` chosen so that `sum Z = k`, or
/// `Lambda` itself when it already fits.
pub fn nuclear_project(spectrum: &[f64], k: f64) -> Vec<f64> {
    let total: f64 = spectrum.iter().sum();
    if total <= k {
        return spectrum.to_vec();
    }
    if k <= 0.0 {
        return vec![0.0; spectrum.len()];
    }
    let mut sorted = spectrum.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut prefix = 0.0;
    let mut tau = 0.0;
    for (j, &s) in sorted.iter().enumerate() {
        prefix += s;
        let candidate = (prefix - k) / (j + 1) as f64;
        if s - candidate > 0.0 {
            tau = candidate;
        } else {
            break;
        }
    }
    spectrum.iter().map(|&s| (s - tau).max(0.0)).collect()
}

/// Step sizes `eta_t` for projected gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Constant(f64),
    /// `eta_t = scale / sqrt(t)`
    InvSqrt(f64),
    /// `eta_t = scale / t`
    Inv(f64),
}

impl StepRule {
    pub fn schedule(&self, iterations: usize) -> Vec<f64> {
        (1..=iterations)
            .map(|t| match *self {
                StepRule::Constant(c) => c,
                StepRule::InvSqrt(c) => c / (t as f64).sqrt(),
                StepRule::Inv(c) => c / t as f64,
            })
            .collect()
    }
}

impl std::str::FromStr for StepRule {
    type Err = Error;

    /// `0.5`, `inv_sqrt`, `inv`, or `inv_sqrt:0.5` style.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, scale) = match s.split_once(':') {
            Some((k, v)) => (
                k,
                v.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad step scale '{v}'")))?,
            ),
            None => (s, 1.0),
        };
        match kind {
            "inv_sqrt" => Ok(StepRule::InvSqrt(scale)),
            "inv" => Ok(StepRule::Inv(scale)),
            _ => kind
                .parse::<f64>()
                .map(StepRule::Constant)
                .map_err(|_| Error::invalid(format!("unknown step rule '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgdConfig {
    pub k: f64,
    pub iterations: usize,
    /// One positive step size per iteration.
    pub steps: Vec<f64>,
    pub row_bound: f64,
    pub schedule: NoiseSchedule,
    /// Test knob; see [`crate::fw::FwConfig::sigma_override`].
    pub sigma_override: Option<f64>,
}

impl PgdConfig {
    pub fn new(k: f64, iterations: usize, rule: &StepRule, row_bound: f64) -> Self {
        PgdConfig {
            k,
            iterations,
            steps: rule.schedule(iterations),
            row_bound,
            schedule: NoiseSchedule::Uniform,
            sigma_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(Error::invalid(format!(
                "k must be positive, got {}",
                self.k
            )));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("T must be at least 1"));
        }
        if self.steps.len() != self.iterations {
            return Err(Error::DimensionMismatch {
                expected: self.iterations,
                got: self.steps.len(),
            });
        }
        if self.steps.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("step sizes must be positive"));
        }
        Ok(())
    }
}

/// Dense `m x n` centred prediction matrix plus per-user means.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel {
    pub num_users: usize,
    pub num_items: usize,
    /// Row-major values.
    pub values: Vec<f64>,
    pub means: Vec<f64>,
    pub rating_lo: f64,
    pub rating_hi: f64,
}

impl DenseModel {
    pub fn entry(&self, user: usize, item: usize) -> f64 {
        self.values[user * self.num_items + item]
    }

    pub fn row(&self, user: usize) -> &[f64] {
        &self.values[user * self.num_items..(user + 1) * self.num_items]
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "dpmc-dense v1")?;
        writeln!(
            out,
            "{} {} {} {}",
            self.num_users, self.num_items, self.rating_lo, self.rating_hi
        )?;
        write_reals(&mut out, &self.means)?;
        for i in 0..self.num_users {
            write_reals(&mut out, self.row(i))?;
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
        if next("magic")?.trim() != "dpmc-dense v1" {
            return Err(Error::invalid("not a dense model file"));
        }
        let header = next("header")?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 {
            return Err(Error::invalid("dense model header needs 4 fields"));
        }
        let bad = |s: &str| Error::invalid(format!("bad header field '{s}'"));
        let m: usize = h[0].parse().map_err(|_| bad(h[0]))?;
        let n: usize = h[1].parse().map_err(|_| bad(h[1]))?;
        let lo: f64 = h[2].parse().map_err(|_| bad(h[2]))?;
        let hi: f64 = h[3].parse().map_err(|_| bad(h[3]))?;
        let means = read_reals(&next("means")?, m)?;
        let mut values = Vec::with_capacity(m * n);
        for _ in 0..m {
            values.extend(read_reals(&next("row")?, n)?);
        }
        Ok(DenseModel {
            num_users: m,
            num_items: n,
            values,
            means,
            rating_lo: lo,
            rating_hi: hi,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PgdOutput {
    pub model: DenseModel,
    pub sigma: f64,
    /// Spectral columns dropped because `Lambda_i < 1e-8 Lambda_max`, summed
    /// over iterations.
    pub dropped_columns: usize,
}

fn dense_gram(values: &[f64], m: usize, n: usize) -> SymMatrix {
    let rows = SparseRows {
        n_cols: n,
        rows: (0..m)
            .map(|i| SparseRow {
                cols: (0..n).collect(),
                vals: values[i * n..(i + 1) * n].to_vec(),
            })
            .collect(),
    };
    covariance_accumulate(&rows)
}

/// Private projected gradient descent on the nuclear-norm ball.
///
/// Each iteration takes the descent step `Y <- Y - eta_t P_Omega(Y - Y*)`,
/// releases `Y^T Y` with symmetric Gaussian noise, and rebuilds `Y` from the
/// noisy eigenpairs with the spectrum projected onto the `l1` ball of radius
/// `k`.
pub fn run_private_pgd(
    obs: &ObservedMatrix,
    cfg: &PgdConfig,
    params: &PrivacyParams,
    seed: u64,
) -> Result<PgdOutput> {
    cfg.validate()?;
    let m = obs.num_users();
    let n = obs.num_items();
    let base_sigma = match cfg.sigma_override {
        Some(s) => s,
        None => noise_scale(Mechanism::Pgd, cfg.row_bound, cfg.iterations, params)?.sigma,
    };
    let mut y = vec![0.0; m * n];
    let mut dropped = 0;
    for (t, &eta) in (1..=cfg.iterations).zip(&cfg.steps) {
        for (i, row) in obs.rows.rows.iter().enumerate() {
            for (j, target) in row.iter() {
                let cell = &mut y[i * n + j];
                *cell -= eta * (*cell - target);
            }
        }
        let sigma_t = cfg.schedule.sigma_at(base_sigma, t, cfg.iterations);
        let mut w = dense_gram(&y, m, n);
        if sigma_t > 0.0 {
            let stream = RngStream::new(seed, AlgoTag::Pgd, t as u64, Purpose::CovarianceNoise);
            w.add_assign(&symmetric_noise_matrix(n, sigma_t, stream));
        }
        let (eigvals, eigvecs) = symmetric_eigen(&w);
        let lambdas: Vec<f64> = eigvals.iter().map(|&e| e.max(0.0).sqrt()).collect();
        let lmax = lambdas.first().copied().unwrap_or(0.0);
        let keep: Vec<usize> = (0..n)
            .filter(|&i| lambdas[i] > 0.0 && lambdas[i] >= 1e-8 * lmax)
            .collect();
        dropped += n - keep.len();
        let kept: Vec<f64> = keep.iter().map(|&i| lambdas[i]).collect();
        let z = nuclear_project(&kept, cfg.k);

        let mut next = vec![0.0; m * n];
        for (slot, &idx) in keep.iter().enumerate() {
            let v = &eigvecs[idx];
            let factor = z[slot] / lambdas[idx];
            if factor == 0.0 {
                continue;
            }
            for i in 0..m {
                let yv = dot(&y[i * n..(i + 1) * n], v) * factor;
                if yv != 0.0 {
                    for (cell, vj) in next[i * n..(i + 1) * n].iter_mut().zip(v) {
                        *cell += yv * vj;
                    }
                }
            }
        }
        y = next;
    }
    Ok(PgdOutput {
        model: DenseModel {
            num_users: m,
            num_items: n,
            values: y,
            means: obs.means.clone(),
            rating_lo: obs.rating_lo,
            rating_hi: obs.rating_hi,
        },
        sigma: base_sigma,
        dropped_columns: dropped,
    })
}
