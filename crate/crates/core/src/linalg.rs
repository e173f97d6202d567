//! Sparse Gram-matrix kernels, symmetric eigen-solvers and the private Oja
//! iteration.
//!
//! Row-parallel reductions split the rows into fixed-size contiguous chunks
//! and combine the partial results along a fixed binary tree, so results are
//! bit-identical for any rayon thread count.

use rand::Rng;

use crate::error::{Error, Result};
use crate::privacy::{fill_gaussian, noise_scale, Mechanism, PrivacyParams, Purpose, RngStream};

const COV_CHUNK: usize = 256;
const MATVEC_CHUNK: usize = 1024;

/// One sparse row: strictly increasing column indices and their values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRow {
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseRow {
    pub fn new(cols: Vec<usize>, vals: Vec<f64>) -> Result<Self> {
        if cols.len() != vals.len() {
            return Err(Error::DimensionMismatch {
                expected: cols.len(),
                got: vals.len(),
            });
        }
        if cols.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("column indices must be strictly increasing"));
        }
        Ok(SparseRow { cols, vals })
    }

    pub fn empty() -> Self {
        SparseRow::default()
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.vals.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `<row, dense>` over the row's support.
    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.cols
            .iter()
            .zip(&self.vals)
            .map(|(&j, &x)| x * dense[j])
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.cols.iter().copied().zip(self.vals.iter().copied())
    }

    pub fn scale(&mut self, factor: f64) {
        for x in &mut self.vals {
            *x *= factor;
        }
    }
}

/// `m` sparse rows over `n_cols` columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    pub n_cols: usize,
    pub rows: Vec<SparseRow>,
}

impl SparseRows {
    pub fn new(n_cols: usize, rows: Vec<SparseRow>) -> Result<Self> {
        for r in &rows {
            if let Some(&last) = r.cols.last() {
                if last >= n_cols {
                    return Err(Error::OutOfRange(format!(
                        "column {last} with only {n_cols} columns"
                    )));
                }
            }
        }
        Ok(SparseRows { n_cols, rows })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(SparseRow::nnz).sum()
    }

    pub fn max_row_norm(&self) -> f64 {
        self.rows.iter().map(SparseRow::norm).fold(0.0, f64::max)
    }

    /// `||A v||^2` without forming `A v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|r| {
                let d = r.dot(v);
                d * d
            })
            .sum()
    }
}

/// Dense symmetric `n x n` matrix stored in full row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = SymMatrix::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = SymMatrix::zeros(n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from full row-major data, checking exact symmetry.
    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: data.len(),
            });
        }
        let m = SymMatrix { n, data };
        if !m.is_symmetric() {
            return Err(Error::invalid("matrix is not symmetric"));
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets `(i, j)` and `(j, i)`.
    pub fn set_sym(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.n + j] = value;
        self.data[j * self.n + i] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n)
            .all(|i| (i + 1..self.n).all(|j| self.get(i, j).to_bits() == self.get(j, i).to_bits()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn add_assign(&mut self, other: &SymMatrix) {
        assert_eq!(self.n, other.n, "dimension mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.matvec_into(v, &mut out);
        out
    }

    pub fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), v);
        }
    }

    /// Lower Gershgorin bound on the smallest eigenvalue.
    pub fn gershgorin_lower(&self) -> f64 {
        (0..self.n)
            .map(|i| {
                let off: f64 = (0..self.n)
                    .filter(|&j| j != i)
                    .map(|j| self.get(i, j).abs())
                    .sum();
                self.get(i, i) - off
            })
            .fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Fixed-shape parallel reduction over `[lo, hi)` chunk indices.
fn tree_reduce<T, F, C>(lo: usize, hi: usize, leaf: &F, combine: &C) -> T
where
    T: Send,
    F: Fn(usize) -> T + Sync,
    C: Fn(T, T) -> T + Sync,
{
    if hi - lo == 1 {
        return leaf(lo);
    }
    let mid = lo + (hi - lo) / 2;
    let (a, b) = rayon::join(
        || tree_reduce(lo, mid, leaf, combine),
        || tree_reduce(mid, hi, leaf, combine),
    );
    combine(a, b)
}

fn accumulate_rows(rows: &[SparseRow], w: &mut SymMatrix) {
    let n = w.n;
    for r in rows {
        for (a, va) in r.iter() {
            let base = a * n;
            for (b, vb) in r.iter() {
                w.data[base + b] += va * vb;
            }
        }
    }
}

/// `W = sum_i A_i^T A_i`, accumulated over each row's support only.
pub fn covariance_accumulate(rows: &SparseRows) -> SymMatrix {
    let n = rows.n_cols;
    let chunks = rows.rows.len().div_ceil(COV_CHUNK);
    if chunks == 0 {
        return SymMatrix::zeros(n);
    }
    let leaf = |c: usize| {
        let end = ((c + 1) * COV_CHUNK).min(rows.rows.len());
        let mut w = SymMatrix::zeros(n);
        accumulate_rows(&rows.rows[c * COV_CHUNK..end], &mut w);
        w
    };
    let combine = |mut a: SymMatrix, b: SymMatrix| {
        a.add_assign(&b);
        a
    };
    tree_reduce(0, chunks, &leaf, &combine)
}

/// `A^T A v` in two sparse passes; never forms `A^T A`.
pub fn sparse_gram_matvec(rows: &SparseRows, v: &[f64]) -> Result<Vec<f64>> {
    let n = rows.n_cols;
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: v.len(),
        });
    }
    let chunks = rows.rows.len().div_ceil(MATVEC_CHUNK);
    if chunks == 0 {
        return Ok(vec![0.0; n]);
    }
    let leaf = |c: usize| {
        let end = ((c + 1) * MATVEC_CHUNK).min(rows.rows.len());
        let mut out = vec![0.0; n];
        for r in &rows.rows[c * MATVEC_CHUNK..end] {
            let s = r.dot(v);
            if s != 0.0 {
                for (j, x) in r.iter() {
                    out[j] += s * x;
                }
            }
        }
        out
    };
    let combine = |mut a: Vec<f64>, b: Vec<f64>| {
        for (x, y) in a.iter_mut().zip(&b) {
            *x += y;
        }
        a
    };
    Ok(tree_reduce(0, chunks, &leaf, &combine))
}

/// Unit eigenvector estimate with `lambda_hat = sqrt(max(0, eigenvalue))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigPair {
    pub vector: Vec<f64>,
    pub lambda_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EigDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// `||W v - rho v||` at exit.
    pub residual: f64,
    /// Unclamped Rayleigh quotient `v^T W v`.
    pub rayleigh: f64,
    /// Whether a positive shift was needed to reach the top algebraic
    /// eigenvalue.
    pub shifted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerOptions {
    fn default() -> Self {
        PowerOptions {
            tol: 1e-9,
            max_iter: 1000,
        }
    }
}

/// Flips `v` so that its first coordinate with magnitude above `1e-12` is
/// positive.
pub fn canonical_sign(v: &mut [f64]) {
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
}

fn normalize_or(v: &mut [f64], fallback: &[f64]) -> bool {
    let nrm = norm(v);
    if nrm > 0.0 && nrm.is_finite() {
        for x in v.iter_mut() {
            *x /= nrm;
        }
        true
    } else {
        v.copy_from_slice(fallback);
        false
    }
}

fn unit_start(n: usize, stream: RngStream) -> Vec<f64> {
    let mut v = vec![0.0; n];
    fill_gaussian(&mut stream.rng(), 1.0, &mut v);
    let mut e1 = vec![0.0; n];
    if n > 0 {
        e1[0] = 1.0;
    }
    normalize_or(&mut v, &e1);
    v
}

struct PowerOutcome {
    v: Vec<f64>,
    rho: f64,
    iterations: usize,
    converged: bool,
    residual: f64,
}

fn power_iterate(w: &SymMatrix, shift: f64, start: &[f64], opts: PowerOptions) -> PowerOutcome {
    let n = w.dim();
    let mut v = start.to_vec();
    let mut wv = vec![0.0; n];
    let mut rho = 0.0;
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter.max(1) {
        w.matvec_into(&v, &mut wv);
        rho = dot(&v, &wv);
        residual = wv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - rho * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= opts.tol * (1.0 + rho.abs()) {
            return PowerOutcome {
                v,
                rho,
                iterations: it,
                converged: true,
                residual,
            };
        }
        let prev = v.clone();
        for (x, (a, b)) in v.iter_mut().zip(wv.iter().zip(&prev)) {
            *x = a + shift * b;
        }
        if !normalize_or(&mut v, &prev) {
            break;
        }
    }
    PowerOutcome {
        v,
        rho,
        iterations: opts.max_iter,
        converged: false,
        residual,
    }
}

/// Top (largest algebraic) eigenpair of a symmetric matrix by power
/// iteration from a seeded random start.
///
/// Stops once `||W v - rho v|| <= tol * (1 + |rho|)`. If the dominant
/// eigenvalue by magnitude is negative, the iteration restarts on
/// `W + s I` with `s` the Gershgorin bound on `-lambda_min`. Non-convergence
/// returns the last iterate with `converged = false`.
pub fn top_eig_exact(
    w: &SymMatrix,
    opts: PowerOptions,
    stream: RngStream,
) -> (EigPair, EigDiagnostics) {
    let n = w.dim();
    let start = unit_start(n, stream.with_purpose(Purpose::StartVector));
    let mut out = power_iterate(w, 0.0, &start, opts);
    let mut shifted = false;
    if out.rho < 0.0 {
        let shift = (-w.gershgorin_lower()).max(0.0);
        let second = power_iterate(w, shift, &start, opts);
        out = PowerOutcome {
            iterations: out.iterations + second.iterations,
            ..second
        };
        shifted = true;
    }
    let mut vector = out.v;
    canonical_sign(&mut vector);
    let diag = EigDiagnostics {
        iterations: out.iterations,
        converged: out.converged,
        residual: out.residual,
        rayleigh: out.rho,
        shifted,
    };
    if !out.converged {
        log::debug!(
            "power iteration stopped after {} iterations (residual {:e})",
            out.iterations,
            out.residual
        );
    }
    (
        EigPair {
            vector,
            lambda_hat: out.rho.max(0.0).sqrt(),
        },
        diag,
    )
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in non-increasing order and the matching unit
/// eigenvectors, each sign-normalised with [`canonical_sign`].
pub fn symmetric_eigen(w: &SymMatrix) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = w.dim();
    let mut a = w.data.clone();
    let mut v = SymMatrix::identity(n).data;
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&c| {
            let mut col: Vec<f64> = (0..n).map(|k| v[k * n + c]).collect();
            canonical_sign(&mut col);
            col
        })
        .collect();
    (values, vectors)
}

/// Oja iteration with an explicit noise scale.
///
/// `v_0` is a normalised Gaussian draw; each of `iterations` steps applies
/// `v <- normalize(v + eta (A^T A v + g))` with `eta = 1 / (iterations *
/// sigma * sqrt(n))` and `g ~ N(0, sigma^2 I_n)`. With `sigma = 0` the step
/// is taken in its `eta -> infinity` limit, which is plain power iteration on
/// `A^T A`. The returned eigenvalue estimate is
/// `sqrt(max(0, ||A v||^2 + N(0, sigma^2)))`.
///
/// Working memory is a handful of length-`n` vectors; no `n x n` structure is
/// ever built.
pub fn oja_with_sigma(
    rows: &SparseRows,
    sigma: f64,
    iterations: usize,
    stream: RngStream,
) -> Result<EigPair> {
    let n = rows.n_cols;
    if iterations == 0 {
        return Err(Error::invalid("Oja needs at least one iteration"));
    }
    if n == 0 {
        return Err(Error::invalid("Oja needs at least one column"));
    }
    let mut v = unit_start(n, stream.with_purpose(Purpose::StartVector));
    let eta = 1.0 / (iterations as f64 * sigma * (n as f64).sqrt());
    let mut step_rng = stream.with_purpose(Purpose::OjaStep).rng();
    let mut g = vec![0.0; n];
    let mut prev = vec![0.0; n];
    for _ in 0..iterations {
        let gram_v = sparse_gram_matvec(rows, &v)?;
        prev.copy_from_slice(&v);
        if sigma == 0.0 {
            v.copy_from_slice(&gram_v);
        } else {
            fill_gaussian(&mut step_rng, sigma, &mut g);
            for ((x, a), b) in v.iter_mut().zip(&gram_v).zip(&g) {
                *x += eta * (a + b);
            }
        }
        normalize_or(&mut v, &prev);
    }
    let noise: f64 = if sigma == 0.0 {
        0.0
    } else {
        let z: f64 = stream
            .with_purpose(Purpose::EigenvalueNoise)
            .rng()
            .sample(rand_distr::StandardNormal);
        sigma * z
    };
    let lambda_sq = rows.quadratic_form(&v) + noise;
    canonical_sign(&mut v);
    Ok(EigPair {
        vector: v,
        lambda_hat: lambda_sq.max(0.0).sqrt(),
    })
}

/// Private top eigenvector of `A^T A` with
/// `sigma = noise_scale(Oja, L, iterations, params)`.
pub fn private_oja(
    rows: &SparseRows,
    row_bound: f64,
    params: &PrivacyParams,
    iterations: usize,
    stream: RngStream,
) -> Result<EigPair> {
    let sigma = noise_scale(Mechanism::Oja, row_bound, iterations, params)?.sigma;
    oja_with_sigma(rows, sigma, iterations, stream)
}
