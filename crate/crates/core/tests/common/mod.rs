//! Shared test helpers: random instances and dense reference implementations
//! built on nalgebra.

#![allow(dead_code)]

use dpmc::data::ObservedMatrix;
use dpmc::linalg::{SparseRow, SparseRows, SymMatrix};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense `m x n` matrix with a boolean mask.
#[derive(Debug, Clone)]
pub struct Instance {
    pub truth: DMatrix<f64>,
    pub mask: Vec<Vec<bool>>,
}

impl Instance {
    pub fn m(&self) -> usize {
        self.truth.nrows()
    }

    pub fn n(&self) -> usize {
        self.truth.ncols()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().flatten().filter(|&&b| b).count()
    }

    /// Uncentred observed matrix with the given row bound; rows must already
    /// satisfy it.
    pub fn observed(&self, row_bound: f64) -> ObservedMatrix {
        let rows = (0..self.m())
            .map(|i| {
                let cols: Vec<usize> = (0..self.n()).filter(|&j| self.mask[i][j]).collect();
                let vals = cols.iter().map(|&j| self.truth[(i, j)]).collect();
                SparseRow::new(cols, vals).unwrap()
            })
            .collect();
        ObservedMatrix {
            rows: SparseRows::new(self.n(), rows).unwrap(),
            means: vec![0.0; self.m()],
            row_bound,
            rating_lo: -1e6,
            rating_hi: 1e6,
        }
    }

    /// Scales each row so that its observed part has norm at most `bound`.
    pub fn clip_rows(&mut self, bound: f64) {
        for i in 0..self.m() {
            let nrm: f64 = (0..self.n())
                .filter(|&j| self.mask[i][j])
                .map(|j| self.truth[(i, j)].powi(2))
                .sum::<f64>()
                .sqrt();
            if nrm > bound {
                for j in 0..self.n() {
                    self.truth[(i, j)] *= bound / nrm;
                }
            }
        }
    }

    pub fn masked(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.m(), self.n(), |i, j| {
            if self.mask[i][j] {
                y[(i, j)]
            } else {
                0.0
            }
        })
    }

    /// `(1 / 2|Omega|) ||P_Omega(Y - Y*)||_F^2` by a plain double loop.
    pub fn risk(&self, y: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for i in 0..self.m() {
            for j in 0..self.n() {
                if self.mask[i][j] {
                    total += (y[(i, j)] - self.truth[(i, j)]).powi(2);
                }
            }
        }
        total / (2.0 * self.observed_count() as f64)
    }
}

/// Random rank-`r` matrix `U V^T` with Gaussian-ish factors.
pub fn low_rank(rng: &mut impl Rng, m: usize, n: usize, r: usize) -> DMatrix<f64> {
    let u = DMatrix::from_fn(m, r, |_, _| rng.random_range(-1.0..1.0));
    let v = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
    u * v.transpose()
}

pub fn random_mask(rng: &mut impl Rng, m: usize, n: usize, p: f64) -> Vec<Vec<bool>> {
    (0..m)
        .map(|_| (0..n).map(|_| rng.random_bool(p)).collect())
        .collect()
}

pub fn full_mask(m: usize, n: usize) -> Vec<Vec<bool>> {
    vec![vec![true; n]; m]
}

pub fn nuclear_norm(y: &DMatrix<f64>) -> f64 {
    y.clone().svd(false, false).singular_values.sum()
}

pub fn sym_to_dense(w: &SymMatrix) -> DMatrix<f64> {
    let n = w.dim();
    DMatrix::from_fn(n, n, |i, j| w.get(i, j))
}

pub fn factored_dense(model: &dpmc::fw::FactoredModel) -> DMatrix<f64> {
    let rows = model.to_dense();
    DMatrix::from_fn(rows.len(), model.num_items, |i, j| rows[i][j])
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue, signs
/// fixed so the first coordinate above `1e-12` in magnitude is positive.
pub fn sorted_eigen(w: &DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let eig = w.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..w.nrows()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = idx
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
            }
            v
        })
        .collect();
    (vals, vecs)
}

/// Dense private Frank-Wolfe: every round forms `A = P_Omega(Y - Y*)`, adds
/// the taped noise to `A^T A`, takes the top eigenpair, steps, and rescales
/// rows whose observed part leaves the `L` ball.
pub fn dense_private_fw(
    inst: &Instance,
    k: f64,
    iterations: usize,
    row_bound: f64,
    sigma: f64,
    beta: f64,
    tape: &[SymMatrix],
) -> DMatrix<f64> {
    let (m, n) = (inst.m(), inst.n());
    let mut y = DMatrix::zeros(m, n);
    let mut taped = tape.iter();
    for _ in 0..iterations {
        let a = inst.masked(&(&y - &inst.truth));
        let mut w = a.transpose() * &a;
        if sigma > 0.0 {
            w += sym_to_dense(taped.next().expect("tape too short"));
        }
        let (vals, vecs) = sorted_eigen(&w);
        let lambda_hat = vals[0].max(0.0).sqrt();
        let lambda_p = lambda_hat + (sigma * (n as f64 / beta).ln()).sqrt() * (n as f64).powf(0.25);
        let v = DMatrix::from_column_slice(n, 1, &vecs[0]);
        let u_hat = (&a * &v) / lambda_p;
        let tf = iterations as f64;
        y = y * (1.0 - 1.0 / tf) - (u_hat * v.transpose()) * (k / tf);
        for i in 0..m {
            let nrm: f64 = (0..n)
                .filter(|&j| inst.mask[i][j])
                .map(|j| y[(i, j)].powi(2))
                .sum::<f64>()
                .sqrt();
            if nrm > row_bound {
                let s = row_bound / nrm;
                for j in 0..n {
                    y[(i, j)] *= s;
                }
            }
        }
    }
    y
}

/// Dense private SVD completion with a given noise matrix.
pub fn dense_private_svd(
    inst: &Instance,
    rank: usize,
    noise: Option<&DMatrix<f64>>,
) -> DMatrix<f64> {
    let p = inst.masked(&inst.truth);
    let mut w = p.transpose() * &p;
    if let Some(nz) = noise {
        w += nz;
    }
    let (_, vecs) = sorted_eigen(&w);
    let n = inst.n();
    let v = DMatrix::from_fn(n, rank, |i, c| vecs[c][i]);
    let scale = (inst.m() * n) as f64 / inst.observed_count() as f64;
    (p * &v * v.transpose()) * scale
}

/// Dense noiseless PGD: descent step on the observed entries, then projection
/// of the singular values onto the `l1` ball of radius `k`.
pub fn dense_pgd(inst: &Instance, k: f64, steps: &[f64]) -> Vec<DMatrix<f64>> {
    let mut y = DMatrix::zeros(inst.m(), inst.n());
    let mut iterates = Vec::new();
    for &eta in steps {
        y = &y - inst.masked(&(&y - &inst.truth)) * eta;
        let svd = y.clone().svd(true, true);
        let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        let z = water_fill_bisect(&sv, k);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut next = DMatrix::zeros(inst.m(), inst.n());
        for (c, zc) in z.iter().enumerate() {
            if *zc > 0.0 {
                next += (u.column(c) * vt.row(c)) * *zc;
            }
        }
        y = next;
        iterates.push(y.clone());
    }
    iterates
}

/// Water-filling by bisection on `tau`; independent of the sort-based
/// implementation under test.
pub fn water_fill_bisect(spectrum: &[f64], k: f64) -> Vec<f64> {
    let total: f64 = spectrum.iter().sum();
    if total <= k {
        return spectrum.to_vec();
    }
    let mass = |tau: f64| spectrum.iter().map(|s| (s - tau).max(0.0)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, spectrum.iter().fold(0.0f64, |a, b| a.max(*b)));
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    spectrum.iter().map(|s| (s - tau).max(0.0)).collect()
}
