//! Privacy parameters, Gaussian noise calibration and seeded noise streams.
//!
//! Every mechanism in this crate releases a covariance-like statistic whose
//! per-user contribution is bounded through the row bound `L`. The noise
//! standard deviation is a closed form in `(L, rounds, epsilon, delta)`, one
//! per mechanism:
//!
//! | mechanism | sigma |
//! |-----------|-------|
//! | `Fw`, `Pgd` | `L^2 * sqrt(64 * T * ln(1/delta)) / epsilon` |
//! | `Oja` | `L^2 * sqrt(256 * rounds * ln(2/delta)) / epsilon` |
//! | `Svd` | `L^2 * sqrt(64 * ln(1/delta)) / epsilon` |
//!
//! The Oja constant (256, `ln(2/delta)`) differs from the Frank-Wolfe one
//! (64, `ln(1/delta)`). Both are implemented as stated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;

/// Relative slack on the `epsilon <= 2 ln(1/delta)` gate so that the exact
/// boundary survives rounding in `ln`.
const BOUNDARY_SLACK: f64 = 1e-12;

/// Validated `(epsilon, delta)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    epsilon: f64,
    delta: f64,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::NonPositiveEpsilon(epsilon));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::DeltaOutOfRange(delta));
        }
        let bound = 2.0 * (1.0 / delta).ln();
        if epsilon > bound * (1.0 + BOUNDARY_SLACK) {
            return Err(Error::EpsilonTooLarge {
                epsilon,
                delta,
                bound,
            });
        }
        Ok(PrivacyParams { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Shorthand for [`PrivacyParams::new`].
pub fn validate_params(epsilon: f64, delta: f64) -> Result<PrivacyParams> {
    PrivacyParams::new(epsilon, delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Fw,
    Oja,
    Svd,
    Pgd,
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fw" => Ok(Mechanism::Fw),
            "oja" => Ok(Mechanism::Oja),
            "svd" => Ok(Mechanism::Svd),
            "pgd" => Ok(Mechanism::Pgd),
            other => Err(Error::invalid(format!("unknown mechanism '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseScale {
    pub sigma: f64,
    pub mechanism: Mechanism,
    /// Number of releases covered; always 1 for `Svd`.
    pub rounds: usize,
}

/// Gaussian noise scale for `mechanism` with row bound `row_bound`.
///
/// `rounds` is `T` for Frank-Wolfe and PGD, `Gamma` for Oja, and ignored for
/// the single-release SVD mechanism.
pub fn noise_scale(
    mechanism: Mechanism,
    row_bound: f64,
    rounds: usize,
    params: &PrivacyParams,
) -> Result<NoiseScale> {
    noise_scale_ungated(mechanism, row_bound, rounds, params.epsilon, params.delta)
}

/// The same closed forms without the `epsilon <= 2 ln(1/delta)` gate.
///
/// Only `epsilon > 0` and `delta` in `(0, 1)` are checked. When the gate
/// fails the returned sigma carries no privacy guarantee.
pub fn noise_scale_ungated(
    mechanism: Mechanism,
    row_bound: f64,
    rounds: usize,
    eps: f64,
    delta: f64,
) -> Result<NoiseScale> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::NonPositiveEpsilon(eps));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::DeltaOutOfRange(delta));
    }
    if !(row_bound > 0.0) || !row_bound.is_finite() {
        return Err(Error::invalid(format!(
            "row bound must be positive and finite, got {row_bound}"
        )));
    }
    if rounds == 0 && mechanism != Mechanism::Svd {
        return Err(Error::invalid("rounds must be at least 1"));
    }
    let l2 = row_bound * row_bound;
    let (sigma, rounds) = match mechanism {
        Mechanism::Fw | Mechanism::Pgd => (
            l2 * (64.0 * rounds as f64 * (1.0 / delta).ln()).sqrt() / eps,
            rounds,
        ),
        Mechanism::Oja => (
            l2 * (256.0 * rounds as f64 * (2.0 / delta).ln()).sqrt() / eps,
            rounds,
        ),
        Mechanism::Svd => (l2 * (64.0 * (1.0 / delta).ln()).sqrt() / eps, 1),
    };
    Ok(NoiseScale {
        sigma,
        mechanism,
        rounds,
    })
}

/// How the per-release noise scale varies across iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// The same sigma for every release.
    #[default]
    Uniform,
    /// Release `t` of `T` (1-based) uses `sigma * sqrt((T + 1) / (2 t))`.
    ///
    /// The sum of `1 / sigma_t^2` over all releases equals `T / sigma^2`, so
    /// under Gaussian-mechanism composition the total privacy cost matches the
    /// uniform schedule while later iterations see less noise.
    Recalibrated,
}

impl NoiseSchedule {
    /// Sigma for release `t` (1-based) out of `total`.
    pub fn sigma_at(self, base_sigma: f64, t: usize, total: usize) -> f64 {
        match self {
            NoiseSchedule::Uniform => base_sigma,
            NoiseSchedule::Recalibrated => {
                let t = t.max(1) as f64;
                base_sigma * ((total as f64 + 1.0) / (2.0 * t)).sqrt()
            }
        }
    }
}

impl std::str::FromStr for NoiseSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(NoiseSchedule::Uniform),
            "recalibrated" => Ok(NoiseSchedule::Recalibrated),
            other => Err(Error::invalid(format!("unknown noise schedule '{other}'"))),
        }
    }
}

/// Algorithm tag of an [`RngStream`] label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum AlgoTag {
    Data = 0,
    Fw = 1,
    Oja = 2,
    Svd = 3,
    Pgd = 4,
    Eigen = 5,
    Test = 15,
}

/// Purpose tag of an [`RngStream`] label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Subsample = 0,
    Split = 1,
    Synthetic = 2,
    CovarianceNoise = 3,
    StartVector = 4,
    OjaStep = 5,
    EigenvalueNoise = 6,
    Generic = 7,
}

/// A labelled, reproducible random stream.
///
/// The label packs into a ChaCha20 stream id as
/// `algo << 56 | purpose << 48 | iteration` (iteration truncated to 48 bits),
/// so distinct labels under one master seed never share keystream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub algo: AlgoTag,
    pub iteration: u64,
    pub purpose: Purpose,
}

impl RngStream {
    pub fn new(seed: u64, algo: AlgoTag, iteration: u64, purpose: Purpose) -> Self {
        RngStream {
            seed,
            algo,
            iteration,
            purpose,
        }
    }

    pub fn stream_id(&self) -> u64 {
        ((self.algo as u64) << 56)
            | ((self.purpose as u64) << 48)
            | (self.iteration & ((1u64 << 48) - 1))
    }

    pub fn with_iteration(self, iteration: u64) -> Self {
        RngStream { iteration, ..self }
    }

    pub fn with_purpose(self, purpose: Purpose) -> Self {
        RngStream { purpose, ..self }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id());
        rng
    }
}

/// Fills `out` with i.i.d. `N(0, sigma^2)` draws.
pub fn fill_gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64, out: &mut [f64]) {
    if sigma == 0.0 {
        out.fill(0.0);
        return;
    }
    for x in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x = sigma * z;
    }
}

pub fn gaussian_vector(len: usize, sigma: f64, stream: RngStream) -> Vec<f64> {
    let mut out = vec![0.0; len];
    fill_gaussian(&mut stream.rng(), sigma, &mut out);
    out
}

/// Symmetric `n x n` noise: the upper triangle (diagonal included) is drawn
/// row by row and mirrored.
pub fn symmetric_noise_matrix(n: usize, sigma: f64, stream: RngStream) -> SymMatrix {
    let mut m = SymMatrix::zeros(n);
    if sigma == 0.0 {
        return m;
    }
    let mut rng = stream.rng();
    for i in 0..n {
        for j in i..n {
            let z: f64 = rng.sample(StandardNormal);
            m.set_sym(i, j, sigma * z);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_experimental_pairs() {
        for eps in [0.1, 0.5, 1.0, 2.0, 5.0] {
            assert!(validate_params(eps, 1e-6).is_ok());
        }
    }

    #[test]
    fn boundary_is_accepted() {
        let delta = (-16.0f64).exp();
        assert!(validate_params(32.0, delta).is_ok());
    }

    #[test]
    fn each_violation_has_its_own_error() {
        assert!(matches!(
            validate_params(0.0, 1e-6),
            Err(Error::NonPositiveEpsilon(_))
        ));
        assert!(matches!(
            validate_params(1.0, 1.0),
            Err(Error::DeltaOutOfRange(_))
        ));
        assert!(matches!(
            validate_params(1.0, 0.0),
            Err(Error::DeltaOutOfRange(_))
        ));
        assert!(matches!(
            validate_params(10.0, 0.5),
            Err(Error::EpsilonTooLarge { .. })
        ));
    }

    #[test]
    fn unit_sigma_examples() {
        let p = validate_params(32.0, (-16.0f64).exp()).unwrap();
        let s = noise_scale(Mechanism::Fw, 1.0, 1, &p).unwrap();
        assert!((s.sigma - 1.0).abs() < 1e-12);

        // ln(2 / delta) = 4, which fails the epsilon gate
        let delta = 2.0 * (-4.0f64).exp();
        assert!(validate_params(32.0, delta).is_err());
        let s = noise_scale_ungated(Mechanism::Oja, 1.0, 1, 32.0, delta).unwrap();
        assert!((s.sigma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_epsilon_halves_sigma() {
        let a = noise_scale(Mechanism::Fw, 2.0, 7, &validate_params(0.5, 1e-6).unwrap()).unwrap();
        let b = noise_scale(Mechanism::Fw, 2.0, 7, &validate_params(1.0, 1e-6).unwrap()).unwrap();
        assert!((a.sigma - 2.0 * b.sigma).abs() <= 1e-12 * a.sigma);
    }

    #[test]
    fn svd_ignores_rounds() {
        let p = validate_params(1.0, 1e-6).unwrap();
        let a = noise_scale(Mechanism::Svd, 1.0, 0, &p).unwrap();
        let b = noise_scale(Mechanism::Svd, 1.0, 50, &p).unwrap();
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(a.rounds, 1);
    }

    #[test]
    fn rejects_bad_preconditions() {
        let p = validate_params(1.0, 1e-6).unwrap();
        assert!(noise_scale(Mechanism::Fw, 0.0, 1, &p).is_err());
        assert!(noise_scale(Mechanism::Oja, 1.0, 0, &p).is_err());
    }

    #[test]
    fn recalibrated_schedule_preserves_total_precision() {
        let total = 12;
        let sigma = 3.0;
        let precision: f64 = (1..=total)
            .map(|t| {
                NoiseSchedule::Recalibrated
                    .sigma_at(sigma, t, total)
                    .powi(-2)
            })
            .sum();
        assert!((precision - total as f64 / (sigma * sigma)).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_gives_zeros() {
        let s = RngStream::new(1, AlgoTag::Test, 0, Purpose::Generic);
        assert!(gaussian_vector(16, 0.0, s).iter().all(|&x| x == 0.0));
        let m = symmetric_noise_matrix(4, 0.0, s);
        assert!(m.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn same_label_same_samples() {
        let s = RngStream::new(42, AlgoTag::Fw, 3, Purpose::CovarianceNoise);
        let a = gaussian_vector(100, 1.5, s);
        let b = gaussian_vector(100, 1.5, s);
        assert_eq!(a, b);
        let c = gaussian_vector(100, 1.5, s.with_iteration(4));
        assert_ne!(a, c);
    }

    #[test]
    fn noise_matrix_is_exactly_symmetric() {
        let s = RngStream::new(9, AlgoTag::Test, 0, Purpose::CovarianceNoise);
        let m = symmetric_noise_matrix(7, 2.0, s);
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(m.get(i, j).to_bits(), m.get(j, i).to_bits());
            }
        }
        let one = symmetric_noise_matrix(1, 1.0, s);
        assert_ne!(one.get(0, 0), 0.0);
    }

    #[test]
    fn stream_ids_are_injective_on_fields() {
        let base = RngStream::new(0, AlgoTag::Fw, 5, Purpose::CovarianceNoise);
        assert_ne!(
            base.stream_id(),
            base.with_purpose(Purpose::StartVector).stream_id()
        );
        assert_ne!(base.stream_id(), base.with_iteration(6).stream_id());
        let other = RngStream {
            algo: AlgoTag::Pgd,
            ..base
        };
        assert_ne!(base.stream_id(), other.stream_id());
    }
}
