mod common;

use common::*;
use dpmc::baselines::{
    run_private_pgd, run_private_svd, top_r_subspace, PgdConfig, StepRule, SvdConfig,
};
use dpmc::data::{ObservedMatrix, Rating};
use dpmc::eval::{empirical_risk, test_rmse, train_model, Algorithm, ModelSettings};
use dpmc::linalg::{covariance_accumulate, top_eig_exact, PowerOptions, SymMatrix};
use dpmc::privacy::{symmetric_noise_matrix, AlgoTag, PrivacyParams, Purpose, RngStream};
use nalgebra::DMatrix;
use rand::Rng;

fn params() -> PrivacyParams {
    PrivacyParams::new(1.0, 1e-6).unwrap()
}

fn random_sym(rng: &mut impl Rng, n: usize) -> SymMatrix {
    let mut w = SymMatrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            w.set_sym(i, j, rng.random_range(-1.0..1.0));
        }
    }
    w
}

#[test]
fn private_svd_matches_dense_reference_with_noise() {
    for s in 0..10u64 {
        let mut rng = rng(s);
        let (m, n, rank) = (30, 12, 1 + s as usize % 3);
        let inst = Instance {
            truth: low_rank(&mut rng, m, n, 3),
            mask: random_mask(&mut rng, m, n, 0.6),
        };
        let obs = inst.observed(f64::INFINITY);
        let mut cfg = SvdConfig::new(rank, 1e300);
        cfg.sigma_override = Some(0.05);
        let out = run_private_svd(&obs, &cfg, &params(), s).unwrap();
        let noise = symmetric_noise_matrix(
            n,
            0.05,
            RngStream::new(s, AlgoTag::Svd, 0, Purpose::CovarianceNoise),
        );
        let reference = dense_private_svd(&inst, rank, Some(&sym_to_dense(&noise)));
        let got = factored_dense(&out.model);
        let err = (&got - &reference).abs().max();
        assert!(
            err <= 1e-10 * (1.0 + reference.abs().max()),
            "seed {s}: {err:e}"
        );
    }
}

#[test]
fn noiseless_pgd_matches_dense_reference() {
    for s in 0..6u64 {
        let mut rng = rng(100 + s);
        let (m, n) = (25, 10);
        let inst = Instance {
            truth: low_rank(&mut rng, m, n, 2),
            mask: random_mask(&mut rng, m, n, 0.5),
        };
        let k = 0.6 * nuclear_norm(&inst.truth);
        let rule: StepRule = "inv_sqrt".parse().unwrap();
        for t in [1usize, 3, 8] {
            let mut cfg = PgdConfig::new(k, t, &rule, 1.0);
            cfg.sigma_override = Some(0.0);
            let out = run_private_pgd(&inst.observed(1.0), &cfg, &params(), s).unwrap();
            let reference = dense_pgd(&inst, k, &cfg.steps).pop().unwrap();
            let got = DMatrix::from_row_slice(m, n, &out.model.values);
            let err = (&got - &reference).abs().max();
            assert!(err <= 1e-8, "seed {s} T={t}: {err:e}");
        }
    }
}

#[test]
fn subspace_projector_matches_eigen_oracle() {
    for s in 0..20u64 {
        let mut rng = rng(200 + s);
        let w = random_sym(&mut rng, 8);
        let r = 1 + s as usize % 4;
        let (vals, vecs) = sorted_eigen(&sym_to_dense(&w));
        if vals[r - 1] - vals[r] < 1e-3 {
            continue;
        }
        let stream = RngStream::new(s, AlgoTag::Test, 0, Purpose::StartVector);
        let (basis, diag) = top_r_subspace(&w, r, stream).unwrap();
        assert!(diag.converged);
        let proj = |vs: &[Vec<f64>]| {
            vs.iter().fold(DMatrix::zeros(8, 8), |acc, v| {
                let c = DMatrix::from_column_slice(8, 1, v);
                acc + &c * c.transpose()
            })
        };
        let err = (proj(&basis) - proj(&vecs[..r])).abs().max();
        assert!(err <= 1e-8, "seed {s} r={r}: {err:e}");
    }
}

#[test]
fn top_eigenpair_matches_eigen_oracle() {
    for s in 0..30u64 {
        let mut rng = rng(300 + s);
        let n = rng.random_range(2..=15);
        let w = random_sym(&mut rng, n);
        let (vals, vecs) = sorted_eigen(&sym_to_dense(&w));
        if vals[0] - vals[1] < 1e-2 {
            continue;
        }
        let opts = PowerOptions {
            tol: 1e-12,
            max_iter: 100_000,
        };
        let stream = RngStream::new(s, AlgoTag::Test, 0, Purpose::StartVector);
        let (pair, diag) = top_eig_exact(&w, opts, stream);
        assert!(diag.converged);
        // The reported value is the square root of the clipped eigenvalue.
        assert!((pair.lambda_hat - vals[0].max(0.0).sqrt()).abs() <= 1e-8);
        let dot: f64 = pair.vector.iter().zip(&vecs[0]).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() <= 1e-8, "seed {s}: {dot}");
    }
}

#[test]
fn covariance_matches_dense_gram() {
    let mut rng = rng(400);
    let inst = Instance {
        truth: low_rank(&mut rng, 40, 9, 3),
        mask: random_mask(&mut rng, 40, 9, 0.4),
    };
    let obs = inst.observed(f64::INFINITY);
    let p = inst.masked(&inst.truth);
    let dense = p.transpose() * &p;
    let got = sym_to_dense(&covariance_accumulate(&obs.rows));
    assert!((got - dense).abs().max() <= 1e-12);
}

#[test]
fn empirical_risk_matches_double_loop() {
    for s in 0..10u64 {
        let mut rng = rng(500 + s);
        let inst = Instance {
            truth: low_rank(&mut rng, 20, 7, 2),
            mask: random_mask(&mut rng, 20, 7, 0.5),
        };
        let obs = inst.observed(1e6);
        let model = train_model(
            Algorithm::FwNonprivate,
            &obs,
            &ModelSettings::default(),
            1.0,
            1e-6,
            s,
        )
        .unwrap();
        let dense = {
            let mut y = DMatrix::zeros(20, 7);
            for i in 0..20 {
                for j in 0..7 {
                    y[(i, j)] = model.predictor().centered(i, j);
                }
            }
            y
        };
        let got = empirical_risk(model.predictor(), &obs).unwrap();
        assert!((got - inst.risk(&dense)).abs() <= 1e-12 * (1.0 + got));
    }
}

#[test]
fn zero_baseline_rmse_is_spread_around_user_means() {
    let obs = ObservedMatrix {
        rows: dpmc::linalg::SparseRows::new(
            2,
            vec![
                dpmc::linalg::SparseRow::new(vec![0], vec![0.5]).unwrap(),
                dpmc::linalg::SparseRow::new(vec![1], vec![-0.5]).unwrap(),
            ],
        )
        .unwrap(),
        means: vec![3.0, 4.0],
        row_bound: 2.0,
        rating_lo: 1.0,
        rating_hi: 5.0,
    };
    let model = train_model(
        Algorithm::ZeroBaseline,
        &obs,
        &ModelSettings::default(),
        1.0,
        1e-6,
        0,
    )
    .unwrap();
    let test = [
        Rating {
            user: 0,
            item: 1,
            value: 5.0,
        },
        Rating {
            user: 1,
            item: 0,
            value: 3.0,
        },
        Rating {
            user: 1,
            item: 1,
            value: 4.0,
        },
    ];
    let expected = ((4.0 + 1.0 + 0.0) / 3.0f64).sqrt();
    let got = test_rmse(model.predictor(), &test, true).unwrap();
    assert!((got - expected).abs() <= 1e-15);
    assert!((empirical_risk(model.predictor(), &obs).unwrap() - 0.125).abs() <= 1e-15);
}
