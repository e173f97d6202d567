//! Matrix completion under joint differential privacy.
//!
//! Each user holds one row of a ratings matrix. [`fw::run_private_fw`] fits a
//! low nuclear-norm completion. The server only sees Gaussian-perturbed
//! covariances of residual rows, and every user's predictions are computed
//! locally from public broadcasts plus that user's own row. [`baselines`]
//! holds a private SVD and private projected gradient descent for
//! comparison. [`eval`] runs seeded experiment sweeps over all of them.
//!
//! ```
//! use dpmc::privacy::{noise_scale, Mechanism, PrivacyParams};
//!
//! let params = PrivacyParams::new(1.0, 1e-6).unwrap();
//! let sigma = noise_scale(Mechanism::Fw, 1.0, 10, &params).unwrap().sigma;
//! assert!(sigma > 0.0);
//! ```

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod fw;
pub mod linalg;
pub mod privacy;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/privacy.md")]
    mod privacy {}
    #[doc = include_str!("../../../book/src/frank-wolfe.md")]
    mod frank_wolfe {}
    #[doc = include_str!("../../../book/src/oja.md")]
    mod oja {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
