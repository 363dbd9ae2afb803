//! Double-regularized heterogeneous multi-source transfer Gaussian processes.
//!
//! The library models a data-scarce target function by borrowing strength from
//! several source datasets whose input spaces may differ from the target's in
//! dimension and meaning. Each target input is aligned into every source input
//! space by a trainable probabilistic mapping; a joint Gaussian process over
//! all outputs then transfers information through learned cross-covariances.
//! Two regularizers shape the fit: a physical-insight pull of the alignment
//! means toward reference mappings (PhyR) and an L1 penalty on the transfer
//! coefficients that switches off unhelpful sources (SSR).
//!
//! Module map:
//! - [`kernels`]: squared-exponential ARD kernel, matrices, analytic grads
//! - [`dataio`]: datasets, standardization, Latin hypercube sampling, CSV
//! - [`tape`]: small reverse-mode gradient engine over dense matrices
//! - [`alignnet`]: prior/recognition alignment networks, KL, reference maps
//! - [`gpcore`]: joint covariance assembly, likelihood, predictive posterior
//! - [`objective`]: training objective assembly and diagnostics
//! - [`optim`]: flat parameter layout, Adam with L1 proximal step, training
//! - [`baselines`]: target-only GP and input-mapping-calibration baselines
//! - [`bench`]: simulation cases, metrics, repetition harness

pub mod alignnet;
pub mod baselines;
pub mod bench;
pub mod dataio;
pub mod error;
pub mod gpcore;
pub mod kernels;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod tape;

pub use error::{Error, Result};
