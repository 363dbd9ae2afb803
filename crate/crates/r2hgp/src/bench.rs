//! Synthetic benchmark problems, prediction metrics, and the repetition
//! harness.
//!
//! Three simulation cases cover the transfer regimes the library targets:
//! partially observed target inputs with lower-dimensional sources (case 1),
//! disjoint one- and two-dimensional source inputs with one misleading source
//! (case 2), and a target parameterized in spherical coordinates transferred
//! from Cartesian sources (case 3). The harness regenerates data per
//! repetition from derived seeds, trains each requested method, scores
//! root-mean-squared error, the coefficient of determination, and the joint
//! mean negative log-likelihood on a fixed test grid, and aggregates results
//! into a serializable report.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignnet::ReferenceMapSpec;
use crate::baselines::{imc_fit, imc_predict, tgp_fit, tgp_predict};
use crate::dataio::{lhs_sample, Dataset, DomainId, TransferData};
use crate::gpcore::PredictiveDistribution;
use crate::objective::ObjectiveConfig;
use crate::optim::{train, TrainConfig};
use crate::rng::stream;
use crate::tape::cholesky_with_jitter;
use crate::{Error, Result};

/// Identifier of one of the built-in simulation cases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseId {
    Case1,
    Case2,
    Case3,
}

impl CaseId {
    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            1 => Ok(CaseId::Case1),
            2 => Ok(CaseId::Case2),
            3 => Ok(CaseId::Case3),
            _ => Err(Error::invalid_argument(format!("unknown case id {i}"))),
        }
    }

    pub fn index(self) -> usize {
        match self {
            CaseId::Case1 => 1,
            CaseId::Case2 => 2,
            CaseId::Case3 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CaseId::Case1 => "case1",
            CaseId::Case2 => "case2",
            CaseId::Case3 => "case3",
        }
    }

    /// Number of sources in the case.
    pub fn n_sources(self) -> usize {
        match self {
            CaseId::Case1 | CaseId::Case2 => 3,
            CaseId::Case3 => 2,
        }
    }

    /// Full target input domain (the test grid spans this box).
    pub fn target_domain(self) -> Vec<(f64, f64)> {
        match self {
            CaseId::Case1 => vec![(0.0, 2.0); 4],
            CaseId::Case2 => vec![(0.0, 5.0); 2],
            CaseId::Case3 => {
                vec![(0.0, 1.0), (0.0, std::f64::consts::FRAC_PI_2), (0.0, std::f64::consts::FRAC_PI_2)]
            }
        }
    }

    /// Input domain of each source.
    pub fn source_domains(self) -> Vec<Vec<(f64, f64)>> {
        match self {
            CaseId::Case1 => vec![
                vec![(0.0, 2.0); 2],
                vec![(0.0, 2.0); 2],
                vec![(0.0, 2.0); 3],
            ],
            CaseId::Case2 => vec![
                vec![(0.0, 5.0)],
                vec![(0.0, 5.0)],
                vec![(0.0, 5.0); 2],
            ],
            CaseId::Case3 => vec![vec![(0.0, 1.0); 2], vec![(0.0, 1.0); 2]],
        }
    }

    /// Index of the source the single-source baseline transfers from.
    pub fn single_source_index(self) -> usize {
        match self {
            CaseId::Case1 => 2,
            CaseId::Case2 | CaseId::Case3 => 0,
        }
    }
}

/// Target function of a case, evaluated at one raw input point.
pub fn eval_case_target(case: CaseId, x: &[f64]) -> f64 {
    match case {
        CaseId::Case1 => case1_target(x[0], x[1], x[2], x[3]),
        CaseId::Case2 => 0.2 * (x[0] - 3.0).powi(3) + 0.15 * x[1] * x[1] + (2.0 * x[1]).sin(),
        CaseId::Case3 => {
            let (r, theta, phi) = (x[0], x[1], x[2]);
            let half_pi = std::f64::consts::FRAC_PI_2;
            3.5 * (r * (half_pi * phi).cos())
                + 2.2 * (r * (half_pi * theta).sin())
                + 0.85 * (r * (half_pi * theta).cos() - 2.0 * r * (half_pi * theta).sin()).abs().powf(2.2)
                + 2.0 * (std::f64::consts::PI * phi).cos() / (1.0 + 3.0 * r * r + 10.0 * theta * theta)
        }
    }
}

/// Source function `j` of a case, evaluated at one raw source input point.
pub fn eval_case_source(case: CaseId, j: usize, x: &[f64]) -> f64 {
    match (case, j) {
        (CaseId::Case1, 0) => x[0] * x[0] + x[1].cos(),
        (CaseId::Case1, 1) => {
            (1.0 + 0.1 * x[0].sin()) * case1_target(x[0], x[1], 0.5, 0.5) - 2.0 * x[0]
                + x[1] * x[1]
                + 0.75
        }
        (CaseId::Case1, 2) => {
            x[0] / 2.0 * ((1.0 + x[1] + x[2] * x[2]).sqrt() - 1.0)
                + x[0] * (1.0 + x[2].sin()).exp()
        }
        (CaseId::Case2, 0) => 0.3 * (x[0] - 3.0).powi(3),
        (CaseId::Case2, 1) => 0.3 * x[0] * x[0] + 2.0 * (2.0 * x[0]).sin(),
        (CaseId::Case2, 2) => 1.0 - (x[0] + x[1] - 4.0).powi(2),
        (CaseId::Case3, 0) => {
            3.0 * x[0] + 2.0 * x[1] + 0.7 * (x[0] - 1.7 * x[1]).abs().powf(2.35)
        }
        (CaseId::Case3, 1) => {
            (5.0 * std::f64::consts::PI * x[0]).sin() * (-x[1]).exp() + 0.3 * x[0] * x[0]
                - 0.4 * x[1].powi(3)
        }
        _ => panic!("case {case:?} has no source {j}"),
    }
}

/// First component of the case-1 target. The square-root factor has a
/// removable singularity at x₁ = 0 with limit √((x₂+x₃²)·x₄) / 2.
fn case1_target(x1: f64, x2: f64, x3: f64, x4: f64) -> f64 {
    let c = (x2 + x3 * x3) * x4;
    let root = if x1 > 0.0 {
        x1 / 2.0 * ((1.0 + c / (x1 * x1)).sqrt() - 1.0)
    } else {
        c.sqrt() / 2.0
    };
    root + (x1 + 3.0 * x4) * (1.0 + x3.sin()).exp()
}

/// Full description of one simulation problem: sample sizes, observation
/// noise, the (possibly restricted) target training box, and the per-axis
/// test-grid resolution over the full target domain. The canonical
/// constructors pin the published counts; every field may be overridden for
/// reduced-budget runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimCaseSpec {
    pub case: CaseId,
    /// Training-sample count per source.
    pub source_counts: Vec<usize>,
    /// Training-sample count for the target.
    pub target_count: usize,
    /// Standard deviation of i.i.d. Gaussian noise added to every training
    /// observation (sources and target alike).
    pub noise_std: f64,
    /// Box the target training inputs are drawn from (a sub-box of the full
    /// target domain when the setup withholds part of it).
    pub target_train_bounds: Vec<(f64, f64)>,
    /// Number of grid points per target axis; the test grid is the Cartesian
    /// product of uniform subdivisions of the full target domain.
    pub test_grid: Vec<usize>,
    /// Reference-anchoring weight the harness uses for this case unless the
    /// settings override it. Chosen per case by offline cross-validated
    /// calibration, mirroring the per-problem hyperparameter selection of
    /// the published protocol.
    pub lambda: f64,
    /// Sparsity weight, selected the same way.
    pub gamma: f64,
}

impl SimCaseSpec {
    /// The published configuration of a case.
    pub fn canonical(case: CaseId) -> Self {
        match case {
            CaseId::Case1 => SimCaseSpec {
                case,
                source_counts: vec![80, 80, 80],
                target_count: 50,
                noise_std: 0.5,
                target_train_bounds: vec![(0.0, 2.0), (0.0, 2.0), (0.0, 2.0), (0.0, 1.6)],
                test_grid: vec![6, 6, 9, 9],
                lambda: 0.1,
                gamma: 0.01,
            },
            CaseId::Case2 => SimCaseSpec {
                case,
                source_counts: vec![30, 30, 30],
                target_count: 15,
                noise_std: 0.2,
                target_train_bounds: vec![(0.0, 5.0), (0.0, 4.0)],
                test_grid: vec![26, 26],
                lambda: 1.0,
                gamma: 0.5,
            },
            // No observation noise is published for this case; a field
            // override can add some.
            CaseId::Case3 => SimCaseSpec {
                case,
                source_counts: vec![30, 30],
                target_count: 10,
                noise_std: 0.0,
                target_train_bounds: vec![
                    (0.0, 0.8),
                    (0.0, std::f64::consts::FRAC_PI_2),
                    (0.0, std::f64::consts::FRAC_PI_2),
                ],
                test_grid: vec![5, 10, 10],
                lambda: 0.1,
                gamma: 0.1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.case.n_sources();
        if self.source_counts.len() != n {
            return Err(Error::invalid_argument(format!(
                "{} expects {n} source counts, got {}",
                self.case.name(),
                self.source_counts.len()
            )));
        }
        let d_t = self.case.target_domain().len();
        if self.target_train_bounds.len() != d_t || self.test_grid.len() != d_t {
            return Err(Error::invalid_argument(format!(
                "{} target bounds/grid must have {d_t} axes",
                self.case.name()
            )));
        }
        if self.source_counts.iter().any(|&c| c == 0) || self.target_count == 0 {
            return Err(Error::invalid_argument("sample counts must be positive"));
        }
        if self.test_grid.iter().any(|&g| g < 2) {
            return Err(Error::invalid_argument("test grid needs at least 2 points per axis"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid_argument("noise std must be finite and non-negative"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0)
            || !(self.gamma.is_finite() && self.gamma >= 0.0)
        {
            return Err(Error::invalid_argument(
                "regularization weights must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// One generated instance of a simulation case: training data, the noiseless
/// test grid, and the reference-mapping specifications for each source.
#[derive(Clone, Debug)]
pub struct GeneratedCase {
    pub sources: Vec<Dataset>,
    pub target: Dataset,
    pub test_inputs: DMatrix<f64>,
    pub test_outputs: DVector<f64>,
    pub references: Vec<ReferenceMapSpec>,
}

impl GeneratedCase {
    pub fn training_data(&self) -> TransferData {
        TransferData { sources: self.sources.clone(), target: self.target.clone() }
    }
}

/// Cartesian-product grid over `bounds` with `counts[a]` uniform points per
/// axis; the last axis varies fastest.
fn uniform_grid(bounds: &[(f64, f64)], counts: &[usize]) -> DMatrix<f64> {
    let d = bounds.len();
    let total: usize = counts.iter().product();
    let mut m = DMatrix::zeros(total, d);
    for row in 0..total {
        let mut rem = row;
        for a in (0..d).rev() {
            let idx = rem % counts[a];
            rem /= counts[a];
            let (lo, hi) = bounds[a];
            m[(row, a)] = lo + (hi - lo) * idx as f64 / (counts[a] - 1) as f64;
        }
    }
    m
}

/// Generate one repetition of a simulation case.
///
/// Sampling is fully determined by `seed`: source inputs use Latin-hypercube
/// streams ("lhs-inputs", j), the target uses index N, and observation noise
/// uses ("noise", j) per domain, so equal seeds reproduce the data bitwise.
/// Test outputs are the exact target-function values (no noise).
pub fn gen_case(spec: &SimCaseSpec, seed: u64) -> Result<GeneratedCase> {
    spec.validate()?;
    let case = spec.case;
    let n = case.n_sources();
    let source_domains = case.source_domains();

    let mut sources = Vec::with_capacity(n);
    for j in 0..n {
        let inputs = lhs_sample(
            spec.source_counts[j],
            &source_domains[j],
            &mut stream(seed, "lhs-inputs", j as u64),
        )?;
        let outputs = noisy_outputs(
            &inputs,
            |x| eval_case_source(case, j, x),
            spec.noise_std,
            &mut stream(seed, "noise", j as u64),
        );
        sources.push(Dataset::new(inputs, outputs, DomainId::Source(j))?);
    }

    let target_inputs = lhs_sample(
        spec.target_count,
        &spec.target_train_bounds,
        &mut stream(seed, "lhs-inputs", n as u64),
    )?;
    let target_outputs = noisy_outputs(
        &target_inputs,
        |x| eval_case_target(case, x),
        spec.noise_std,
        &mut stream(seed, "noise", n as u64),
    );
    let target = Dataset::new(target_inputs, target_outputs, DomainId::Target)?;

    let test_inputs = uniform_grid(&case.target_domain(), &spec.test_grid);
    let test_outputs = DVector::from_fn(test_inputs.nrows(), |i, _| {
        eval_case_target(case, test_inputs.row(i).transpose().as_slice())
    });

    let references = reference_specs(case, &target.inputs);
    Ok(GeneratedCase { sources, target, test_inputs, test_outputs, references })
}

fn noisy_outputs(
    inputs: &DMatrix<f64>,
    f: impl Fn(&[f64]) -> f64,
    noise_std: f64,
    rng: &mut impl Rng,
) -> DVector<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    DVector::from_fn(inputs.nrows(), |i, _| {
        f(inputs.row(i).transpose().as_slice()) + noise_std * normal.sample(rng)
    })
}

/// Reference-mapping specifications for each source of a case, in raw target
/// coordinates. Sources with a stated structural correspondence get explicit
/// maps; the remaining ones are fitted from data at training time.
fn reference_specs(case: CaseId, target_inputs: &DMatrix<f64>) -> Vec<ReferenceMapSpec> {
    match case {
        CaseId::Case1 => vec![
            ReferenceMapSpec::Subset { indices: vec![0, 1] },
            ReferenceMapSpec::Subset { indices: vec![0, 1] },
            ReferenceMapSpec::Subset { indices: vec![0, 1, 2] },
        ],
        CaseId::Case2 => vec![
            ReferenceMapSpec::Subset { indices: vec![0] },
            ReferenceMapSpec::Subset { indices: vec![1] },
            ReferenceMapSpec::Imc,
        ],
        CaseId::Case3 => {
            let half_pi = std::f64::consts::FRAC_PI_2;
            let values: Vec<Vec<f64>> = (0..target_inputs.nrows())
                .map(|i| {
                    let (r, theta, phi) =
                        (target_inputs[(i, 0)], target_inputs[(i, 1)], target_inputs[(i, 2)]);
                    vec![r * (half_pi * phi).cos(), r * (half_pi * theta).sin()]
                })
                .collect();
            vec![ReferenceMapSpec::Table { values }, ReferenceMapSpec::Imc]
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Root-mean-squared error between predictions and ground truth.
pub fn metric_rmse(preds: &DVector<f64>, truths: &DVector<f64>) -> Result<f64> {
    check_lengths(preds.len(), truths.len())?;
    let n = preds.len() as f64;
    Ok(((preds - truths).norm_squared() / n).sqrt())
}

/// Coefficient of determination: one minus the squared-error sum over the
/// centered-truth squared sum.
pub fn metric_r2(preds: &DVector<f64>, truths: &DVector<f64>) -> Result<f64> {
    check_lengths(preds.len(), truths.len())?;
    let mean = truths.mean();
    let denom: f64 = truths.iter().map(|y| (y - mean) * (y - mean)).sum();
    if denom == 0.0 {
        return Err(Error::numerical("ground-truth outputs have zero variance"));
    }
    let num = (preds - truths).norm_squared();
    Ok(1.0 - num / denom)
}

/// Mean negative log-likelihood of the ground truth under the joint Gaussian
/// predictive distribution:
/// (rᵀ V⁻¹ r + log det V + n·log 2π) / (2n) with r = y − μ.
///
/// The full predictive covariance is used, not its diagonal; with a diagonal
/// covariance this reduces to the mean of per-point Gaussian negative log
/// densities.
pub fn metric_mnll(pred: &PredictiveDistribution, truths: &DVector<f64>) -> Result<f64> {
    check_lengths(pred.mean.len(), truths.len())?;
    let n = truths.len() as f64;
    let (chol, _) = cholesky_with_jitter(&pred.cov)?;
    let r = truths - &pred.mean;
    let solved = chol.solve(&r);
    let quad = r.dot(&solved);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok((quad + logdet + n * (2.0 * std::f64::consts::PI).ln()) / (2.0 * n))
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid_argument(format!(
            "prediction/truth length mismatch: {a} vs {b}"
        )));
    }
    if a == 0 {
        return Err(Error::invalid_argument("metrics need at least one test point"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Methods and budgets
// ---------------------------------------------------------------------------

/// A method the harness can run. The first four share the transfer model and
/// differ only in which regularizers are active; the last two are the
/// single-domain and single-source baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Transfer model with both regularizers.
    R2Hgp,
    /// Transfer model with both regularizers disabled.
    Hgp,
    /// Transfer model with only the reference-anchoring penalty.
    PhyrHgp,
    /// Transfer model with only the sparsity penalty.
    SsrHgp,
    /// Plain GP on the target data alone.
    Tgp,
    /// Input-mapping calibration baseline on one designated source.
    Imc,
}

pub const ALL_METHODS: [Method; 6] =
    [Method::R2Hgp, Method::Hgp, Method::PhyrHgp, Method::SsrHgp, Method::Tgp, Method::Imc];

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::R2Hgp => "R2HGP",
            Method::Hgp => "HGP",
            Method::PhyrHgp => "PhyR-HGP",
            Method::SsrHgp => "SSR-HGP",
            Method::Tgp => "TGP",
            Method::Imc => "IMC",
        }
    }

    /// Stable index used to derive per-method RNG streams, independent of the
    /// position in a methods list.
    fn stream_index(self) -> u64 {
        match self {
            Method::R2Hgp => 0,
            Method::Hgp => 1,
            Method::PhyrHgp => 2,
            Method::SsrHgp => 3,
            Method::Tgp => 4,
            Method::Imc => 5,
        }
    }

    /// Whether the method trains the multi-source transfer model.
    pub fn is_transfer(self) -> bool {
        !matches!(self, Method::Tgp | Method::Imc)
    }

    /// Regularization weights for the transfer variants, given the configured
    /// full-strength weights.
    fn regularizers(self, lambda: f64, gamma: f64) -> (f64, f64) {
        match self {
            Method::R2Hgp => (lambda, gamma),
            Method::Hgp => (0.0, 0.0),
            Method::PhyrHgp => (lambda, 0.0),
            Method::SsrHgp => (0.0, gamma),
            Method::Tgp | Method::Imc => (0.0, 0.0),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R2HGP" => Ok(Method::R2Hgp),
            "HGP" => Ok(Method::Hgp),
            "PHYR-HGP" => Ok(Method::PhyrHgp),
            "SSR-HGP" => Ok(Method::SsrHgp),
            "TGP" => Ok(Method::Tgp),
            "IMC" => Ok(Method::Imc),
            other => Err(Error::Config(format!("unknown method name: {other}"))),
        }
    }
}

/// Reference-anchoring weight applied when neither the settings nor a
/// simulation case supply one (external datasets).
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Sparsity weight applied when neither the settings nor a simulation case
/// supply one (external datasets).
pub const DEFAULT_GAMMA: f64 = 0.1;

/// Budget and model settings shared by every repetition of a benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub repetitions: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub smoothing_window: usize,
    pub hidden_width: usize,
    /// Mixing weight between prior and recognition reconstruction terms.
    pub mu: f64,
    /// Weight on the KL term.
    pub beta: f64,
    /// Reference-anchoring weight used by methods that enable it; `None`
    /// falls back to the per-case default (or [`DEFAULT_LAMBDA`] for
    /// external datasets).
    pub lambda: Option<f64>,
    /// Sparsity weight used by methods that enable it; `None` falls back to
    /// the per-case default (or [`DEFAULT_GAMMA`] for external datasets).
    pub gamma: Option<f64>,
    /// Prior / recognition draws per training epoch.
    pub l_draws: usize,
    pub m_draws: usize,
    /// Prior draws at test points / recognition draws at training points
    /// during prediction.
    pub k_draws: usize,
    pub w_draws: usize,
    /// Directory for per-method training-loss traces (none = no traces).
    pub trace_dir: Option<PathBuf>,
}

impl BenchSettings {
    /// Reduced budget intended for interactive runs on a small machine:
    /// fewer repetitions and fewer prediction draws than the full
    /// protocol, with the same optimization schedule.
    pub fn desk() -> Self {
        BenchSettings {
            repetitions: 10,
            epochs: crate::optim::DEFAULT_EPOCHS,
            learning_rate: crate::optim::DEFAULT_LEARNING_RATE,
            smoothing_window: crate::optim::DEFAULT_SMOOTHING_WINDOW,
            hidden_width: crate::alignnet::DEFAULT_HIDDEN_WIDTH,
            mu: 0.7,
            beta: 0.8,
            lambda: None,
            gamma: None,
            l_draws: 2,
            m_draws: 2,
            k_draws: 4,
            w_draws: 4,
            trace_dir: None,
        }
    }

    /// Full published protocol: 30 repetitions and the full optimization
    /// schedule.
    pub fn paper() -> Self {
        BenchSettings {
            repetitions: 30,
            k_draws: crate::gpcore::DEFAULT_PRED_PRIOR_DRAWS,
            w_draws: crate::gpcore::DEFAULT_PRED_RECOG_DRAWS,
            ..BenchSettings::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::invalid_argument("repetitions must be at least 1"));
        }
        let probe = ObjectiveConfig {
            mu: self.mu,
            beta: self.beta,
            lambda: self.lambda.unwrap_or(DEFAULT_LAMBDA),
            gamma: self.gamma.unwrap_or(DEFAULT_GAMMA),
            l_draws: self.l_draws,
            m_draws: self.m_draws,
        };
        probe.validate()?;
        if self.epochs == 0 || self.k_draws == 0 || self.w_draws == 0 {
            return Err(Error::invalid_argument("epochs and prediction draws must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid_argument("learning rate must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Mean, standard deviation, and per-repetition values of one metric. Failed
/// repetitions appear as nulls; mean/std aggregate the successes (std is the
/// sample standard deviation, zero when fewer than two values exist, null
/// when none do).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub per_rep: Vec<Option<f64>>,
}

fn summarize(per_rep: Vec<Option<f64>>) -> MetricSummary {
    let xs: Vec<f64> = per_rep.iter().filter_map(|v| *v).collect();
    if xs.is_empty() {
        return MetricSummary { mean: None, std: None, per_rep };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MetricSummary { mean: Some(mean), std: Some(std), per_rep }
}

/// A repetition on which a method failed, with the error message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepFailure {
    pub repetition: usize,
    pub error: String,
}

/// Aggregated metrics for one method across all repetitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub rmse: MetricSummary,
    pub r2: MetricSummary,
    pub mnll: MetricSummary,
    /// Learned transfer coefficients per repetition; present only for the
    /// methods that train the transfer model.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rho: Option<Vec<Option<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub failures: Vec<RepFailure>,
}

/// Complete result of one benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub case: String,
    pub seed: u64,
    pub repetitions: usize,
    pub methods: BTreeMap<String, MethodReport>,
}

/// Per-repetition outcome of one method.
struct RepOutcome {
    rmse: f64,
    r2: f64,
    mnll: f64,
    rho: Option<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

/// Run the benchmark on a simulation case.
///
/// Each repetition regenerates the data from a seed derived as
/// ("bench-rep", r), trains every requested method, and scores it on the
/// noiseless test grid. Repetitions run in parallel; results are merged in
/// repetition order, so reports are deterministic for a fixed
/// (spec, methods, settings, seed). A failing method records a failure entry
/// for that repetition without aborting the sweep.
pub fn run_benchmark(
    spec: &SimCaseSpec,
    methods: &[Method],
    settings: &BenchSettings,
    seed: u64,
) -> Result<BenchReport> {
    spec.validate()?;
    settings.validate()?;
    if methods.is_empty() {
        return Err(Error::invalid_argument("methods list is empty"));
    }
    if let Some(dir) = &settings.trace_dir {
        std::fs::create_dir_all(dir)?;
    }

    let base_reg = (
        settings.lambda.unwrap_or(spec.lambda),
        settings.gamma.unwrap_or(spec.gamma),
    );
    let reps = settings.repetitions;
    let rep_results: Vec<Vec<std::result::Result<RepOutcome, String>>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let rep_seed: u64 = stream(seed, "bench-rep", r as u64).random();
            run_repetition(spec, methods, settings, base_reg, rep_seed, r)
        })
        .collect();

    Ok(aggregate(spec.case.name(), seed, methods, rep_results))
}

/// One repetition: generate data, then run every method on it.
fn run_repetition(
    spec: &SimCaseSpec,
    methods: &[Method],
    settings: &BenchSettings,
    base_reg: (f64, f64),
    rep_seed: u64,
    rep_index: usize,
) -> Vec<std::result::Result<RepOutcome, String>> {
    let gen = match gen_case(spec, rep_seed) {
        Ok(g) => g,
        Err(e) => {
            let msg = format!("data generation failed: {e}");
            return methods.iter().map(|_| Err(msg.clone())).collect();
        }
    };
    let data = gen.training_data();
    let single_source = spec.case.single_source_index();
    methods
        .iter()
        .map(|&m| {
            run_method(m, &data, &gen, settings, base_reg, rep_seed, rep_index, single_source)
                .map_err(|e| e.to_string())
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_method(
    method: Method,
    data: &TransferData,
    gen: &GeneratedCase,
    settings: &BenchSettings,
    base_reg: (f64, f64),
    rep_seed: u64,
    rep_index: usize,
    single_source: usize,
) -> Result<RepOutcome> {
    let idx = method.stream_index();
    let fit_seed: u64 = stream(rep_seed, "method-fit", idx).random();

    let (pred, rho) = match method {
        Method::Tgp => {
            let gp = tgp_fit(&data.target, fit_seed)?;
            (tgp_predict(&gp, &gen.test_inputs)?, None)
        }
        Method::Imc => {
            let model = imc_fit(data, single_source, fit_seed)?;
            (imc_predict(&model, &gen.test_inputs)?, None)
        }
        transfer => {
            let (lambda, gamma) = transfer.regularizers(base_reg.0, base_reg.1);
            let trace_path = settings
                .trace_dir
                .as_ref()
                .map(|d| d.join(format!("{}-rep{rep_index:02}.csv", transfer.name())));
            let cfg = TrainConfig {
                objective: ObjectiveConfig {
                    mu: settings.mu,
                    beta: settings.beta,
                    lambda,
                    gamma,
                    l_draws: settings.l_draws,
                    m_draws: settings.m_draws,
                },
                epochs: settings.epochs,
                learning_rate: settings.learning_rate,
                smoothing_window: settings.smoothing_window,
                hidden_width: settings.hidden_width,
                alphas: None,
                seed: fit_seed,
                trace_path,
            };
            let model = train(data, &gen.references, &cfg)?;
            let mut pred_rng = stream(rep_seed, "method-pred", idx);
            let pred = model.predict(
                data,
                &gen.test_inputs,
                settings.k_draws,
                settings.w_draws,
                &mut pred_rng,
            )?;
            (pred, Some(model.rho().to_vec()))
        }
    };

    Ok(RepOutcome {
        rmse: metric_rmse(&pred.mean, &gen.test_outputs)?,
        r2: metric_r2(&pred.mean, &gen.test_outputs)?,
        mnll: metric_mnll(&pred, &gen.test_outputs)?,
        rho,
    })
}

fn aggregate(
    case_name: &str,
    seed: u64,
    methods: &[Method],
    rep_results: Vec<Vec<std::result::Result<RepOutcome, String>>>,
) -> BenchReport {
    let reps = rep_results.len();
    let mut map = BTreeMap::new();
    for (mi, &m) in methods.iter().enumerate() {
        let mut rmse = Vec::with_capacity(reps);
        let mut r2 = Vec::with_capacity(reps);
        let mut mnll = Vec::with_capacity(reps);
        let mut rho: Vec<Option<Vec<f64>>> = Vec::with_capacity(reps);
        let mut failures = Vec::new();
        for (r, row) in rep_results.iter().enumerate() {
            match &row[mi] {
                Ok(out) => {
                    rmse.push(Some(out.rmse));
                    r2.push(Some(out.r2));
                    mnll.push(Some(out.mnll));
                    rho.push(out.rho.clone());
                }
                Err(msg) => {
                    rmse.push(None);
                    r2.push(None);
                    mnll.push(None);
                    rho.push(None);
                    failures.push(RepFailure { repetition: r, error: msg.clone() });
                }
            }
        }
        let report = MethodReport {
            rmse: summarize(rmse),
            r2: summarize(r2),
            mnll: summarize(mnll),
            rho: if m.is_transfer() { Some(rho) } else { None },
            failures,
        };
        map.insert(m.name().to_string(), report);
    }
    BenchReport { case: case_name.to_string(), seed, repetitions: reps, methods: map }
}

/// Run the benchmark on user-supplied datasets instead of a generated case.
///
/// The training data and test set are fixed; repetitions differ only in the
/// derived seeds for initialization and Monte-Carlo draws. `references` and
/// `single_source` play the roles the case definitions play for simulated
/// data.
#[allow(clippy::too_many_arguments)]
pub fn run_benchmark_data(
    name: &str,
    data: &TransferData,
    test: &Dataset,
    references: &[ReferenceMapSpec],
    single_source: usize,
    methods: &[Method],
    settings: &BenchSettings,
    seed: u64,
) -> Result<BenchReport> {
    settings.validate()?;
    if methods.is_empty() {
        return Err(Error::invalid_argument("methods list is empty"));
    }
    if single_source >= data.sources.len() {
        return Err(Error::invalid_argument(format!(
            "single-source index {single_source} out of range for {} sources",
            data.sources.len()
        )));
    }
    if let Some(dir) = &settings.trace_dir {
        std::fs::create_dir_all(dir)?;
    }
    let gen = GeneratedCase {
        sources: data.sources.clone(),
        target: data.target.clone(),
        test_inputs: test.inputs.clone(),
        test_outputs: test.outputs.clone(),
        references: references.to_vec(),
    };

    let base_reg = (
        settings.lambda.unwrap_or(DEFAULT_LAMBDA),
        settings.gamma.unwrap_or(DEFAULT_GAMMA),
    );
    let reps = settings.repetitions;
    let rep_results: Vec<Vec<std::result::Result<RepOutcome, String>>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let rep_seed: u64 = stream(seed, "bench-rep", r as u64).random();
            let data = gen.training_data();
            methods
                .iter()
                .map(|&m| {
                    run_method(m, &data, &gen, settings, base_reg, rep_seed, r, single_source)
                        .map_err(|e| e.to_string())
                })
                .collect()
        })
        .collect();

    Ok(aggregate(name, seed, methods, rep_results))
}

/// Random train/test index splits for repeated evaluation on a fixed dataset:
/// `n_splits` independent shuffles of 0..n, each cut at `n_train`.
pub fn mc_splits(
    n: usize,
    n_train: usize,
    n_splits: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid_argument(format!(
            "train size {n_train} must be in 1..{n}"
        )));
    }
    use rand::seq::SliceRandom;
    Ok((0..n_splits)
        .map(|k| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut stream(seed, "mc-split", k as u64));
            let test = idx.split_off(n_train);
            (idx, test)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn case2_target_vanishes_at_center() {
        assert_abs_diff_eq!(eval_case_target(CaseId::Case2, &[3.0, 0.0]), 0.0);
    }

    #[test]
    fn case2_target_matches_hand_computed_value() {
        let v = eval_case_target(CaseId::Case2, &[4.0, 2.0]);
        assert_abs_diff_eq!(v, 0.2 + 0.6 + f64::sin(4.0), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.043196, epsilon = 2e-6);
    }

    #[test]
    fn case1_first_source_matches_hand_computed_value() {
        assert_abs_diff_eq!(eval_case_source(CaseId::Case1, 0, &[1.0, 0.0]), 2.0);
    }

    #[test]
    fn case1_target_is_continuous_at_the_removable_singularity() {
        let at_zero = eval_case_target(CaseId::Case1, &[0.0, 1.0, 0.5, 1.0]);
        let near_zero = eval_case_target(CaseId::Case1, &[1e-9, 1.0, 0.5, 1.0]);
        assert_abs_diff_eq!(at_zero, near_zero, epsilon = 1e-5);
        // Limit value: √((x₂+x₃²)x₄)/2 + 3x₄·exp(1+sin x₃).
        let expect = (1.25f64).sqrt() / 2.0 + 3.0 * (1.0 + 0.5f64.sin()).exp();
        assert_abs_diff_eq!(at_zero, expect, epsilon = 1e-12);
    }

    #[test]
    fn case2_third_source_peaks_on_the_diagonal() {
        assert_abs_diff_eq!(eval_case_source(CaseId::Case2, 2, &[2.0, 2.0]), 1.0);
        assert_abs_diff_eq!(eval_case_source(CaseId::Case2, 2, &[0.0, 0.0]), -15.0);
    }

    #[test]
    fn canonical_specs_validate_and_match_published_counts() {
        for case in [CaseId::Case1, CaseId::Case2, CaseId::Case3] {
            let spec = SimCaseSpec::canonical(case);
            spec.validate().unwrap();
        }
        let c1 = SimCaseSpec::canonical(CaseId::Case1);
        assert_eq!(c1.source_counts, vec![80, 80, 80]);
        assert_eq!(c1.target_count, 50);
        assert_eq!(c1.test_grid.iter().product::<usize>(), 2916);
        assert_eq!(c1.target_train_bounds[3], (0.0, 1.6));
        let c2 = SimCaseSpec::canonical(CaseId::Case2);
        assert_eq!(c2.test_grid.iter().product::<usize>(), 676);
        assert_eq!(c2.target_train_bounds[1], (0.0, 4.0));
        let c3 = SimCaseSpec::canonical(CaseId::Case3);
        assert_eq!(c3.test_grid.iter().product::<usize>(), 500);
        assert_eq!(c3.target_train_bounds[0], (0.0, 0.8));
        assert_eq!(c3.noise_std, 0.0);
    }

    #[test]
    fn case2_test_grid_has_expected_spacing() {
        let spec = SimCaseSpec::canonical(CaseId::Case2);
        let gen = gen_case(&spec, 7).unwrap();
        assert_eq!(gen.test_inputs.nrows(), 676);
        // Last axis varies fastest with spacing 0.2.
        assert_abs_diff_eq!(gen.test_inputs[(0, 1)], 0.0);
        assert_abs_diff_eq!(gen.test_inputs[(1, 1)], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(gen.test_inputs[(25, 1)], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gen.test_inputs[(26, 0)], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(gen.test_inputs[(675, 0)], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn gen_case_is_bitwise_reproducible() {
        let spec = SimCaseSpec::canonical(CaseId::Case2);
        let a = gen_case(&spec, 11).unwrap();
        let b = gen_case(&spec, 11).unwrap();
        assert_eq!(a.target.inputs, b.target.inputs);
        assert_eq!(a.target.outputs, b.target.outputs);
        for (sa, sb) in a.sources.iter().zip(&b.sources) {
            assert_eq!(sa.inputs, sb.inputs);
            assert_eq!(sa.outputs, sb.outputs);
        }
        let c = gen_case(&spec, 12).unwrap();
        assert_ne!(a.target.outputs, c.target.outputs);
    }

    #[test]
    fn gen_case_with_zero_noise_reproduces_the_functions_exactly() {
        for case in [CaseId::Case1, CaseId::Case2, CaseId::Case3] {
            let mut spec = SimCaseSpec::canonical(case);
            spec.noise_std = 0.0;
            spec.source_counts = vec![5; case.n_sources()];
            spec.target_count = 4;
            let gen = gen_case(&spec, 3).unwrap();
            for (j, s) in gen.sources.iter().enumerate() {
                for i in 0..s.n() {
                    let x = s.inputs.row(i).transpose();
                    assert_eq!(s.outputs[i], eval_case_source(case, j, x.as_slice()));
                }
            }
            for i in 0..gen.target.n() {
                let x = gen.target.inputs.row(i).transpose();
                assert_eq!(gen.target.outputs[i], eval_case_target(case, x.as_slice()));
            }
        }
    }

    #[test]
    fn gen_case_respects_restricted_target_ranges() {
        let spec = SimCaseSpec::canonical(CaseId::Case1);
        let gen = gen_case(&spec, 5).unwrap();
        for i in 0..gen.target.n() {
            assert!(gen.target.inputs[(i, 3)] <= 1.6);
        }
        // Test grid still spans [0, 2] on every axis.
        let max_x4 = (0..gen.test_inputs.nrows())
            .map(|i| gen.test_inputs[(i, 3)])
            .fold(f64::NEG_INFINITY, f64::max);
        assert_abs_diff_eq!(max_x4, 2.0);
    }

    #[test]
    fn case3_reference_table_matches_the_coordinate_map() {
        let spec = SimCaseSpec::canonical(CaseId::Case3);
        let gen = gen_case(&spec, 9).unwrap();
        match &gen.references[0] {
            ReferenceMapSpec::Table { values } => {
                assert_eq!(values.len(), gen.target.n());
                let half_pi = std::f64::consts::FRAC_PI_2;
                for (i, row) in values.iter().enumerate() {
                    let r = gen.target.inputs[(i, 0)];
                    let theta = gen.target.inputs[(i, 1)];
                    let phi = gen.target.inputs[(i, 2)];
                    assert_abs_diff_eq!(row[0], r * (half_pi * phi).cos(), epsilon = 1e-15);
                    assert_abs_diff_eq!(row[1], r * (half_pi * theta).sin(), epsilon = 1e-15);
                }
            }
            other => panic!("expected a table reference, got {other:?}"),
        }
        assert!(matches!(gen.references[1], ReferenceMapSpec::Imc));
    }

    #[test]
    fn metrics_on_perfect_predictions() {
        let truths = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        assert_abs_diff_eq!(metric_rmse(&truths, &truths).unwrap(), 0.0);
        assert_abs_diff_eq!(metric_r2(&truths, &truths).unwrap(), 1.0);
    }

    #[test]
    fn r2_of_the_mean_predictor_is_zero() {
        let truths = DVector::from_vec(vec![1.0, 2.0, 3.0, 6.0]);
        let preds = DVector::from_element(4, truths.mean());
        assert_abs_diff_eq!(metric_r2(&preds, &truths).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn mnll_of_a_standard_normal_at_zero() {
        let n = 4;
        let pred = PredictiveDistribution {
            mean: DVector::zeros(n),
            cov: DMatrix::identity(n, n),
        };
        let truths = DVector::zeros(n);
        let expect = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(metric_mnll(&pred, &truths).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn joint_mnll_with_diagonal_covariance_equals_mean_pointwise_density() {
        let vars = [0.3, 1.7, 0.9, 2.4];
        let mean = DVector::from_vec(vec![0.1, -0.4, 0.8, 0.0]);
        let truths = DVector::from_vec(vec![0.5, 0.2, -0.3, 1.1]);
        let pred = PredictiveDistribution {
            mean: mean.clone(),
            cov: DMatrix::from_diagonal(&DVector::from_row_slice(&vars)),
        };
        let joint = metric_mnll(&pred, &truths).unwrap();
        let pointwise: f64 = (0..4)
            .map(|i| {
                let r = truths[i] - mean[i];
                0.5 * (r * r / vars[i] + vars[i].ln() + (2.0 * std::f64::consts::PI).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert_abs_diff_eq!(joint, pointwise, epsilon = 1e-12);
    }

    #[test]
    fn metric_length_mismatch_is_rejected() {
        let a = DVector::zeros(3);
        let b = DVector::zeros(4);
        assert!(metric_rmse(&a, &b).is_err());
        assert!(metric_r2(&a, &b).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in ALL_METHODS {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn summary_of_a_single_repetition_has_zero_std() {
        let s = summarize(vec![Some(1.5)]);
        assert_eq!(s.mean, Some(1.5));
        assert_eq!(s.std, Some(0.0));
        let empty = summarize(vec![None, None]);
        assert_eq!(empty.mean, None);
        assert_eq!(empty.std, None);
        assert_eq!(empty.per_rep, vec![None, None]);
    }

    #[test]
    fn summary_uses_the_sample_standard_deviation() {
        let s = summarize(vec![Some(1.0), Some(3.0), None]);
        assert_eq!(s.mean, Some(2.0));
        assert_abs_diff_eq!(s.std.unwrap(), std::f64::consts::SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn mc_splits_partition_the_index_range() {
        let splits = mc_splits(10, 7, 5, 42).unwrap();
        assert_eq!(splits.len(), 5);
        for (train, test) in &splits {
            assert_eq!(train.len(), 7);
            assert_eq!(test.len(), 3);
            let mut all: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
        assert_eq!(splits, mc_splits(10, 7, 5, 42).unwrap());
        assert_ne!(splits, mc_splits(10, 7, 5, 43).unwrap());
        assert!(mc_splits(10, 10, 2, 0).is_err());
    }

    /// Reduced-budget end-to-end run: report shape, determinism, and the
    /// single-repetition std convention.
    #[test]
    fn tiny_benchmark_run_is_deterministic_and_well_formed() {
        let mut spec = SimCaseSpec::canonical(CaseId::Case2);
        spec.source_counts = vec![8, 8, 8];
        spec.target_count = 6;
        spec.test_grid = vec![5, 5];
        let mut settings = BenchSettings::desk();
        settings.repetitions = 1;
        settings.epochs = 20;
        settings.l_draws = 1;
        settings.m_draws = 1;
        settings.k_draws = 2;
        settings.w_draws = 2;
        let methods = [Method::R2Hgp, Method::Tgp];
        let a = run_benchmark(&spec, &methods, &settings, 123).unwrap();
        let b = run_benchmark(&spec, &methods, &settings, 123).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.case, "case2");
        assert_eq!(a.repetitions, 1);
        assert_eq!(a.methods.len(), 2);
        let r2hgp = &a.methods["R2HGP"];
        assert!(r2hgp.failures.is_empty());
        assert_eq!(r2hgp.rmse.std, Some(0.0));
        assert!(r2hgp.rmse.mean.unwrap() >= 0.0);
        assert!(r2hgp.r2.mean.unwrap() <= 1.0);
        assert!(r2hgp.mnll.mean.unwrap().is_finite());
        let rho = r2hgp.rho.as_ref().unwrap();
        assert_eq!(rho.len(), 1);
        assert_eq!(rho[0].as_ref().unwrap().len(), 3);
        assert!(a.methods["TGP"].rho.is_none());
    }
}
