//! Joint Gaussian-process decoder over all source outputs and the target
//! output.
//!
//! Observations are stacked as (y_1, …, y_N, y_T). Each source block uses its
//! own kernel over its own input space; the target block mixes every source
//! kernel evaluated at aligned target inputs (scaled by transfer coefficients
//! ρ_j²) with a discrepancy kernel over the raw target inputs; cross blocks
//! couple source observations to the target through ρ_j. Source–source cross
//! blocks are zero, so the joint covariance is positive definite for any real
//! ρ whenever the noise terms are positive.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::alignnet::{
    prior_forward, recog_forward, recog_inputs, reparam_sample, PriorNetParams, RecogNetParams,
};
use crate::dataio::StandardizedTransfer;
use crate::kernels::{kernel_matrix, KernelParams};
use crate::tape::cholesky_with_jitter;
use crate::{Error, Result};

/// Smallest admitted noise std at initialization.
pub const NOISE_STD_FLOOR: f64 = 0.05;
/// Default number of prior draws at test points during prediction.
pub const DEFAULT_PRED_PRIOR_DRAWS: usize = 20;
/// Default number of recognition draws at training points during prediction.
pub const DEFAULT_PRED_RECOG_DRAWS: usize = 20;

/// GP-level parameters shared by the joint covariance: transfer coefficients,
/// per-block noise variances, the discrepancy scale, and all kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferParams {
    /// ρ_j, one per source.
    pub rho: Vec<f64>,
    /// log noise variances: one per source, then the target (length N+1).
    pub log_noise: Vec<f64>,
    /// log σ_d², the discrepancy-kernel scale.
    pub log_disc_scale: f64,
    /// Source kernels, one per source, over that source's input space.
    pub source_kernels: Vec<KernelParams>,
    /// Discrepancy kernel over the target input space. Its amplitude is held
    /// fixed (the scale lives in `log_disc_scale`).
    pub disc_kernel: KernelParams,
}

impl TransferParams {
    pub fn n_sources(&self) -> usize {
        self.rho.len()
    }

    pub fn noise_var(&self, block: usize) -> f64 {
        self.log_noise[block].exp()
    }

    pub fn disc_scale(&self) -> f64 {
        self.log_disc_scale.exp()
    }

    fn check(&self) -> Result<()> {
        let n = self.rho.len();
        if self.log_noise.len() != n + 1 {
            return Err(Error::InvalidState(format!(
                "expected {} noise terms, got {}",
                n + 1,
                self.log_noise.len()
            )));
        }
        if self.source_kernels.len() != n {
            return Err(Error::InvalidState("one kernel required per source".into()));
        }
        Ok(())
    }
}

/// Row layout of the joint covariance: source blocks in order, then target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CovLayout {
    pub source_sizes: Vec<usize>,
    pub n_target: usize,
}

impl CovLayout {
    pub fn total(&self) -> usize {
        self.source_sizes.iter().sum::<usize>() + self.n_target
    }

    pub fn source_start(&self, j: usize) -> usize {
        self.source_sizes[..j].iter().sum()
    }

    pub fn target_start(&self) -> usize {
        self.source_sizes.iter().sum()
    }
}

/// Assembled joint covariance with its block layout.
#[derive(Clone, Debug, PartialEq)]
pub struct JointCovariance {
    pub matrix: DMatrix<f64>,
    pub layout: CovLayout,
}

/// The training-side inputs the joint covariance is built from, all in
/// standardized coordinates.
#[derive(Clone, Copy)]
pub struct JointInputs<'a> {
    /// X_j: source training inputs, n_j × d_Sj.
    pub source_inputs: &'a [DMatrix<f64>],
    /// Z_j: aligned target training inputs in source-j space, n_T × d_Sj.
    pub aligned: &'a [DMatrix<f64>],
    /// X_T: target training inputs, n_T × d_T.
    pub target_inputs: &'a DMatrix<f64>,
}

impl<'a> JointInputs<'a> {
    fn check(&self, t: &TransferParams) -> Result<()> {
        t.check()?;
        let n = t.n_sources();
        if self.source_inputs.len() != n || self.aligned.len() != n {
            return Err(Error::invalid_argument(format!(
                "expected {n} source input sets and aligned sets"
            )));
        }
        for j in 0..n {
            let d = t.source_kernels[j].dim();
            if self.source_inputs[j].ncols() != d {
                return Err(Error::invalid_argument(format!(
                    "source {j} inputs have {} dims, kernel expects {d}",
                    self.source_inputs[j].ncols()
                )));
            }
            if self.aligned[j].ncols() != d {
                return Err(Error::invalid_argument(format!(
                    "aligned inputs for source {j} have {} dims, kernel expects {d}",
                    self.aligned[j].ncols()
                )));
            }
            if self.aligned[j].nrows() != self.target_inputs.nrows() {
                return Err(Error::invalid_argument(
                    "aligned inputs must have one row per target sample",
                ));
            }
        }
        if self.target_inputs.ncols() != t.disc_kernel.dim() {
            return Err(Error::invalid_argument(
                "target inputs do not match discrepancy kernel dimension",
            ));
        }
        Ok(())
    }

    fn layout(&self) -> CovLayout {
        CovLayout {
            source_sizes: self.source_inputs.iter().map(|m| m.nrows()).collect(),
            n_target: self.target_inputs.nrows(),
        }
    }
}

/// Target-block covariance between two sets of (aligned, raw) target inputs,
/// without observation noise: Σ_j ρ_j² K_j(Z_j, Z'_j) + σ_d² K_d(X, X').
fn target_block(
    t: &TransferParams,
    aligned_a: &[DMatrix<f64>],
    target_a: &DMatrix<f64>,
    aligned_b: &[DMatrix<f64>],
    target_b: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut block = kernel_matrix(&t.disc_kernel, target_a, target_b)? * t.disc_scale();
    for j in 0..t.n_sources() {
        let k = kernel_matrix(&t.source_kernels[j], &aligned_a[j], &aligned_b[j])?;
        block += k * (t.rho[j] * t.rho[j]);
    }
    Ok(block)
}

/// Assemble the full joint covariance over (y_1, …, y_N, y_T).
pub fn assemble_cov(t: &TransferParams, inp: &JointInputs) -> Result<JointCovariance> {
    inp.check(t)?;
    let layout = inp.layout();
    let total = layout.total();
    let mut c = DMatrix::zeros(total, total);

    for j in 0..t.n_sources() {
        let start = layout.source_start(j);
        let n_j = layout.source_sizes[j];
        let mut k_jj = kernel_matrix(&t.source_kernels[j], &inp.source_inputs[j], &inp.source_inputs[j])?;
        let noise = t.noise_var(j);
        for i in 0..n_j {
            k_jj[(i, i)] += noise;
        }
        c.view_mut((start, start), (n_j, n_j)).copy_from(&k_jj);

        let cross = kernel_matrix(&t.source_kernels[j], &inp.source_inputs[j], &inp.aligned[j])? * t.rho[j];
        c.view_mut((start, layout.target_start()), (n_j, layout.n_target)).copy_from(&cross);
        c.view_mut((layout.target_start(), start), (layout.n_target, n_j))
            .copy_from(&cross.transpose());
    }

    let mut tt = target_block(t, inp.aligned, inp.target_inputs, inp.aligned, inp.target_inputs)?;
    let t_noise = t.noise_var(t.n_sources());
    for i in 0..layout.n_target {
        tt[(i, i)] += t_noise;
    }
    c.view_mut((layout.target_start(), layout.target_start()), (layout.n_target, layout.n_target))
        .copy_from(&tt);

    Ok(JointCovariance { matrix: c, layout })
}

/// Log density of the stacked observations under the zero-mean joint GP.
pub fn joint_loglik(cov: &JointCovariance, y: &DVector<f64>) -> Result<f64> {
    let n = cov.matrix.nrows();
    if y.len() != n {
        return Err(Error::invalid_argument(format!(
            "observation vector has {} entries, covariance is {n}×{n}",
            y.len()
        )));
    }
    let (chol, _) = cholesky_with_jitter(&cov.matrix)?;
    let alpha = chol.solve(y);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok(-0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Gaussian predictive distribution (standardized or raw space depending on
/// the caller).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl PredictiveDistribution {
    /// Marginal predictive variances.
    pub fn variances(&self) -> DVector<f64> {
        self.cov.diagonal()
    }
}

/// Cross covariance between every training observation and the latent target
/// function at test points: n_total × n_test.
fn cross_cov(
    t: &TransferParams,
    inp: &JointInputs,
    aligned_test: &[DMatrix<f64>],
    target_test: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let layout = inp.layout();
    let n_test = target_test.nrows();
    let mut cross = DMatrix::zeros(layout.total(), n_test);
    for j in 0..t.n_sources() {
        let start = layout.source_start(j);
        let k = kernel_matrix(&t.source_kernels[j], &inp.source_inputs[j], &aligned_test[j])? * t.rho[j];
        cross.view_mut((start, 0), (layout.source_sizes[j], n_test)).copy_from(&k);
    }
    let tt = target_block(t, inp.aligned, inp.target_inputs, aligned_test, target_test)?;
    cross.view_mut((layout.target_start(), 0), (layout.n_target, n_test)).copy_from(&tt);
    Ok(cross)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let mt = m.transpose();
    *m += mt;
    *m *= 0.5;
}

/// Project a symmetric matrix onto the PSD cone by clipping negative
/// eigenvalues at zero.
fn psd_project(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

/// Exact posterior of the latent target function at test points, conditioned
/// on all stacked observations, for fixed aligned inputs:
/// μ* = C*ᵀ C⁻¹ y, V* = C** − C*ᵀ C⁻¹ C*. The covariance is symmetrized and
/// projected to PSD before returning; it excludes observation noise.
pub fn predictive_posterior(
    t: &TransferParams,
    inp: &JointInputs,
    y: &DVector<f64>,
    aligned_test: &[DMatrix<f64>],
    target_test: &DMatrix<f64>,
) -> Result<PredictiveDistribution> {
    let cov = assemble_cov(t, inp)?;
    if y.len() != cov.layout.total() {
        return Err(Error::invalid_argument("observation vector does not match layout"));
    }
    for (j, a) in aligned_test.iter().enumerate() {
        if a.nrows() != target_test.nrows() {
            return Err(Error::invalid_argument(format!(
                "aligned test inputs for source {j} must have one row per test point"
            )));
        }
    }
    let cross = cross_cov(t, inp, aligned_test, target_test)?;
    let test = target_block(t, aligned_test, target_test, aligned_test, target_test)?;

    let (chol, _) = cholesky_with_jitter(&cov.matrix)?;
    let alpha = chol.solve(y);
    let mean = cross.transpose() * &alpha;
    let solved = chol.solve(&cross);
    let mut v = test - cross.transpose() * solved;
    symmetrize(&mut v);
    let v = psd_project(v);
    Ok(PredictiveDistribution { mean, cov: v })
}

/// Full parameter set of the transfer model: GP-level parameters plus one
/// prior and one recognition network per source.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub transfer: TransferParams,
    pub priors: Vec<PriorNetParams>,
    pub recogs: Vec<RecogNetParams>,
}

/// Problem dimensions needed to initialize a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub source_dims: Vec<usize>,
    pub target_dim: usize,
    pub hidden_width: usize,
    pub alphas: Vec<f64>,
}

impl ModelDims {
    pub fn new(source_dims: Vec<usize>, target_dim: usize) -> Self {
        let n = source_dims.len();
        ModelDims {
            source_dims,
            target_dim,
            hidden_width: crate::alignnet::DEFAULT_HIDDEN_WIDTH,
            alphas: vec![crate::alignnet::DEFAULT_ALPHA; n],
        }
    }
}

impl ModelParams {
    /// Random initialization: unit kernels (all log parameters zero), ρ = 1,
    /// noise stds drawn uniformly on [0, 1] and floored, unit discrepancy
    /// scale, near-zero network weights, and a small initial prior variance.
    /// Draw order: noise stds (sources then target), then per source the
    /// prior then the recognition network.
    pub fn init(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let n = dims.source_dims.len();
        let unif = Uniform::new(0.0f64, 1.0).expect("valid uniform");
        let log_noise: Vec<f64> = (0..n + 1)
            .map(|_| {
                let s = unif.sample(rng).max(NOISE_STD_FLOOR);
                (s * s).ln()
            })
            .collect();
        let mut priors = Vec::with_capacity(n);
        let mut recogs = Vec::with_capacity(n);
        for j in 0..n {
            priors.push(crate::alignnet::init_prior(
                dims.source_dims[j],
                dims.target_dim,
                crate::alignnet::Activation::Identity,
                rng,
            ));
            recogs.push(crate::alignnet::init_recog(
                dims.source_dims[j],
                dims.target_dim,
                dims.hidden_width,
                dims.alphas[j],
                rng,
            ));
        }
        ModelParams {
            transfer: TransferParams {
                rho: vec![1.0; n],
                log_noise,
                log_disc_scale: 0.0,
                source_kernels: dims.source_dims.iter().map(|&d| KernelParams::unit(d)).collect(),
                disc_kernel: KernelParams::unit(dims.target_dim),
            },
            priors,
            recogs,
        }
    }

    pub fn n_sources(&self) -> usize {
        self.transfer.n_sources()
    }
}

/// Monte-Carlo moment-matched prediction of the latent target function at
/// standardized test inputs.
///
/// For each of `w_draws` recognition draws of the aligned training inputs the
/// joint covariance is assembled and factored once; for each of `k_draws`
/// prior draws of the aligned test inputs an exact conditional is computed
/// against that factor. The K·W Gaussian components are then moment-matched
/// into a single Gaussian. Draw order per w: one eps matrix per source
/// (training), then per k one eps matrix per source (test).
pub fn mc_predict(
    model: &ModelParams,
    data: &StandardizedTransfer,
    x_test_std: &DMatrix<f64>,
    k_draws: usize,
    w_draws: usize,
    rng: &mut impl Rng,
) -> Result<PredictiveDistribution> {
    if k_draws == 0 || w_draws == 0 {
        return Err(Error::invalid_argument("draw counts must be positive"));
    }
    let n = model.n_sources();
    let t = &model.transfer;
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let n_test = x_test_std.nrows();
    let n_t = data.data.target.n();

    let source_inputs: Vec<DMatrix<f64>> =
        data.data.sources.iter().map(|s| s.inputs.clone()).collect();
    let y = data.data.stacked_outputs();

    // Recognition posteriors at training points and prior batches at test
    // points are fixed across draws.
    let mut recog_batches = Vec::with_capacity(n);
    let mut prior_batches = Vec::with_capacity(n);
    for j in 0..n {
        let u = recog_inputs(&data.data.target, &data.data.sources[j], model.recogs[j].alpha);
        recog_batches.push(recog_forward(&model.recogs[j], &u)?);
        prior_batches.push(prior_forward(&model.priors[j], x_test_std)?);
    }

    let total_components = (k_draws * w_draws) as f64;
    let mut mean_acc = DVector::zeros(n_test);
    let mut second_acc = DMatrix::zeros(n_test, n_test);

    for _ in 0..w_draws {
        let aligned: Vec<DMatrix<f64>> = recog_batches
            .iter()
            .map(|g| {
                let eps = DMatrix::from_fn(n_t, g.means.ncols(), |_, _| normal.sample(rng));
                reparam_sample(g, &eps)
            })
            .collect();
        let inp = JointInputs {
            source_inputs: &source_inputs,
            aligned: &aligned,
            target_inputs: &data.data.target.inputs,
        };
        let cov = assemble_cov(t, &inp)?;
        let (chol, _) = cholesky_with_jitter(&cov.matrix)?;
        let alpha = chol.solve(&y);

        for _ in 0..k_draws {
            let aligned_test: Vec<DMatrix<f64>> = prior_batches
                .iter()
                .map(|g| {
                    let eps = DMatrix::from_fn(n_test, g.means.ncols(), |_, _| normal.sample(rng));
                    reparam_sample(g, &eps)
                })
                .collect();
            let cross = cross_cov(t, &inp, &aligned_test, x_test_std)?;
            let test = target_block(t, &aligned_test, x_test_std, &aligned_test, x_test_std)?;
            let mu = cross.transpose() * &alpha;
            let solved = chol.solve(&cross);
            let v = test - cross.transpose() * solved;
            second_acc += (v + &mu * mu.transpose()) / total_components;
            mean_acc += &mu / total_components;
        }
    }

    let mut cov = second_acc - &mean_acc * mean_acc.transpose();
    symmetrize(&mut cov);
    Ok(PredictiveDistribution { mean: mean_acc, cov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{standardize_transfer, Dataset, DomainId};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn toy_transfer(n: usize, rng: &mut impl Rng) -> TransferParams {
        TransferParams {
            rho: (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect(),
            log_noise: (0..n + 1).map(|_| rng.random::<f64>() * 2.0 - 3.0).collect(),
            log_disc_scale: rng.random::<f64>() - 0.5,
            source_kernels: (0..n)
                .map(|j| KernelParams {
                    log_amplitude: rng.random::<f64>() - 0.5,
                    log_lengthscales: vec![rng.random::<f64>() - 0.5; j + 1],
                })
                .collect(),
            disc_kernel: KernelParams::unit(2),
        }
    }

    fn toy_inputs(
        t: &TransferParams,
        sizes: &[usize],
        n_t: usize,
        rng: &mut impl Rng,
    ) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, DMatrix<f64>) {
        let sources: Vec<DMatrix<f64>> = sizes
            .iter()
            .enumerate()
            .map(|(j, &n)| DMatrix::from_fn(n, t.source_kernels[j].dim(), |_, _| rng.random()))
            .collect();
        let aligned: Vec<DMatrix<f64>> = (0..sizes.len())
            .map(|j| DMatrix::from_fn(n_t, t.source_kernels[j].dim(), |_, _| rng.random()))
            .collect();
        let target = DMatrix::from_fn(n_t, t.disc_kernel.dim(), |_, _| rng.random());
        (sources, aligned, target)
    }

    #[test]
    fn single_point_blocks_match_hand_formula() {
        let t = TransferParams {
            rho: vec![0.7],
            log_noise: vec![(0.3f64).ln(), (0.2f64).ln()],
            log_disc_scale: (0.5f64).ln(),
            source_kernels: vec![KernelParams::unit(1)],
            disc_kernel: KernelParams::unit(1),
        };
        let src = [DMatrix::from_row_slice(1, 1, &[0.0])];
        let aligned = [DMatrix::from_row_slice(1, 1, &[1.0])];
        let target = DMatrix::from_row_slice(1, 1, &[0.5]);
        let inp = JointInputs { source_inputs: &src, aligned: &aligned, target_inputs: &target };
        let c = assemble_cov(&t, &inp).unwrap();
        assert_eq!(c.matrix.shape(), (2, 2));
        // C₁₁ = 1 + 0.3; C₁T = 0.7·exp(−½); C_TT = 0.49·1 + 0.5·1 + 0.2
        assert_abs_diff_eq!(c.matrix[(0, 0)], 1.3, epsilon = 1e-12);
        assert_abs_diff_eq!(c.matrix[(0, 1)], 0.7 * (-0.5f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.matrix[(1, 0)], c.matrix[(0, 1)], epsilon = 1e-15);
        assert_abs_diff_eq!(c.matrix[(1, 1)], 0.49 + 0.5 + 0.2, epsilon = 1e-12);
    }

    #[test]
    fn source_source_blocks_are_zero() {
        let mut rng = crate::rng::stream(40, "gpcore-test", 0);
        let t = toy_transfer(2, &mut rng);
        let (src, aligned, target) = toy_inputs(&t, &[3, 4], 2, &mut rng);
        let inp = JointInputs { source_inputs: &src, aligned: &aligned, target_inputs: &target };
        let c = assemble_cov(&t, &inp).unwrap();
        for i in 0..3 {
            for j in 3..7 {
                assert_abs_diff_eq!(c.matrix[(i, j)], 0.0);
                assert_abs_diff_eq!(c.matrix[(j, i)], 0.0);
            }
        }
        assert_eq!(c.layout.target_start(), 7);
        assert_eq!(c.layout.total(), 9);
    }

    #[test]
    fn assembled_cov_is_symmetric_positive_definite() {
        let mut rng = crate::rng::stream(40, "gpcore-test", 1);
        for trial in 0..20 {
            let n = 1 + trial % 3;
            let t = toy_transfer(n, &mut rng);
            let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(1..5usize)).collect();
            let n_t = rng.random_range(1..5usize);
            let (src, aligned, target) = toy_inputs(&t, &sizes, n_t, &mut rng);
            let inp =
                JointInputs { source_inputs: &src, aligned: &aligned, target_inputs: &target };
            let c = assemble_cov(&t, &inp).unwrap();
            let total = c.layout.total();
            for i in 0..total {
                for j in 0..total {
                    assert_abs_diff_eq!(c.matrix[(i, j)], c.matrix[(j, i)], epsilon = 1e-12);
                }
            }
            let (_, jitter) = cholesky_with_jitter(&c.matrix).unwrap();
            assert!(jitter <= 1e-8, "needed jitter {jitter}");
        }
    }

    #[test]
    fn joint_loglik_matches_dense_formula() {
        let mut rng = crate::rng::stream(40, "gpcore-test", 2);
        let t = toy_transfer(2, &mut rng);
        let (src, aligned, target) = toy_inputs(&t, &[3, 2], 2, &mut rng);
        let inp = JointInputs { source_inputs: &src, aligned: &aligned, target_inputs: &target };
        let c = assemble_cov(&t, &inp).unwrap();
        let y = DVector::from_fn(c.layout.total(), |i, _| (i as f64 * 0.37).sin());
        let ll = joint_loglik(&c, &y).unwrap();
        let inv = c.matrix.clone().try_inverse().unwrap();
        let expected = -0.5 * y.dot(&(&inv * &y))
            - 0.5 * c.matrix.determinant().ln()
            - 0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(ll, expected, epsilon = 1e-9);
    }

    #[test]
    fn joint_loglik_matches_tape_version() {
        let mut rng = crate::rng::stream(40, "gpcore-test", 3);
        let t = toy_transfer(1, &mut rng);
        let (src, aligned, target) = toy_inputs(&t, &[4], 3, &mut rng);
        let inp = JointInputs { source_inputs: &src, aligned: &aligned, target_inputs: &target };
        let c = assemble_cov(&t, &inp).unwrap();
        let y = DVector::from_fn(7, |i, _| (i as f64 - 3.0) * 0.2);
        let plain = joint_loglik(&c, &y).unwrap();
        let mut tape = crate::tape::Tape::new();
        let cn = tape.leaf(c.matrix.clone());
        let ll = tape.gauss_loglik(cn, &y).unwrap();
        assert_abs_diff_eq!(plain, tape.scalar_value(ll), epsilon = 1e-12);
    }

    #[test]
    fn posterior_matches_joint_conditioning_oracle() {
        let mut rng = crate::rng::stream(41, "gpcore-test", 4);
        let t = toy_transfer(2, &mut rng);
        let (src, aligned, target) = toy_inputs(&t, &[4, 3], 3, &mut rng);
        let inp = JointInputs { source_inputs: &src, aligned: &aligned, target_inputs: &target };
        let n_test = 2;
        let aligned_test: Vec<DMatrix<f64>> = (0..2)
            .map(|j| DMatrix::from_fn(n_test, t.source_kernels[j].dim(), |_, _| rng.random()))
            .collect();
        let target_test = DMatrix::from_fn(n_test, 2, |_, _| rng.random());
        let y = DVector::from_fn(inp.layout().total(), |i, _| (i as f64 * 0.61).cos());

        let post = predictive_posterior(&t, &inp, &y, &aligned_test, &target_test).unwrap();

        // Oracle: condition the explicit joint Gaussian over (train obs, test latents).
        let cov = assemble_cov(&t, &inp).unwrap();
        let cross = cross_cov(&t, &inp, &aligned_test, &target_test).unwrap();
        let test = target_block(&t, &aligned_test, &target_test, &aligned_test, &target_test).unwrap();
        let inv = cov.matrix.clone().try_inverse().unwrap();
        let mean_o = cross.transpose() * &inv * &y;
        let cov_o = &test - cross.transpose() * &inv * &cross;
        assert_abs_diff_eq!(&post.mean, &mean_o, epsilon = 1e-8);
        for i in 0..n_test {
            for j in 0..n_test {
                assert_abs_diff_eq!(post.cov[(i, j)], cov_o[(i, j)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn posterior_with_zero_rho_is_single_target_gp() {
        // With ρ = 0 the sources decouple entirely: the target posterior must
        // equal a plain GP with kernel σ_d² K_d and noise σ_T².
        let mut rng = crate::rng::stream(41, "gpcore-test", 5);
        let t = TransferParams {
            rho: vec![0.0],
            log_noise: vec![-1.0, -2.0],
            log_disc_scale: 0.4,
            source_kernels: vec![KernelParams::unit(1)],
            disc_kernel: KernelParams { log_amplitude: 0.0, log_lengthscales: vec![-0.3, 0.2] },
        };
        let (src, aligned, target) = toy_inputs(&t, &[5], 4, &mut rng);
        let inp = JointInputs { source_inputs: &src, aligned: &aligned, target_inputs: &target };
        let mut y = DVector::zeros(9);
        for i in 0..9 {
            y[i] = rng.random::<f64>() * 2.0 - 1.0;
        }
        let y_t = y.rows(5, 4).into_owned();

        let aligned_test = vec![DMatrix::from_fn(3, 1, |_, _| rng.random())];
        let target_test = DMatrix::from_fn(3, 2, |_, _| rng.random());
        let post = predictive_posterior(&t, &inp, &y, &aligned_test, &target_test).unwrap();

        // plain single GP on the target block
        let sd = t.disc_scale();
        let mut k = kernel_matrix(&t.disc_kernel, &target, &target).unwrap() * sd;
        for i in 0..4 {
            k[(i, i)] += t.noise_var(1);
        }
        let k_star = kernel_matrix(&t.disc_kernel, &target, &target_test).unwrap() * sd;
        let k_ss = kernel_matrix(&t.disc_kernel, &target_test, &target_test).unwrap() * sd;
        let inv = k.try_inverse().unwrap();
        let mean_o = k_star.transpose() * &inv * &y_t;
        let cov_o = k_ss - k_star.transpose() * inv * k_star;
        assert_abs_diff_eq!(&post.mean, &mean_o, epsilon = 1e-8);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(post.cov[(i, j)], cov_o[(i, j)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn init_sets_documented_values() {
        let dims = ModelDims::new(vec![2, 3], 4);
        let mut rng = crate::rng::stream(7, "init", 0);
        let m = ModelParams::init(&dims, &mut rng);
        assert_eq!(m.transfer.rho, vec![1.0, 1.0]);
        assert_eq!(m.transfer.log_disc_scale, 0.0);
        assert_eq!(m.transfer.source_kernels[0].log_amplitude, 0.0);
        assert_eq!(m.transfer.source_kernels[1].log_lengthscales, vec![0.0; 3]);
        assert_eq!(m.transfer.disc_kernel.dim(), 4);
        for ln in &m.transfer.log_noise {
            let s = (0.5 * ln).exp();
            assert!((NOISE_STD_FLOOR..=1.0).contains(&s), "noise std {s}");
        }
        assert_eq!(m.priors[0].mean_weight.shape(), (2, 4));
        assert_eq!(m.recogs[1].hidden_weight.shape(), (16, 2 * 4 + 3 + 3));
        assert_abs_diff_eq!(m.priors[0].logvar_bias[0], crate::alignnet::PRIOR_LOGVAR_BIAS_INIT);
        assert_abs_diff_eq!(m.recogs[0].logvar_bias[0], crate::alignnet::RECOG_LOGVAR_BIAS_INIT);
        // deterministic given the stream
        let mut rng2 = crate::rng::stream(7, "init", 0);
        let m2 = ModelParams::init(&dims, &mut rng2);
        assert_eq!(m, m2);
    }

    fn tiny_variance_model() -> (ModelParams, StandardizedTransfer) {
        // Alignment variances sit at the clamp floor (std exp(−3) ≈ 0.05) and
        // the source kernel is nearly flat at that scale (length-scale e^3.4),
        // so every draw is equivalent to its mean; mc_predict must then
        // coincide with the deterministic posterior.
        let source = Dataset::new(
            DMatrix::from_row_slice(4, 1, &[0.0, 0.4, 0.7, 1.0]),
            DVector::from_vec(vec![0.1, 0.5, 0.2, -0.3]),
            DomainId::Source(1),
        )
        .unwrap();
        let target = Dataset::new(
            DMatrix::from_row_slice(3, 1, &[0.1, 0.5, 0.9]),
            DVector::from_vec(vec![0.2, 0.1, -0.2]),
            DomainId::Target,
        )
        .unwrap();
        let std = standardize_transfer(&[source], &target);

        let mut prior = PriorNetParams::identity(1, -40.0);
        prior.mean_weight[(0, 0)] = 0.8;
        prior.mean_bias[0] = 0.1;
        let recog = RecogNetParams {
            hidden_weight: DMatrix::zeros(4, 6),
            hidden_bias: DVector::zeros(4),
            mean_weight: DMatrix::zeros(1, 4),
            mean_bias: DVector::from_vec(vec![0.3]),
            logvar_weight: DMatrix::zeros(1, 4),
            // clamps to the floor
            logvar_bias: DVector::from_vec(vec![-50.0]),
            alpha: 1.0,
        };
        let model = ModelParams {
            transfer: TransferParams {
                rho: vec![0.9],
                log_noise: vec![-2.0, -2.5],
                log_disc_scale: -0.7,
                source_kernels: vec![KernelParams::new(0.0, vec![3.4])],
                disc_kernel: KernelParams::unit(1),
            },
            priors: vec![prior],
            recogs: vec![recog],
        };
        (model, std)
    }

    #[test]
    fn mc_predict_degenerates_to_exact_posterior_for_tiny_variances() {
        let (model, std) = tiny_variance_model();
        let x_test = DMatrix::from_row_slice(2, 1, &[0.3, 0.6]);
        let mut rng = crate::rng::stream(42, "mc-predict", 0);
        let mc = mc_predict(&model, &std, &x_test, 3, 3, &mut rng).unwrap();

        // deterministic counterpart: means of both distributions
        let q = recog_forward(
            &model.recogs[0],
            &recog_inputs(&std.data.target, &std.data.sources[0], 1.0),
        )
        .unwrap();
        let p = prior_forward(&model.priors[0], &x_test).unwrap();
        let src_inputs = [std.data.sources[0].inputs.clone()];
        let aligned = [q.means.clone()];
        let inp = JointInputs {
            source_inputs: &src_inputs,
            aligned: &aligned,
            target_inputs: &std.data.target.inputs,
        };
        let y = std.data.stacked_outputs();
        let exact =
            predictive_posterior(&model.transfer, &inp, &y, &[p.means.clone()], &x_test).unwrap();
        // stds sit at the clamp floor exp(−3) ≈ 0.05, but the flat source
        // kernel renders that jitter invisible at the few-1e-3 scale
        assert_abs_diff_eq!(&mc.mean, &exact.mean, epsilon = 1e-2);
        for i in 0..2 {
            assert_abs_diff_eq!(mc.cov[(i, i)], exact.cov[(i, i)], epsilon = 1e-2);
        }
    }

    #[test]
    fn mc_predict_is_deterministic_given_stream() {
        let (model, std) = tiny_variance_model();
        let x_test = DMatrix::from_row_slice(2, 1, &[0.2, 0.8]);
        let mut r1 = crate::rng::stream(43, "mc-predict", 1);
        let mut r2 = crate::rng::stream(43, "mc-predict", 1);
        let a = mc_predict(&model, &std, &x_test, 4, 2, &mut r1).unwrap();
        let b = mc_predict(&model, &std, &x_test, 4, 2, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mc_predict_rejects_zero_draws() {
        let (model, std) = tiny_variance_model();
        let x_test = DMatrix::from_row_slice(1, 1, &[0.5]);
        let mut rng = crate::rng::stream(44, "mc-predict", 2);
        assert!(mc_predict(&model, &std, &x_test, 0, 1, &mut rng).is_err());
    }
}
