//! Trainable alignment models between the target input space and each source
//! input space.
//!
//! For every source j, a prior network maps a target input x_T to a diagonal
//! Gaussian over the aligned input z_j ∈ source-j space, and a recognition
//! network encodes (x_T, y_T, dataset summaries) into a variational posterior
//! over the same z_j. Both produce a [`GaussianBatch`]; reparameterized draws
//! feed the joint GP likelihood, and the closed-form KL between them
//! regularizes the alignment. Reference mappings provide the physical-insight
//! targets the prior means are pulled toward.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, StandardizationState};
use crate::{Error, Result};

/// Activation applied to the prior mean head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    pub fn apply(self, m: DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Identity => m,
            Activation::Tanh => m.map(f64::tanh),
        }
    }
}

/// Default hidden width of the recognition network.
pub const DEFAULT_HIDDEN_WIDTH: usize = 16;
/// Default source-weighting coefficient α_j in the recognition input.
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Alignment log-variances (prior and recognition heads alike) are clamped to
/// this range before exponentiation, guarding the KL term and the sampler
/// against degenerate or overflowing variances.
pub const LOGVAR_CLAMP: (f64, f64) = (-10.0, 10.0);
/// Initial bias of the prior log-variance head. Inputs are standardized to
/// unit scale before training, so the initial alignment std exp(−3) ≈ 0.05
/// is a few percent of the input range; wide initial draws swamp the
/// cross-covariances and stall the transfer weights.
pub const PRIOR_LOGVAR_BIAS_INIT: f64 = -6.0;
/// Initial bias of the recognition log-variance head; slightly wider than the
/// prior head so the data-conditioned posterior starts with room to move.
pub const RECOG_LOGVAR_BIAS_INIT: f64 = -4.0;
/// Std of the Gaussian used to initialize network weights.
pub const WEIGHT_INIT_STD: f64 = 0.1;

/// Prior alignment network for one source: two affine heads over x_T.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorNetParams {
    /// d_Sj × d_T
    pub mean_weight: DMatrix<f64>,
    /// d_Sj
    pub mean_bias: DVector<f64>,
    /// d_Sj × d_T
    pub logvar_weight: DMatrix<f64>,
    /// d_Sj
    pub logvar_bias: DVector<f64>,
    pub activation: Activation,
}

impl PriorNetParams {
    pub fn source_dim(&self) -> usize {
        self.mean_weight.nrows()
    }

    pub fn target_dim(&self) -> usize {
        self.mean_weight.ncols()
    }

    /// Identity-alignment configuration (square case): means reproduce x_T,
    /// log-variances are the given constant.
    pub fn identity(dim: usize, logvar: f64) -> Self {
        PriorNetParams {
            mean_weight: DMatrix::identity(dim, dim),
            mean_bias: DVector::zeros(dim),
            logvar_weight: DMatrix::zeros(dim, dim),
            logvar_bias: DVector::from_element(dim, logvar),
            activation: Activation::Identity,
        }
    }
}

/// Recognition (encoder) network for one source: one tanh hidden layer with
/// affine mean and log-variance heads.
#[derive(Clone, Debug, PartialEq)]
pub struct RecogNetParams {
    /// h × u_dim
    pub hidden_weight: DMatrix<f64>,
    /// h
    pub hidden_bias: DVector<f64>,
    /// d_Sj × h
    pub mean_weight: DMatrix<f64>,
    /// d_Sj
    pub mean_bias: DVector<f64>,
    /// d_Sj × h
    pub logvar_weight: DMatrix<f64>,
    /// d_Sj
    pub logvar_bias: DVector<f64>,
    /// Source-weighting coefficient α_j applied to the source summary stats.
    pub alpha: f64,
}

impl RecogNetParams {
    pub fn hidden_width(&self) -> usize {
        self.hidden_weight.nrows()
    }

    pub fn source_dim(&self) -> usize {
        self.mean_weight.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.hidden_weight.ncols()
    }
}

/// A batch of independent diagonal Gaussians: one row per target sample, one
/// column per aligned-input dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBatch {
    pub means: DMatrix<f64>,
    pub stds: DMatrix<f64>,
}

impl GaussianBatch {
    fn check(&self) -> Result<()> {
        if self.means.shape() != self.stds.shape() {
            return Err(Error::InvalidState("means/stds shape mismatch".into()));
        }
        if !self.stds.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidState("non-positive or non-finite std".into()));
        }
        Ok(())
    }
}

fn affine_rows(x: &DMatrix<f64>, weight: &DMatrix<f64>, bias: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x * weight.transpose();
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            out[(i, j)] += bias[j];
        }
    }
    out
}

/// Evaluate the prior network on a batch of target inputs (one per row).
///
/// Means are ψ(x_T A₁ᵀ + b₁); stds are exp(½(x_T A₂ᵀ + b₂)) with the
/// log-variance clamped to `LOGVAR_CLAMP`.
pub fn prior_forward(p: &PriorNetParams, x_t: &DMatrix<f64>) -> Result<GaussianBatch> {
    if x_t.ncols() != p.target_dim() {
        return Err(Error::invalid_argument(format!(
            "prior network expects {} input dims, got {}",
            p.target_dim(),
            x_t.ncols()
        )));
    }
    let means = p.activation.apply(affine_rows(x_t, &p.mean_weight, &p.mean_bias));
    let logvar = affine_rows(x_t, &p.logvar_weight, &p.logvar_bias)
        .map(|v| v.clamp(LOGVAR_CLAMP.0, LOGVAR_CLAMP.1));
    let stds = logvar.map(|v| (0.5 * v).exp());
    Ok(GaussianBatch { means, stds })
}

/// Composite recognition input for one target sample and one source:
/// (x_T, y_T, x̄_T, ȳ_T, α·x̄_j, α·ȳ_j), of length 2·d_T + d_Sj + 3.
#[allow(clippy::too_many_arguments)]
pub fn recog_input(
    x_ti: &[f64],
    y_ti: f64,
    target_input_mean: &[f64],
    target_output_mean: f64,
    source_input_mean: &[f64],
    source_output_mean: f64,
    alpha: f64,
) -> DVector<f64> {
    let mut u = Vec::with_capacity(2 * x_ti.len() + source_input_mean.len() + 3);
    u.extend_from_slice(x_ti);
    u.push(y_ti);
    u.extend_from_slice(target_input_mean);
    u.push(target_output_mean);
    u.extend(source_input_mean.iter().map(|v| alpha * v));
    u.push(alpha * source_output_mean);
    DVector::from_vec(u)
}

/// Stack the recognition inputs of every target sample for one source.
pub fn recog_inputs(target: &Dataset, source: &Dataset, alpha: f64) -> DMatrix<f64> {
    let x_mean: Vec<f64> = target.inputs.row_mean().iter().copied().collect();
    let y_mean = target.outputs.mean();
    let s_mean: Vec<f64> = source.inputs.row_mean().iter().copied().collect();
    let sy_mean = source.outputs.mean();
    let u_dim = 2 * target.dim() + source.dim() + 3;
    let mut u = DMatrix::zeros(target.n(), u_dim);
    for i in 0..target.n() {
        let x_i: Vec<f64> = target.inputs.row(i).iter().copied().collect();
        let row = recog_input(&x_i, target.outputs[i], &x_mean, y_mean, &s_mean, sy_mean, alpha);
        u.row_mut(i).copy_from(&row.transpose());
    }
    u
}

/// Evaluate the recognition network on a batch of composite inputs.
pub fn recog_forward(p: &RecogNetParams, u: &DMatrix<f64>) -> Result<GaussianBatch> {
    if u.ncols() != p.input_dim() {
        return Err(Error::invalid_argument(format!(
            "recognition network expects {} input dims, got {}",
            p.input_dim(),
            u.ncols()
        )));
    }
    let hidden = affine_rows(u, &p.hidden_weight, &p.hidden_bias).map(f64::tanh);
    let means = affine_rows(&hidden, &p.mean_weight, &p.mean_bias);
    let logvar = affine_rows(&hidden, &p.logvar_weight, &p.logvar_bias)
        .map(|v| v.clamp(LOGVAR_CLAMP.0, LOGVAR_CLAMP.1));
    let stds = logvar.map(|v| (0.5 * v).exp());
    Ok(GaussianBatch { means, stds })
}

/// Reparameterized draw: means + stds ⊙ eps.
pub fn reparam_sample(g: &GaussianBatch, eps: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(g.means.shape(), eps.shape(), "eps shape mismatch");
    &g.means + g.stds.component_mul(eps)
}

/// Closed-form KL divergence KL(q ‖ p) between two batches of diagonal
/// Gaussians, summed over samples and dimensions:
/// ½·Σ [ln(σ_p²/σ_q²) − 1 + σ_q²/σ_p² + (μ_q − μ_p)²/σ_p²].
pub fn kl_factorized(q: &GaussianBatch, p: &GaussianBatch) -> Result<f64> {
    q.check()?;
    p.check()?;
    if q.means.shape() != p.means.shape() {
        return Err(Error::invalid_argument("KL operands differ in shape"));
    }
    let mut total = 0.0;
    for i in 0..q.means.nrows() {
        for j in 0..q.means.ncols() {
            let vq = q.stds[(i, j)] * q.stds[(i, j)];
            let vp = p.stds[(i, j)] * p.stds[(i, j)];
            let dm = q.means[(i, j)] - p.means[(i, j)];
            total += 0.5 * ((vp / vq).ln() - 1.0 + vq / vp + dm * dm / vp);
        }
    }
    Ok(total)
}

/// Physical-insight penalty: λ·Σ_j ‖prior_means_j − reference_j‖_F.
pub fn phyr_penalty(
    prior_means: &[DMatrix<f64>],
    refs: &[DMatrix<f64>],
    lambda: f64,
) -> Result<f64> {
    if prior_means.len() != refs.len() {
        return Err(Error::invalid_argument("one reference mapping required per source"));
    }
    let mut total = 0.0;
    for (m, r) in prior_means.iter().zip(refs) {
        if m.shape() != r.shape() {
            return Err(Error::invalid_argument(format!(
                "prior means {:?} vs reference {:?}",
                m.shape(),
                r.shape()
            )));
        }
        total += (m - r).norm();
    }
    Ok(lambda * total)
}

/// Reference-mapping specification as it appears in config files. Affine,
/// subset, and table forms are given in raw (unstandardized) coordinates;
/// `imc` asks for a data-driven fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReferenceMapSpec {
    Affine { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    Subset { indices: Vec<usize> },
    Imc,
    Table { values: Vec<Vec<f64>> },
}

/// A reference mapping resolved against concrete training data: the mapped
/// values r_{0j}(X_T) for every target training input, in the source's
/// standardized input space.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceMapping {
    pub values: DMatrix<f64>,
    pub spec: ReferenceMapSpec,
}

/// Resolve a reference spec to standardized mapped values at the target
/// training inputs. `target_raw` is n_T × d_T in raw coordinates; the result
/// is n_T × d_Sj in source-standardized coordinates. `Imc` specs must be
/// resolved with [`imc_reference`] beforehand and are rejected here.
pub fn resolve_reference(
    spec: &ReferenceMapSpec,
    target_raw: &DMatrix<f64>,
    source_state: &StandardizationState,
) -> Result<ReferenceMapping> {
    let d_s = source_state.input_lower.len();
    let raw_values = match spec {
        ReferenceMapSpec::Affine { matrix, offset } => {
            if matrix.len() != d_s || offset.len() != d_s {
                return Err(Error::invalid_argument(format!(
                    "affine reference must output {d_s} dims"
                )));
            }
            let mut out = DMatrix::zeros(target_raw.nrows(), d_s);
            for i in 0..target_raw.nrows() {
                for (r, row) in matrix.iter().enumerate() {
                    if row.len() != target_raw.ncols() {
                        return Err(Error::invalid_argument(
                            "affine reference matrix width must equal target dim",
                        ));
                    }
                    let mut acc = offset[r];
                    for (c, w) in row.iter().enumerate() {
                        acc += w * target_raw[(i, c)];
                    }
                    out[(i, r)] = acc;
                }
            }
            out
        }
        ReferenceMapSpec::Subset { indices } => {
            if indices.len() != d_s {
                return Err(Error::invalid_argument(format!(
                    "subset reference must pick {d_s} coordinates"
                )));
            }
            let mut out = DMatrix::zeros(target_raw.nrows(), d_s);
            for (r, &idx) in indices.iter().enumerate() {
                if idx >= target_raw.ncols() {
                    return Err(Error::invalid_argument(format!(
                        "subset index {idx} out of range for target dim {}",
                        target_raw.ncols()
                    )));
                }
                for i in 0..target_raw.nrows() {
                    out[(i, r)] = target_raw[(i, idx)];
                }
            }
            out
        }
        ReferenceMapSpec::Table { values } => {
            if values.len() != target_raw.nrows() {
                return Err(Error::invalid_argument("table reference must cover every sample"));
            }
            let mut out = DMatrix::zeros(target_raw.nrows(), d_s);
            for (i, row) in values.iter().enumerate() {
                if row.len() != d_s {
                    return Err(Error::invalid_argument("table reference row width mismatch"));
                }
                for (j, v) in row.iter().enumerate() {
                    out[(i, j)] = *v;
                }
            }
            out
        }
        ReferenceMapSpec::Imc => {
            return Err(Error::invalid_argument(
                "imc reference must be fitted from data before resolution",
            ));
        }
    };
    Ok(ReferenceMapping { values: source_state.standardize_inputs(&raw_values), spec: spec.clone() })
}

/// Number of multi-start restarts in the IMC map fit.
pub const IMC_RESTARTS: usize = 8;
/// Adam steps per IMC restart.
pub const IMC_STEPS: usize = 2000;
/// Adam learning rate for the IMC fit.
pub const IMC_LEARNING_RATE: f64 = 1e-2;

/// Fit the input-mapping-calibration affine map for one source: find (A, b)
/// minimizing Σᵢ (y_T⁽ⁱ⁾ − ŷ_S(A x̃_T⁽ⁱ⁾ + b))², where ŷ_S is the source
/// surrogate's mean and x̃_T are standardized target inputs. The map operates
/// between standardized input spaces; the squared error is taken on raw
/// outputs. Nonconvex through the surrogate, so multi-start Adam: random
/// near-zero initializations plus a truncated-identity start when the target
/// has at least the source's dimension. Returns the resolved mapping.
pub fn imc_reference(
    target_ds: &Dataset,
    surrogate: &crate::baselines::SingleGP,
    seed: u64,
) -> Result<ReferenceMapping> {
    let (target_std, _) = crate::dataio::standardize(target_ds);
    let d_t = target_ds.dim();
    let d_s = surrogate.train_inputs.ncols();
    let n_params = d_s * d_t + d_s;

    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..IMC_RESTARTS {
        let mut params = vec![0.0; n_params];
        if restart == 0 && d_t >= d_s {
            // truncated identity block: A = [I_{d_s} 0], b = 0
            for r in 0..d_s {
                params[r * d_t + r] = 1.0;
            }
        } else {
            let mut rng = crate::rng::stream(seed, "imc-restart", restart as u64);
            let normal = Normal::new(0.0, WEIGHT_INIT_STD).expect("valid normal");
            for p in params.iter_mut().take(d_s * d_t) {
                *p = normal.sample(&mut rng);
            }
        }

        let mut adam = crate::optim::AdamState::new(n_params, IMC_LEARNING_RATE);
        let mut diverged = false;
        let mut last_loss = f64::INFINITY;
        for _ in 0..IMC_STEPS {
            let (loss, grad) = imc_loss_grad(&params, &target_std.inputs, &target_ds.outputs, surrogate);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                diverged = true;
                break;
            }
            adam.step(&mut params, &grad);
            last_loss = loss;
        }
        if diverged {
            continue;
        }
        let (final_loss, _) =
            imc_loss_grad(&params, &target_std.inputs, &target_ds.outputs, surrogate);
        let loss = if final_loss.is_finite() { final_loss } else { last_loss };
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, params));
        }
    }

    let (_, params) = best.ok_or_else(|| {
        Error::numerical("every IMC restart diverged to a non-finite objective")
    })?;
    let (a, b) = unpack_affine(&params, d_s, d_t);
    let values = affine_rows(&target_std.inputs, &a, &b);
    let matrix: Vec<Vec<f64>> = (0..d_s).map(|r| a.row(r).iter().copied().collect()).collect();
    Ok(ReferenceMapping {
        values,
        spec: ReferenceMapSpec::Affine {
            matrix,
            offset: b.iter().copied().collect(),
        },
    })
}

fn unpack_affine(params: &[f64], d_s: usize, d_t: usize) -> (DMatrix<f64>, DVector<f64>) {
    let a = crate::tape::unflatten_rm(&params[0..d_s * d_t], d_s, d_t);
    let b = DVector::from_column_slice(&params[d_s * d_t..]);
    (a, b)
}

/// Squared-error objective of the IMC map and its gradient w.r.t. (A, b).
pub fn imc_loss_grad(
    params: &[f64],
    target_inputs_std: &DMatrix<f64>,
    target_outputs_raw: &DVector<f64>,
    surrogate: &crate::baselines::SingleGP,
) -> (f64, Vec<f64>) {
    use crate::tape::Tape;
    let d_s = surrogate.train_inputs.ncols();
    let d_t = target_inputs_std.ncols();
    let (a, b) = unpack_affine(params, d_s, d_t);

    let mut tape = Tape::new();
    let a_node = tape.leaf(a);
    let b_node = tape.leaf(DMatrix::from_row_slice(1, d_s, b.as_slice()));
    let x = tape.leaf(target_inputs_std.clone());
    let a_t = tape.transpose(a_node);
    let mapped_raw = tape.matmul(x, a_t);
    let mapped = tape.add_row_vec(mapped_raw, b_node);

    let log_amp = tape.leaf_scalar(surrogate.kernel.log_amplitude);
    let log_ls = tape.leaf_row(&surrogate.kernel.log_lengthscales);
    let train = tape.leaf(surrogate.train_inputs.clone());
    let k_star = tape.se_kernel(log_amp, log_ls, mapped, train);
    let alpha = tape.leaf(DMatrix::from_column_slice(surrogate.alpha.len(), 1, surrogate.alpha.as_slice()));
    let mean_std = tape.matmul(k_star, alpha);
    let mean_scaled = tape.scale(mean_std, surrogate.state.output_std);
    let mean_raw = tape.add_scalar(mean_scaled, surrogate.state.output_mean);

    let y = tape.leaf(DMatrix::from_column_slice(target_outputs_raw.len(), 1, target_outputs_raw.as_slice()));
    let diff = tape.sub(mean_raw, y);
    let sq = tape.mul_elem(diff, diff);
    let loss = tape.sum(sq);

    let grads = tape.backward(loss);
    let ga = grads.grad(a_node, d_s, d_t);
    let gb = grads.grad(b_node, 1, d_s);
    let mut grad = crate::tape::flatten_rm(&ga);
    grad.extend(gb.iter().copied());
    (tape.scalar_value(loss), grad)
}

/// Draw the prior-network weight initialization for one source.
pub fn init_prior(
    d_s: usize,
    d_t: usize,
    activation: Activation,
    rng: &mut impl Rng,
) -> PriorNetParams {
    let normal = Normal::new(0.0, WEIGHT_INIT_STD).expect("valid normal");
    PriorNetParams {
        mean_weight: DMatrix::from_fn(d_s, d_t, |_, _| normal.sample(rng)),
        mean_bias: DVector::zeros(d_s),
        logvar_weight: DMatrix::from_fn(d_s, d_t, |_, _| normal.sample(rng)),
        logvar_bias: DVector::from_element(d_s, PRIOR_LOGVAR_BIAS_INIT),
        activation,
    }
}

/// Draw the recognition-network weight initialization for one source.
pub fn init_recog(
    d_s: usize,
    d_t: usize,
    hidden_width: usize,
    alpha: f64,
    rng: &mut impl Rng,
) -> RecogNetParams {
    let normal = Normal::new(0.0, WEIGHT_INIT_STD).expect("valid normal");
    let u_dim = 2 * d_t + d_s + 3;
    RecogNetParams {
        hidden_weight: DMatrix::from_fn(hidden_width, u_dim, |_, _| normal.sample(rng)),
        hidden_bias: DVector::zeros(hidden_width),
        mean_weight: DMatrix::from_fn(d_s, hidden_width, |_, _| normal.sample(rng)),
        mean_bias: DVector::zeros(d_s),
        logvar_weight: DMatrix::from_fn(d_s, hidden_width, |_, _| normal.sample(rng)),
        logvar_bias: DVector::from_element(d_s, RECOG_LOGVAR_BIAS_INIT),
        alpha,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::DomainId;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn prior_identity_configuration_reproduces_inputs() {
        let p = PriorNetParams::identity(2, -20.0);
        let x = DMatrix::from_row_slice(3, 2, &[0.1, 0.9, 0.4, 0.2, 0.7, 0.5]);
        let g = prior_forward(&p, &x).unwrap();
        assert_abs_diff_eq!(&g.means, &x, epsilon = 1e-15);
        // bias −20 clamps to the floor → std exp(LOGVAR_CLAMP.0 / 2)
        for s in g.stds.iter() {
            assert_abs_diff_eq!(*s, (0.5 * LOGVAR_CLAMP.0).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn prior_zero_weights_yield_bias_rows() {
        let p = PriorNetParams {
            mean_weight: DMatrix::zeros(2, 3),
            mean_bias: DVector::from_vec(vec![1.5, -0.5]),
            logvar_weight: DMatrix::zeros(2, 3),
            logvar_bias: DVector::zeros(2),
            activation: Activation::Identity,
        };
        let x = DMatrix::from_fn(4, 3, |i, j| (i + j) as f64);
        let g = prior_forward(&p, &x).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(g.means[(i, 0)], 1.5);
            assert_abs_diff_eq!(g.means[(i, 1)], -0.5);
            assert_abs_diff_eq!(g.stds[(i, 0)], 1.0);
        }
    }

    #[test]
    fn prior_batched_matches_per_row() {
        let mut rng = crate::rng::stream(31, "alignnet-test", 0);
        let p = init_prior(2, 3, Activation::Tanh, &mut rng);
        let x = DMatrix::from_fn(5, 3, |_, _| rng.random::<f64>());
        let g = prior_forward(&p, &x).unwrap();
        for i in 0..5 {
            let row = DMatrix::from_fn(1, 3, |_, j| x[(i, j)]);
            let gi = prior_forward(&p, &row).unwrap();
            for j in 0..2 {
                assert_abs_diff_eq!(g.means[(i, j)], gi.means[(0, j)], epsilon = 1e-14);
                assert_abs_diff_eq!(g.stds[(i, j)], gi.stds[(0, j)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn recog_input_layout() {
        // d_T = 2, d_Sj = 1 → length 2·2 + 1 + 3 = 8
        let u = recog_input(&[1.0, 1.0], 1.0, &[1.0, 1.0], 1.0, &[1.0], 1.0, 1.0);
        assert_eq!(u.len(), 8);
        for v in u.iter() {
            assert_abs_diff_eq!(*v, 1.0);
        }
        // α = 0 zeroes the source summary block
        let u0 = recog_input(&[1.0, 1.0], 1.0, &[1.0, 1.0], 1.0, &[1.0], 1.0, 0.0);
        assert_abs_diff_eq!(u0[6], 0.0);
        assert_abs_diff_eq!(u0[7], 0.0);
        assert_abs_diff_eq!(u0[5], 1.0);
    }

    #[test]
    fn recog_zero_params_standard_normal() {
        let p = RecogNetParams {
            hidden_weight: DMatrix::zeros(4, 8),
            hidden_bias: DVector::zeros(4),
            mean_weight: DMatrix::zeros(1, 4),
            mean_bias: DVector::zeros(1),
            logvar_weight: DMatrix::zeros(1, 4),
            logvar_bias: DVector::zeros(1),
            alpha: 1.0,
        };
        let u = DMatrix::from_fn(3, 8, |i, j| (i * 8 + j) as f64 * 0.1);
        let g = recog_forward(&p, &u).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(g.means[(i, 0)], 0.0);
            assert_abs_diff_eq!(g.stds[(i, 0)], 1.0);
        }
    }

    #[test]
    fn recog_batched_matches_per_row() {
        let mut rng = crate::rng::stream(31, "alignnet-test", 1);
        let p = init_recog(2, 2, 4, 1.0, &mut rng);
        let u = DMatrix::from_fn(6, p.input_dim(), |_, _| rng.random::<f64>() - 0.5);
        let g = recog_forward(&p, &u).unwrap();
        for i in 0..6 {
            let row = DMatrix::from_fn(1, p.input_dim(), |_, j| u[(i, j)]);
            let gi = recog_forward(&p, &row).unwrap();
            for j in 0..2 {
                assert_abs_diff_eq!(g.means[(i, j)], gi.means[(0, j)], epsilon = 1e-14);
                assert_abs_diff_eq!(g.stds[(i, j)], gi.stds[(0, j)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn recog_inputs_uses_dataset_means() {
        let target = Dataset::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 2.0]),
            DVector::from_vec(vec![1.0, 3.0]),
            DomainId::Target,
        )
        .unwrap();
        let source = Dataset::new(
            DMatrix::from_row_slice(2, 1, &[2.0, 4.0]),
            DVector::from_vec(vec![-1.0, 1.0]),
            DomainId::Source(1),
        )
        .unwrap();
        let u = recog_inputs(&target, &source, 0.5);
        assert_eq!(u.shape(), (2, 8));
        // row 0: x=(0,0), y=1, x̄=(0.5,1), ȳ=2, α·x̄_s=1.5, α·ȳ_s=0
        let expected = [0.0, 0.0, 1.0, 0.5, 1.0, 2.0, 1.5, 0.0];
        for (j, e) in expected.iter().enumerate() {
            assert_abs_diff_eq!(u[(0, j)], *e, epsilon = 1e-14);
        }
    }

    #[test]
    fn reparam_zero_eps_returns_means() {
        let g = GaussianBatch {
            means: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            stds: DMatrix::from_element(2, 2, 0.5),
        };
        let z = reparam_sample(&g, &DMatrix::zeros(2, 2));
        assert_abs_diff_eq!(&z, &g.means, epsilon = 1e-15);
        let z1 = reparam_sample(&g, &DMatrix::from_element(2, 2, 1.0));
        assert_abs_diff_eq!(z1[(0, 0)], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn reparam_empirical_mean_near_means() {
        let mut rng = crate::rng::stream(32, "alignnet-test", 2);
        let g = GaussianBatch {
            means: DMatrix::from_row_slice(1, 2, &[0.7, -0.3]),
            stds: DMatrix::from_row_slice(1, 2, &[0.4, 1.2]),
        };
        let draws = 100_000;
        let mut acc = [0.0f64; 2];
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..draws {
            let eps = DMatrix::from_fn(1, 2, |_, _| normal.sample(&mut rng));
            let z = reparam_sample(&g, &eps);
            acc[0] += z[(0, 0)];
            acc[1] += z[(0, 1)];
        }
        for j in 0..2 {
            let emp = acc[j] / draws as f64;
            let se = g.stds[(0, j)] / (draws as f64).sqrt();
            assert!(
                (emp - g.means[(0, j)]).abs() < 3.0 * se,
                "empirical {emp} vs {} (3se {})",
                g.means[(0, j)],
                3.0 * se
            );
        }
    }

    /// Gradients of a reparameterized draw: identity w.r.t. means, diag(eps)
    /// w.r.t. stds.
    #[test]
    fn reparam_gradients_through_tape() {
        use crate::tape::Tape;
        let mut rng = crate::rng::stream(32, "alignnet-test", 3);
        let eps = DMatrix::from_fn(2, 3, |_, _| rng.random::<f64>() - 0.5);
        let w = DMatrix::from_fn(2, 3, |_, _| rng.random::<f64>() - 0.5);
        let mut tape = Tape::new();
        let means = tape.leaf(DMatrix::from_fn(2, 3, |_, _| rng.random::<f64>()));
        let stds = tape.leaf(DMatrix::from_fn(2, 3, |_, _| rng.random::<f64>() + 0.5));
        let eps_n = tape.leaf(eps.clone());
        let noise = tape.mul_elem(stds, eps_n);
        let z = tape.add(means, noise);
        let w_n = tape.leaf(w.clone());
        let weighted = tape.mul_elem(z, w_n);
        let root = tape.sum(weighted);
        let grads = tape.backward(root);
        assert_abs_diff_eq!(&grads.grad(means, 2, 3), &w, epsilon = 1e-14);
        assert_abs_diff_eq!(&grads.grad(stds, 2, 3), &w.component_mul(&eps), epsilon = 1e-14);
    }

    #[test]
    fn kl_identical_batches_is_zero() {
        let g = GaussianBatch {
            means: DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 0.0, 2.0]),
            stds: DMatrix::from_element(2, 2, 0.7),
        };
        assert_abs_diff_eq!(kl_factorized(&g, &g).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_unit_variance_mean_shift() {
        // q = N(0,1), p = N(1,1) → ½
        let q = GaussianBatch {
            means: DMatrix::zeros(1, 1),
            stds: DMatrix::from_element(1, 1, 1.0),
        };
        let p = GaussianBatch {
            means: DMatrix::from_element(1, 1, 1.0),
            stds: DMatrix::from_element(1, 1, 1.0),
        };
        assert_abs_diff_eq!(kl_factorized(&q, &p).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn kl_nonnegative_on_random_batches() {
        let mut rng = crate::rng::stream(33, "alignnet-test", 4);
        for _ in 0..100 {
            let shape = (rng.random_range(1..4usize), rng.random_range(1..4usize));
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| GaussianBatch {
                means: DMatrix::from_fn(shape.0, shape.1, |_, _| rng.random::<f64>() * 4.0 - 2.0),
                stds: DMatrix::from_fn(shape.0, shape.1, |_, _| rng.random::<f64>() * 2.0 + 0.05),
            };
            let q = mk(&mut rng);
            let p = mk(&mut rng);
            assert!(kl_factorized(&q, &p).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = crate::rng::stream(33, "alignnet-test", 5);
        let q = GaussianBatch {
            means: DMatrix::from_row_slice(1, 2, &[0.4, -0.2]),
            stds: DMatrix::from_row_slice(1, 2, &[0.8, 1.3]),
        };
        let p = GaussianBatch {
            means: DMatrix::from_row_slice(1, 2, &[-0.1, 0.5]),
            stds: DMatrix::from_row_slice(1, 2, &[1.1, 0.6]),
        };
        let closed = kl_factorized(&q, &p).unwrap();
        // MC estimate of E_q[ln q − ln p]
        let draws = 200_000;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..draws {
            let mut term = 0.0;
            for j in 0..2 {
                let z = q.means[(0, j)] + q.stds[(0, j)] * normal.sample(&mut rng);
                let lq = -0.5 * ((z - q.means[(0, j)]) / q.stds[(0, j)]).powi(2)
                    - q.stds[(0, j)].ln();
                let lp = -0.5 * ((z - p.means[(0, j)]) / p.stds[(0, j)]).powi(2)
                    - p.stds[(0, j)].ln();
                term += lq - lp;
            }
            sum += term;
            sum_sq += term * term;
        }
        let mean = sum / draws as f64;
        let var = (sum_sq / draws as f64 - mean * mean).max(0.0);
        let se = (var / draws as f64).sqrt();
        assert!(
            (closed - mean).abs() < 3.0 * se.max(1e-6),
            "closed {closed} vs MC {mean} ± {se}"
        );
    }

    #[test]
    fn kl_rejects_nonpositive_std() {
        let q = GaussianBatch { means: DMatrix::zeros(1, 1), stds: DMatrix::zeros(1, 1) };
        let p = GaussianBatch {
            means: DMatrix::zeros(1, 1),
            stds: DMatrix::from_element(1, 1, 1.0),
        };
        assert!(kl_factorized(&q, &p).is_err());
    }

    #[test]
    fn phyr_zero_at_reference() {
        let m = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let v = phyr_penalty(&[m.clone()], &[m], 2.0).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn phyr_frobenius_of_ones() {
        // difference all ones, 4×2 → ‖·‖_F = √8; λ = 0.5 → 0.5·√8
        let m = DMatrix::from_element(4, 2, 1.0);
        let r = DMatrix::zeros(4, 2);
        let v = phyr_penalty(&[m.clone()], &[r.clone()], 0.5).unwrap();
        assert_abs_diff_eq!(v, 0.5 * 8.0f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(phyr_penalty(&[m.clone()], &[r.clone()], 0.0).unwrap(), 0.0);
        // linear in λ
        let v2 = phyr_penalty(&[m], &[r], 1.0).unwrap();
        assert_abs_diff_eq!(v2, 2.0 * v, epsilon = 1e-12);
    }

    #[test]
    fn phyr_shape_mismatch_rejected() {
        let m = DMatrix::zeros(2, 2);
        let r = DMatrix::zeros(3, 2);
        assert!(phyr_penalty(&[m], &[r], 1.0).is_err());
    }

    #[test]
    fn reference_spec_round_trips_through_json() {
        let specs = vec![
            ReferenceMapSpec::Affine {
                matrix: vec![vec![1.0, 0.0], vec![0.0, 2.0]],
                offset: vec![0.5, -0.5],
            },
            ReferenceMapSpec::Subset { indices: vec![0, 2] },
            ReferenceMapSpec::Imc,
            ReferenceMapSpec::Table { values: vec![vec![0.1], vec![0.2]] },
        ];
        for spec in specs {
            let text = serde_json::to_string(&spec).unwrap();
            let back: ReferenceMapSpec = serde_json::from_str(&text).unwrap();
            assert_eq!(back, spec);
        }
        let text = serde_json::to_string(&ReferenceMapSpec::Imc).unwrap();
        assert_eq!(text, r#"{"type":"imc"}"#);
    }

    #[test]
    fn resolve_subset_standardizes_with_source_bounds() {
        let target_raw = DMatrix::from_row_slice(2, 3, &[0.0, 5.0, 1.0, 2.0, 2.5, 0.0]);
        let source_state = StandardizationState {
            output_mean: 0.0,
            output_std: 1.0,
            input_lower: vec![0.0],
            input_upper: vec![5.0],
            degenerate_dims: vec![],
        };
        let spec = ReferenceMapSpec::Subset { indices: vec![1] };
        let mapping = resolve_reference(&spec, &target_raw, &source_state).unwrap();
        assert_abs_diff_eq!(mapping.values[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(mapping.values[(1, 0)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn resolve_affine_applies_in_raw_space() {
        let target_raw = DMatrix::from_row_slice(1, 2, &[2.0, 3.0]);
        let source_state = StandardizationState {
            output_mean: 0.0,
            output_std: 1.0,
            input_lower: vec![0.0, 0.0],
            input_upper: vec![10.0, 10.0],
            degenerate_dims: vec![],
        };
        let spec = ReferenceMapSpec::Affine {
            matrix: vec![vec![1.0, 1.0], vec![0.0, 2.0]],
            offset: vec![0.0, 1.0],
        };
        let mapping = resolve_reference(&spec, &target_raw, &source_state).unwrap();
        // raw values (5, 7) → standardized (0.5, 0.7)
        assert_abs_diff_eq!(mapping.values[(0, 0)], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(mapping.values[(0, 1)], 0.7, epsilon = 1e-14);
    }

    #[test]
    fn resolve_imc_spec_rejected() {
        let target_raw = DMatrix::zeros(1, 1);
        let source_state = StandardizationState {
            output_mean: 0.0,
            output_std: 1.0,
            input_lower: vec![0.0],
            input_upper: vec![1.0],
            degenerate_dims: vec![],
        };
        assert!(resolve_reference(&ReferenceMapSpec::Imc, &target_raw, &source_state).is_err());
    }
}
