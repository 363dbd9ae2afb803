//! Baseline methods: a target-only Gaussian process and input-mapping
//! calibration (source surrogate composed with a fitted affine input map,
//! plus a residual GP correction).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::dataio::{standardize, Dataset, StandardizationState, TransferData};
use crate::gpcore::PredictiveDistribution;
use crate::kernels::{kernel_matrix, KernelParams};
use crate::tape::{cholesky_with_jitter, Tape};
use crate::{Error, Result};

/// Multi-start count for the single-GP hyperparameter fit.
pub const TGP_RESTARTS: usize = 3;
/// Adam steps per restart.
pub const TGP_STEPS: usize = 2000;
/// Adam learning rate for the single-GP fit.
pub const TGP_LEARNING_RATE: f64 = 1e-2;

/// A fitted single-output GP with a squared-exponential ARD kernel, stored in
/// standardized coordinates together with the standardization that produced
/// them.
#[derive(Clone, Debug)]
pub struct SingleGP {
    pub kernel: KernelParams,
    /// log observation-noise variance (standardized output space).
    pub log_noise: f64,
    /// Standardized training inputs.
    pub train_inputs: DMatrix<f64>,
    /// (K + σ²I)⁻¹ ỹ.
    pub alpha: DVector<f64>,
    /// Cached factor of K + σ²I.
    pub chol: Cholesky<f64, Dyn>,
    /// Standardization of the training dataset.
    pub state: StandardizationState,
    /// Negative log marginal likelihood attained by the fit (standardized).
    pub nll: f64,
}

impl SingleGP {
    /// Latent predictive mean and covariance at standardized inputs, in
    /// standardized output space.
    pub fn predict_std(&self, x_std: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let k_star = kernel_matrix(&self.kernel, &self.train_inputs, x_std)?;
        let mean = k_star.transpose() * &self.alpha;
        let k_ss = kernel_matrix(&self.kernel, x_std, x_std)?;
        let solved = self.chol.solve(&k_star);
        let mut cov = k_ss - k_star.transpose() * solved;
        let cov_t = cov.transpose();
        cov += cov_t;
        cov *= 0.5;
        Ok((mean, cov))
    }

    /// Latent predictive distribution at raw inputs, in raw output space.
    pub fn predict(&self, x_raw: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        let x_std = self.state.standardize_inputs(x_raw);
        let (mean_std, cov_std) = self.predict_std(&x_std)?;
        Ok(PredictiveDistribution {
            mean: self.state.destandardize_outputs(&mean_std),
            cov: self.state.destandardize_cov(&cov_std),
        })
    }

    /// Observation-noise variance in raw output space.
    pub fn raw_noise_var(&self) -> f64 {
        self.log_noise.exp() * self.state.output_std * self.state.output_std
    }
}

/// Negative log marginal likelihood and its gradient w.r.t.
/// (log_amp, log_ls…, log_noise) for a single GP in standardized space.
fn single_gp_nll_grad(
    params: &[f64],
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    let d = x.ncols();
    let mut tape = Tape::new();
    let log_amp = tape.leaf_scalar(params[0]);
    let log_ls = tape.leaf_row(&params[1..1 + d]);
    let log_noise = tape.leaf_scalar(params[1 + d]);
    let xn = tape.leaf(x.clone());
    let k = tape.se_kernel(log_amp, log_ls, xn, xn);
    let noise = tape.exp(log_noise);
    let c = tape.add_scaled_eye(k, noise);
    let ll = tape.gauss_loglik(c, y)?;
    let root = tape.neg(ll);
    let grads = tape.backward(root);
    let mut g = vec![grads.grad(log_amp, 1, 1)[(0, 0)]];
    let gl = grads.grad(log_ls, 1, d);
    g.extend(gl.iter().copied());
    g.push(grads.grad(log_noise, 1, 1)[(0, 0)]);
    Ok((tape.scalar_value(root), g))
}

/// Fit a GP to one dataset by maximizing the marginal likelihood with
/// multi-start Adam. Standardizes internally; restart 0 starts from unit
/// kernel parameters and small noise, the rest from random draws.
pub fn tgp_fit(ds: &Dataset, seed: u64) -> Result<SingleGP> {
    let (std_ds, state) = standardize(ds);
    let d = ds.dim();
    let n_params = d + 2;

    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..TGP_RESTARTS {
        let mut params = vec![0.0; n_params];
        if restart == 0 {
            params[1 + d] = (0.1f64).ln();
        } else {
            let mut rng = crate::rng::stream(seed, "tgp-restart", restart as u64);
            for p in params.iter_mut().take(1 + d) {
                *p = rng.random::<f64>() * 2.0 - 1.0;
            }
            params[1 + d] = -5.0 + 4.0 * rng.random::<f64>();
        }

        let mut adam = crate::optim::AdamState::new(n_params, TGP_LEARNING_RATE);
        let mut ok = true;
        for _ in 0..TGP_STEPS {
            match single_gp_nll_grad(&params, &std_ds.inputs, &std_ds.outputs) {
                Ok((loss, grad)) if loss.is_finite() && grad.iter().all(|g| g.is_finite()) => {
                    adam.step(&mut params, &grad);
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        if let Ok((loss, _)) = single_gp_nll_grad(&params, &std_ds.inputs, &std_ds.outputs) {
            if loss.is_finite() && best.as_ref().is_none_or(|(b, _)| loss < *b) {
                best = Some((loss, params));
            }
        }
    }
    let (nll, params) =
        best.ok_or_else(|| Error::numerical("every GP fit restart diverged"))?;

    let kernel = KernelParams {
        log_amplitude: params[0],
        log_lengthscales: params[1..1 + d].to_vec(),
    };
    let log_noise = params[1 + d];
    let mut k = kernel_matrix(&kernel, &std_ds.inputs, &std_ds.inputs)?;
    let noise = log_noise.exp();
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    let (chol, _) = cholesky_with_jitter(&k)?;
    let alpha = chol.solve(&std_ds.outputs);
    Ok(SingleGP { kernel, log_noise, train_inputs: std_ds.inputs, alpha, chol, state, nll })
}

/// Predict with a fitted single GP at raw inputs.
pub fn tgp_predict(gp: &SingleGP, x_raw: &DMatrix<f64>) -> Result<PredictiveDistribution> {
    gp.predict(x_raw)
}

/// Input-mapping-calibration baseline: a source surrogate GP queried through
/// a fitted affine map from the target input space, with an additive residual
/// GP on the target data.
#[derive(Clone, Debug)]
pub struct ImcModel {
    pub surrogate: SingleGP,
    /// Affine map between standardized input spaces: d_S × d_T.
    pub map_matrix: DMatrix<f64>,
    pub map_offset: DVector<f64>,
    /// Residual GP over raw target inputs (raw output residuals), if fitted.
    pub residual: Option<SingleGP>,
    /// Standardization of the target training inputs.
    pub target_state: StandardizationState,
    /// Which source the surrogate was built from.
    pub source_index: usize,
}

/// Fit the IMC baseline against one chosen source. Steps: fit the source
/// surrogate, fit the affine input map by multi-start Adam on squared
/// prediction error, then fit a GP to the training residuals as an additive
/// correction.
pub fn imc_fit(data: &TransferData, source_index: usize, seed: u64) -> Result<ImcModel> {
    if source_index >= data.sources.len() {
        return Err(Error::invalid_argument(format!(
            "source index {source_index} out of range ({} sources)",
            data.sources.len()
        )));
    }
    let surrogate = tgp_fit(&data.sources[source_index], seed ^ 0x1)?;
    let mapping = crate::alignnet::imc_reference(&data.target, &surrogate, seed)?;
    let (map_matrix, map_offset) = match &mapping.spec {
        crate::alignnet::ReferenceMapSpec::Affine { matrix, offset } => {
            let d_s = matrix.len();
            let d_t = matrix[0].len();
            let a = DMatrix::from_fn(d_s, d_t, |i, j| matrix[i][j]);
            (a, DVector::from_column_slice(offset))
        }
        _ => return Err(Error::InvalidState("imc reference must resolve to an affine map".into())),
    };
    let (target_std, target_state) = standardize(&data.target);

    // residuals of the mapped surrogate on the target training data
    let mapped = map_rows(&target_std.inputs, &map_matrix, &map_offset);
    let (mean_std, _) = surrogate.predict_std(&mapped)?;
    let mean_raw = surrogate.state.destandardize_outputs(&mean_std);
    let residuals = &data.target.outputs - mean_raw;

    let residual_ds = Dataset::new(
        data.target.inputs.clone(),
        residuals,
        crate::dataio::DomainId::Target,
    )?;
    let residual = tgp_fit(&residual_ds, seed ^ 0x2).ok();

    Ok(ImcModel { surrogate, map_matrix, map_offset, residual, target_state, source_index })
}

fn map_rows(x: &DMatrix<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x * a.transpose();
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            out[(i, j)] += b[j];
        }
    }
    out
}

/// Predict with a fitted IMC model at raw target inputs. The surrogate's
/// mapped prediction and the residual correction are treated as independent,
/// so their variances add.
pub fn imc_predict(m: &ImcModel, x_raw: &DMatrix<f64>) -> Result<PredictiveDistribution> {
    let x_std = m.target_state.standardize_inputs(x_raw);
    let mapped = map_rows(&x_std, &m.map_matrix, &m.map_offset);
    let (mean_std, cov_std) = m.surrogate.predict_std(&mapped)?;
    let mut mean = m.surrogate.state.destandardize_outputs(&mean_std);
    let mut cov = m.surrogate.state.destandardize_cov(&cov_std);
    if let Some(res) = &m.residual {
        let r = res.predict(x_raw)?;
        mean += r.mean;
        cov += r.cov;
    }
    Ok(PredictiveDistribution { mean, cov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::DomainId;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn smooth_dataset(n: usize, noise: f64, seed: u64) -> Dataset {
        let mut rng = crate::rng::stream(seed, "baseline-data", 0);
        let inputs = DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
        let outputs = DVector::from_fn(n, |i, _| {
            let x = inputs[(i, 0)];
            (2.0 * std::f64::consts::PI * x).sin() + noise * (rng.random::<f64>() - 0.5)
        });
        Dataset::new(inputs, outputs, DomainId::Target).unwrap()
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let ds = smooth_dataset(8, 0.1, 1);
        let (std_ds, _) = standardize(&ds);
        let params = vec![0.3, -0.2, -2.0];
        let (_, grad) = single_gp_nll_grad(&params, &std_ds.inputs, &std_ds.outputs).unwrap();
        let h = 1e-5;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            let (lp, _) = single_gp_nll_grad(&plus, &std_ds.inputs, &std_ds.outputs).unwrap();
            let (lm, _) = single_gp_nll_grad(&minus, &std_ds.inputs, &std_ds.outputs).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert_abs_diff_eq!(grad[i], fd, epsilon = 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn gp_recovers_smooth_function() {
        let ds = smooth_dataset(20, 0.02, 2);
        let gp = tgp_fit(&ds, 11).unwrap();
        let n_test = 50;
        let x_test = DMatrix::from_fn(n_test, 1, |i, _| (i as f64 + 0.5) / n_test as f64);
        let pred = tgp_predict(&gp, &x_test).unwrap();
        let mut sq = 0.0;
        for i in 0..n_test {
            let truth = (2.0 * std::f64::consts::PI * x_test[(i, 0)]).sin();
            sq += (pred.mean[i] - truth).powi(2);
        }
        let rmse = (sq / n_test as f64).sqrt();
        assert!(rmse < 0.05, "rmse {rmse}");
        // predictive variance must be positive and finite
        for v in pred.variances().iter() {
            assert!(*v >= 0.0 && v.is_finite());
        }
    }

    #[test]
    fn gp_interpolates_training_points_with_low_noise() {
        let ds = smooth_dataset(12, 0.0, 3);
        let gp = tgp_fit(&ds, 12).unwrap();
        let pred = tgp_predict(&gp, &ds.inputs).unwrap();
        for i in 0..ds.n() {
            assert_abs_diff_eq!(pred.mean[i], ds.outputs[i], epsilon = 0.02);
        }
    }

    #[test]
    fn gp_fit_is_deterministic() {
        let ds = smooth_dataset(10, 0.05, 4);
        let a = tgp_fit(&ds, 5).unwrap();
        let b = tgp_fit(&ds, 5).unwrap();
        assert_eq!(a.kernel, b.kernel);
        assert_eq!(a.log_noise, b.log_noise);
    }

    /// A planted affine map composed with a known source function must be
    /// recovered by the IMC fit to high accuracy when the surrogate is
    /// near-exact and the target data are noiseless.
    #[test]
    fn imc_recovers_planted_map() {
        let mut rng = crate::rng::stream(9, "imc-plant", 0);
        // source: f_S(u, v) = sin(2u) + v on [0,1]²
        let n_s = 60;
        let s_inputs = DMatrix::from_fn(n_s, 2, |_, _| rng.random::<f64>());
        let s_outputs =
            DVector::from_fn(n_s, |i, _| (2.0 * s_inputs[(i, 0)]).sin() + s_inputs[(i, 1)]);
        let source = Dataset::new(s_inputs, s_outputs, DomainId::Source(1)).unwrap();

        // planted raw-space map: u = 0.5·x₁ + 0.2, v = 0.8·x₂
        let n_t = 12;
        let t_inputs = DMatrix::from_fn(n_t, 2, |_, _| rng.random::<f64>());
        let t_outputs = DVector::from_fn(n_t, |i, _| {
            let u = 0.5 * t_inputs[(i, 0)] + 0.2;
            let v = 0.8 * t_inputs[(i, 1)];
            (2.0 * u).sin() + v
        });
        let target = Dataset::new(t_inputs, t_outputs, DomainId::Target).unwrap();

        let surrogate = tgp_fit(&source, 21).unwrap();
        let mapping = crate::alignnet::imc_reference(&target, &surrogate, 22).unwrap();

        // compare mapped-surrogate outputs against the planted outputs
        let (mean_std, _) = surrogate.predict_std(&mapping.values).unwrap();
        let mean_raw = surrogate.state.destandardize_outputs(&mean_std);
        let mut sq = 0.0;
        for i in 0..n_t {
            sq += (mean_raw[i] - target.outputs[i]).powi(2);
        }
        let rmse = (sq / n_t as f64).sqrt();
        assert!(rmse < 1e-2, "planted-map output rmse {rmse}");
    }

    /// When source and target share a function and domain, the identity map
    /// attains the noise floor and the optimizer must come close to it.
    #[test]
    fn imc_identity_map_is_near_optimal() {
        let mut rng = crate::rng::stream(9, "imc-ident", 0);
        let f = |x: f64, y: f64| (3.0 * x).cos() * (1.0 + y);
        let n_s = 50;
        let s_inputs = DMatrix::from_fn(n_s, 2, |_, _| rng.random::<f64>());
        let s_outputs = DVector::from_fn(n_s, |i, _| f(s_inputs[(i, 0)], s_inputs[(i, 1)]));
        let source = Dataset::new(s_inputs, s_outputs, DomainId::Source(1)).unwrap();

        let sigma = 0.05;
        let n_t = 15;
        let t_inputs = DMatrix::from_fn(n_t, 2, |_, _| rng.random::<f64>());
        let t_outputs = DVector::from_fn(n_t, |i, _| {
            f(t_inputs[(i, 0)], t_inputs[(i, 1)]) + sigma * (rng.random::<f64>() * 2.0 - 1.0)
        });
        let target = Dataset::new(t_inputs, t_outputs, DomainId::Target).unwrap();

        let surrogate = tgp_fit(&source, 31).unwrap();

        // identity in raw space = affine in standardized space; build params
        // by mapping: x_std → raw → surrogate-std
        let (target_std, t_state) = standardize(&target);
        let d = 2;
        let mut a = DMatrix::zeros(d, d);
        let mut b = DVector::zeros(d);
        let s_state = &surrogate.state;
        for k in 0..d {
            let t_span = t_state.input_upper[k] - t_state.input_lower[k];
            let s_span = s_state.input_upper[k] - s_state.input_lower[k];
            a[(k, k)] = t_span / s_span;
            b[k] = (t_state.input_lower[k] - s_state.input_lower[k]) / s_span;
        }
        let mut params = Vec::new();
        for i in 0..d {
            for j in 0..d {
                params.push(a[(i, j)]);
            }
        }
        params.extend(b.iter().copied());
        let (identity_loss, _) = crate::alignnet::imc_loss_grad(
            &params,
            &target_std.inputs,
            &target.outputs,
            &surrogate,
        );

        let mapping = crate::alignnet::imc_reference(&target, &surrogate, 32).unwrap();
        let (mean_std, _) = surrogate.predict_std(&mapping.values).unwrap();
        let mean_raw = surrogate.state.destandardize_outputs(&mean_std);
        let fitted_loss: f64 =
            (0..n_t).map(|i| (mean_raw[i] - target.outputs[i]).powi(2)).sum();

        assert!(
            fitted_loss <= identity_loss * 1.05 + 1e-9,
            "fitted {fitted_loss} vs identity {identity_loss}"
        );
    }

    #[test]
    fn imc_end_to_end_beats_surrogate_alone_on_shifted_task() {
        let mut rng = crate::rng::stream(10, "imc-e2e", 0);
        let f = |x: f64| (2.0 * std::f64::consts::PI * x).sin();
        let n_s = 40;
        let s_inputs = DMatrix::from_fn(n_s, 1, |i, _| i as f64 / (n_s - 1) as f64);
        let s_outputs = DVector::from_fn(n_s, |i, _| f(s_inputs[(i, 0)]));
        let source = Dataset::new(s_inputs, s_outputs, DomainId::Source(1)).unwrap();

        // target is the source queried at shifted inputs plus a small offset
        let n_t = 10;
        let t_inputs = DMatrix::from_fn(n_t, 1, |_, _| rng.random::<f64>() * 0.6);
        let t_outputs = DVector::from_fn(n_t, |i, _| f(0.9 * t_inputs[(i, 0)] + 0.05) + 0.1);
        let target = Dataset::new(t_inputs, t_outputs, DomainId::Target).unwrap();
        let data = TransferData { sources: vec![source], target };

        let model = imc_fit(&data, 0, 77).unwrap();
        let n_test = 30;
        let x_test = DMatrix::from_fn(n_test, 1, |i, _| 0.6 * (i as f64 + 0.5) / n_test as f64);
        let pred = imc_predict(&model, &x_test).unwrap();
        let mut sq = 0.0;
        for i in 0..n_test {
            let truth = f(0.9 * x_test[(i, 0)] + 0.05) + 0.1;
            sq += (pred.mean[i] - truth).powi(2);
        }
        let rmse = (sq / n_test as f64).sqrt();
        assert!(rmse < 0.1, "imc rmse {rmse}");
        assert_eq!(model.source_index, 0);
        for v in pred.variances().iter() {
            assert!(*v >= 0.0 && v.is_finite());
        }
    }

    #[test]
    fn imc_rejects_bad_source_index() {
        let ds = smooth_dataset(6, 0.1, 5);
        let data = TransferData {
            sources: vec![ds.clone().with_domain(DomainId::Source(1))],
            target: ds,
        };
        assert!(imc_fit(&data, 3, 1).is_err());
    }
}
