//! The training objective: negative reconstruction term, KL alignment term,
//! physical-insight pull on the prior means, and the L1 shrinkage on the
//! transfer coefficients.
//!
//! The smooth part (everything except the L1 term) is built as one reverse-
//! mode graph per evaluation so a single backward sweep yields the gradient
//! with respect to every trainable parameter; the L1 term is handled by the
//! optimizer's proximal step. Plain (graph-free) versions of each component
//! are exposed for diagnostics and cross-checks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::alignnet::{prior_forward, recog_forward, recog_inputs, reparam_sample, Activation};
use crate::dataio::StandardizedTransfer;
use crate::gpcore::{assemble_cov, joint_loglik, JointInputs, ModelParams};
use crate::optim::FlatLayout;
use crate::tape::{NodeId, Tape};
use crate::{Error, Result};

/// Weights and draw counts of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// μ ∈ [0, 1]: weight of prior-draw reconstruction vs recognition-draw
    /// reconstruction.
    pub mu: f64,
    /// β: KL weight multiplier (the KL enters as β·μ·KL).
    pub beta: f64,
    /// λ: physical-insight penalty weight.
    pub lambda: f64,
    /// γ: L1 weight on the transfer coefficients.
    pub gamma: f64,
    /// L: reconstruction draws from the prior alignment.
    pub l_draws: usize,
    /// M: reconstruction draws from the recognition model.
    pub m_draws: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { mu: 0.7, beta: 0.8, lambda: 0.0, gamma: 0.0, l_draws: 2, m_draws: 2 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("mu must lie in [0, 1], got {}", self.mu)));
        }
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda), ("gamma", self.gamma)] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.l_draws == 0 || self.m_draws == 0 {
            return Err(Error::Config("draw counts must be positive".into()));
        }
        Ok(())
    }
}

/// Values of the objective components at one parameter point.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    /// Full objective to minimize: −rec + β·μ·kl + phyr + ssr.
    pub total: f64,
    /// Reconstruction term (average joint log likelihood; larger is better).
    pub rec: f64,
    /// Raw KL value (unweighted).
    pub kl: f64,
    /// λ-weighted physical-insight penalty.
    pub phyr: f64,
    /// γ-weighted L1 penalty on the transfer coefficients.
    pub ssr: f64,
}

/// One gradient evaluation: component values plus the gradient of the smooth
/// part (total − ssr) in flat parameter order.
#[derive(Clone, Debug)]
pub struct EpochEval {
    pub breakdown: LossBreakdown,
    pub grad: Vec<f64>,
}

/// γ‖ρ‖₁.
pub fn loss_ssr(rho: &[f64], gamma: f64) -> f64 {
    gamma * rho.iter().map(|r| r.abs()).sum::<f64>()
}

/// Sum over sources of KL(recognition ‖ prior) at the target training inputs.
pub fn loss_kl(model: &ModelParams, data: &StandardizedTransfer) -> Result<f64> {
    let mut total = 0.0;
    for j in 0..model.n_sources() {
        let u = recog_inputs(&data.data.target, &data.data.sources[j], model.recogs[j].alpha);
        let q = recog_forward(&model.recogs[j], &u)?;
        let p = prior_forward(&model.priors[j], &data.data.target.inputs)?;
        total += crate::alignnet::kl_factorized(&q, &p)?;
    }
    Ok(total)
}

/// λ·Σ_j ‖prior means − reference values‖_F at the target training inputs.
pub fn loss_phyr(
    model: &ModelParams,
    data: &StandardizedTransfer,
    ref_values: &[DMatrix<f64>],
    lambda: f64,
) -> Result<f64> {
    let mut means = Vec::with_capacity(model.n_sources());
    for j in 0..model.n_sources() {
        means.push(prior_forward(&model.priors[j], &data.data.target.inputs)?.means);
    }
    crate::alignnet::phyr_penalty(&means, ref_values, lambda)
}

fn draw_eps(n: usize, d: usize, rng: &mut (impl Rng + ?Sized)) -> DMatrix<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    DMatrix::from_fn(n, d, |_, _| normal.sample(rng))
}

/// Monte-Carlo reconstruction term: μ·(1/L)·Σ_prior loglik + (1−μ)·(1/M)·
/// Σ_recog loglik of the stacked observations under the assembled joint
/// covariance, with aligned inputs drawn by reparameterization. Draw order:
/// the L prior draws first, then the M recognition draws; within a draw one
/// eps matrix per source, in source order.
pub fn loss_rec(
    model: &ModelParams,
    data: &StandardizedTransfer,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    cfg.validate()?;
    let n = model.n_sources();
    let n_t = data.data.target.n();
    let y = data.data.stacked_outputs();
    let source_inputs: Vec<DMatrix<f64>> =
        data.data.sources.iter().map(|s| s.inputs.clone()).collect();

    let mut priors = Vec::with_capacity(n);
    let mut recogs = Vec::with_capacity(n);
    for j in 0..n {
        priors.push(prior_forward(&model.priors[j], &data.data.target.inputs)?);
        let u = recog_inputs(&data.data.target, &data.data.sources[j], model.recogs[j].alpha);
        recogs.push(recog_forward(&model.recogs[j], &u)?);
    }

    let loglik_of = |batches: &[crate::alignnet::GaussianBatch],
                         rng: &mut dyn rand::RngCore|
     -> Result<f64> {
        let aligned: Vec<DMatrix<f64>> = batches
            .iter()
            .map(|g| {
                let eps = draw_eps(n_t, g.means.ncols(), rng);
                reparam_sample(g, &eps)
            })
            .collect();
        let inp = JointInputs {
            source_inputs: &source_inputs,
            aligned: &aligned,
            target_inputs: &data.data.target.inputs,
        };
        let cov = assemble_cov(&model.transfer, &inp)?;
        joint_loglik(&cov, &y)
    };

    let mut prior_sum = 0.0;
    for _ in 0..cfg.l_draws {
        prior_sum += loglik_of(&priors, rng)?;
    }
    let mut recog_sum = 0.0;
    for _ in 0..cfg.m_draws {
        recog_sum += loglik_of(&recogs, rng)?;
    }
    Ok(cfg.mu * prior_sum / cfg.l_draws as f64
        + (1.0 - cfg.mu) * recog_sum / cfg.m_draws as f64)
}

/// Plain total objective at one parameter point (draws its own eps).
pub fn total_objective(
    model: &ModelParams,
    data: &StandardizedTransfer,
    ref_values: &[DMatrix<f64>],
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let rec = loss_rec(model, data, cfg, rng)?;
    let kl = loss_kl(model, data)?;
    let phyr = loss_phyr(model, data, ref_values, cfg.lambda)?;
    let ssr = loss_ssr(&model.transfer.rho, cfg.gamma);
    Ok(LossBreakdown { total: -rec + cfg.beta * cfg.mu * kl + phyr + ssr, rec, kl, phyr, ssr })
}

/// Per-source trainable leaves plus the shared forward nodes hanging off
/// them.
struct SourceGraph {
    rho: NodeId,
    log_amp: NodeId,
    log_ls: NodeId,
    inputs: NodeId,
    cov_block: NodeId,
    prior_means: NodeId,
    prior_logvar: NodeId,
    prior_stds: NodeId,
    recog_means: NodeId,
    recog_logvar: NodeId,
    recog_stds: NodeId,
}

/// Build the smooth objective graph and evaluate value + gradient at `flat`.
///
/// Leaves are created in exactly the flat layout's pack order so the gradient
/// vector lines up with the parameter vector; the finite-difference contract
/// on the whole gradient guards that correspondence.
pub fn evaluate(
    layout: &FlatLayout,
    flat: &[f64],
    data: &StandardizedTransfer,
    ref_values: &[DMatrix<f64>],
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<EpochEval> {
    cfg.validate()?;
    let model = layout.unpack(flat)?;
    let n = model.n_sources();
    if ref_values.len() != n {
        return Err(Error::invalid_argument("one reference value matrix required per source"));
    }
    let n_t = data.data.target.n();
    let y = data.data.stacked_outputs();

    let mut tape = Tape::new();
    // ids in pack order; each entry is (node, rows, cols)
    let mut slots: Vec<(NodeId, usize, usize)> = Vec::new();
    let push_scalar = |tape: &mut Tape, slots: &mut Vec<(NodeId, usize, usize)>, v: f64| {
        let id = tape.leaf_scalar(v);
        slots.push((id, 1, 1));
        id
    };

    // 1. transfer coefficients
    let rho_ids: Vec<NodeId> =
        model.transfer.rho.iter().map(|&r| push_scalar(&mut tape, &mut slots, r)).collect();
    // 2. noise log variances (sources then target)
    let log_noise_ids: Vec<NodeId> =
        model.transfer.log_noise.iter().map(|&v| push_scalar(&mut tape, &mut slots, v)).collect();
    // 3. discrepancy scale
    let log_disc_scale = push_scalar(&mut tape, &mut slots, model.transfer.log_disc_scale);
    // 4. source kernels
    let mut kernel_ids = Vec::with_capacity(n);
    for k in &model.transfer.source_kernels {
        let la = push_scalar(&mut tape, &mut slots, k.log_amplitude);
        let ll = tape.leaf_row(&k.log_lengthscales);
        slots.push((ll, 1, k.log_lengthscales.len()));
        kernel_ids.push((la, ll));
    }
    // 5. discrepancy kernel lengthscales (amplitude fixed)
    let disc_ls = tape.leaf_row(&model.transfer.disc_kernel.log_lengthscales);
    slots.push((disc_ls, 1, model.transfer.disc_kernel.log_lengthscales.len()));
    // 6. prior networks
    let mut prior_ids = Vec::with_capacity(n);
    for p in &model.priors {
        let a1 = tape.leaf(p.mean_weight.clone());
        slots.push((a1, p.mean_weight.nrows(), p.mean_weight.ncols()));
        let b1 = tape.leaf_row(p.mean_bias.as_slice());
        slots.push((b1, 1, p.mean_bias.len()));
        let a2 = tape.leaf(p.logvar_weight.clone());
        slots.push((a2, p.logvar_weight.nrows(), p.logvar_weight.ncols()));
        let b2 = tape.leaf_row(p.logvar_bias.as_slice());
        slots.push((b2, 1, p.logvar_bias.len()));
        prior_ids.push((a1, b1, a2, b2));
    }
    // 7. recognition networks
    let mut recog_ids = Vec::with_capacity(n);
    for r in &model.recogs {
        let w1 = tape.leaf(r.hidden_weight.clone());
        slots.push((w1, r.hidden_weight.nrows(), r.hidden_weight.ncols()));
        let c1 = tape.leaf_row(r.hidden_bias.as_slice());
        slots.push((c1, 1, r.hidden_bias.len()));
        let w2 = tape.leaf(r.mean_weight.clone());
        slots.push((w2, r.mean_weight.nrows(), r.mean_weight.ncols()));
        let c2 = tape.leaf_row(r.mean_bias.as_slice());
        slots.push((c2, 1, r.mean_bias.len()));
        let w3 = tape.leaf(r.logvar_weight.clone());
        slots.push((w3, r.logvar_weight.nrows(), r.logvar_weight.ncols()));
        let c3 = tape.leaf_row(r.logvar_bias.as_slice());
        slots.push((c3, 1, r.logvar_bias.len()));
        recog_ids.push((w1, c1, w2, c2, w3, c3));
    }
    debug_assert_eq!(
        slots.iter().map(|(_, r, c)| r * c).sum::<usize>(),
        layout.n_params(),
        "leaf slots must cover the flat layout"
    );

    // constants
    let x_t = tape.leaf(data.data.target.inputs.clone());

    // shared per-source forward passes
    let mut sources = Vec::with_capacity(n);
    for j in 0..n {
        let (log_amp, log_ls) = kernel_ids[j];
        let inputs = tape.leaf(data.data.sources[j].inputs.clone());
        let k_jj = tape.se_kernel(log_amp, log_ls, inputs, inputs);
        let noise_var = tape.exp(log_noise_ids[j]);
        let cov_block = tape.add_scaled_eye(k_jj, noise_var);

        let (a1, b1, a2, b2) = prior_ids[j];
        let a1_t = tape.transpose(a1);
        let m_pre = tape.matmul(x_t, a1_t);
        let m_aff = tape.add_row_vec(m_pre, b1);
        let prior_means = match model.priors[j].activation {
            Activation::Identity => m_aff,
            Activation::Tanh => tape.tanh(m_aff),
        };
        let a2_t = tape.transpose(a2);
        let lv_pre = tape.matmul(x_t, a2_t);
        let lv_aff = tape.add_row_vec(lv_pre, b2);
        let prior_logvar = tape.clamp(
            lv_aff,
            crate::alignnet::LOGVAR_CLAMP.0,
            crate::alignnet::LOGVAR_CLAMP.1,
        );
        let half_lv = tape.scale(prior_logvar, 0.5);
        let prior_stds = tape.exp(half_lv);

        let (w1, c1, w2, c2, w3, c3) = recog_ids[j];
        let u = recog_inputs(&data.data.target, &data.data.sources[j], model.recogs[j].alpha);
        let u_node = tape.leaf(u);
        let w1_t = tape.transpose(w1);
        let h_pre = tape.matmul(u_node, w1_t);
        let h_aff = tape.add_row_vec(h_pre, c1);
        let hidden = tape.tanh(h_aff);
        let w2_t = tape.transpose(w2);
        let qm_pre = tape.matmul(hidden, w2_t);
        let recog_means = tape.add_row_vec(qm_pre, c2);
        let w3_t = tape.transpose(w3);
        let qlv_pre = tape.matmul(hidden, w3_t);
        let qlv_aff = tape.add_row_vec(qlv_pre, c3);
        let recog_logvar = tape.clamp(
            qlv_aff,
            crate::alignnet::LOGVAR_CLAMP.0,
            crate::alignnet::LOGVAR_CLAMP.1,
        );
        let q_half = tape.scale(recog_logvar, 0.5);
        let recog_stds = tape.exp(q_half);

        sources.push(SourceGraph {
            rho: rho_ids[j],
            log_amp,
            log_ls,
            inputs,
            cov_block,
            prior_means,
            prior_logvar,
            prior_stds,
            recog_means,
            recog_logvar,
            recog_stds,
        });
    }

    // discrepancy block over the target inputs (fixed unit amplitude)
    let disc_amp = tape.leaf_scalar(0.0);
    let k_d = tape.se_kernel(disc_amp, disc_ls, x_t, x_t);
    let disc_scale = tape.exp(log_disc_scale);
    let disc_term = tape.scalar_mul(disc_scale, k_d);
    let target_noise = tape.exp(log_noise_ids[n]);

    // one joint log likelihood for a fixed choice of (means, stds) per source
    let draw_loglik = |tape: &mut Tape,
                           sources: &[SourceGraph],
                           use_prior: bool,
                           rng: &mut dyn rand::RngCore|
     -> Result<NodeId> {
        let mut diag = Vec::with_capacity(n + 1);
        let mut cross = Vec::with_capacity(n);
        let mut tt: Option<NodeId> = None;
        for (j, s) in sources.iter().enumerate() {
            let (means, stds) = if use_prior {
                (s.prior_means, s.prior_stds)
            } else {
                (s.recog_means, s.recog_stds)
            };
            let d_sj = tape.value(means).ncols();
            let eps = tape.leaf(draw_eps(n_t, d_sj, rng));
            let noise = tape.mul_elem(stds, eps);
            let z = tape.add(means, noise);

            let k_z = tape.se_kernel(s.log_amp, s.log_ls, z, z);
            let rho_sq = tape.mul_elem(s.rho, s.rho);
            let scaled = tape.scalar_mul(rho_sq, k_z);
            tt = Some(match tt {
                None => scaled,
                Some(acc) => tape.add(acc, scaled),
            });

            let k_cross = tape.se_kernel(s.log_amp, s.log_ls, s.inputs, z);
            let cross_scaled = tape.scalar_mul(s.rho, k_cross);
            cross.push((j, cross_scaled));
            diag.push(s.cov_block);
        }
        let tt = tape.add(tt.expect("at least one source"), disc_term);
        let tt = tape.add_scaled_eye(tt, target_noise);
        diag.push(tt);
        let c = tape.sym_block(diag, cross);
        tape.gauss_loglik(c, &y)
    };

    // reconstruction: L prior draws then M recognition draws
    let mut prior_lls = Vec::with_capacity(cfg.l_draws);
    for _ in 0..cfg.l_draws {
        prior_lls.push(draw_loglik(&mut tape, &sources, true, rng)?);
    }
    let mut recog_lls = Vec::with_capacity(cfg.m_draws);
    for _ in 0..cfg.m_draws {
        recog_lls.push(draw_loglik(&mut tape, &sources, false, rng)?);
    }
    let mut acc_p = prior_lls[0];
    for &ll in &prior_lls[1..] {
        acc_p = tape.add(acc_p, ll);
    }
    let mut acc_q = recog_lls[0];
    for &ll in &recog_lls[1..] {
        acc_q = tape.add(acc_q, ll);
    }
    let rec_p = tape.scale(acc_p, cfg.mu / cfg.l_draws as f64);
    let rec_q = tape.scale(acc_q, (1.0 - cfg.mu) / cfg.m_draws as f64);
    let rec = tape.add(rec_p, rec_q);

    // KL(recognition ‖ prior), elementwise in log-variance form
    let mut kl_total: Option<NodeId> = None;
    for s in &sources {
        let d_lv = tape.sub(s.recog_logvar, s.prior_logvar);
        let term_a = tape.neg(d_lv);
        let term_b = tape.exp(d_lv);
        let dm = tape.sub(s.recog_means, s.prior_means);
        let dm2 = tape.mul_elem(dm, dm);
        let neg_plv = tape.neg(s.prior_logvar);
        let inv_vp = tape.exp(neg_plv);
        let term_c = tape.mul_elem(dm2, inv_vp);
        let s1 = tape.add(term_a, term_b);
        let s2 = tape.add(s1, term_c);
        let s3 = tape.add_scalar(s2, -1.0);
        let ssum = tape.sum(s3);
        let kl_j = tape.scale(ssum, 0.5);
        kl_total = Some(match kl_total {
            None => kl_j,
            Some(acc) => tape.add(acc, kl_j),
        });
    }
    let kl = kl_total.expect("at least one source");

    // physical-insight pull of the prior means toward the references
    let mut phyr_node: Option<NodeId> = None;
    if cfg.lambda > 0.0 {
        for (j, s) in sources.iter().enumerate() {
            let r = tape.leaf(ref_values[j].clone());
            let diff = tape.sub(s.prior_means, r);
            let fnorm = tape.frob_norm(diff);
            phyr_node = Some(match phyr_node {
                None => fnorm,
                Some(acc) => tape.add(acc, fnorm),
            });
        }
    }

    let neg_rec = tape.neg(rec);
    let kl_w = tape.scale(kl, cfg.beta * cfg.mu);
    let mut total = tape.add(neg_rec, kl_w);
    if let Some(p) = phyr_node {
        let p_w = tape.scale(p, cfg.lambda);
        total = tape.add(total, p_w);
    }

    let grads = tape.backward(total);
    let mut grad = Vec::with_capacity(layout.n_params());
    for &(id, r, c) in &slots {
        let g = grads.grad(id, r, c);
        grad.extend(crate::tape::flatten_rm(&g));
    }

    let rec_v = tape.scalar_value(rec);
    let kl_v = tape.scalar_value(kl);
    let phyr_v = cfg.lambda * phyr_node.map(|p| tape.scalar_value(p)).unwrap_or(0.0);
    let ssr_v = loss_ssr(&model.transfer.rho, cfg.gamma);
    let smooth = tape.scalar_value(total);
    Ok(EpochEval {
        breakdown: LossBreakdown {
            total: smooth + ssr_v,
            rec: rec_v,
            kl: kl_v,
            phyr: phyr_v,
            ssr: ssr_v,
        },
        grad,
    })
}
