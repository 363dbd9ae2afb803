//! First-order training: Adam with bias correction, a proximal step for the
//! L1 transfer-coefficient penalty, the flat parameter layout, the training
//! loop with smoothed-loss checkpointing, model persistence, and k-fold
//! hyperparameter search.

use std::collections::VecDeque;
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignnet::{Activation, ReferenceMapSpec, ReferenceMapping};
use crate::dataio::{
    standardize_transfer, Dataset, StandardizationState, StandardizedTransfer, TransferData,
};
use crate::gpcore::{mc_predict, ModelDims, ModelParams, PredictiveDistribution};
use crate::objective::{evaluate, LossBreakdown, ObjectiveConfig};
use crate::tape::{flatten_rm, unflatten_rm};
use crate::{Error, Result};

/// Adam defaults.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Default learning rate of the main training loop.
pub const DEFAULT_LEARNING_RATE: f64 = 2e-3;
/// Default epoch budget.
pub const DEFAULT_EPOCHS: usize = 3000;
/// Default width of the loss-smoothing window used for checkpoint selection.
pub const DEFAULT_SMOOTHING_WINDOW: usize = 50;
/// Prediction draw counts used inside cross-validation scoring.
pub const CV_PRED_DRAWS: (usize, usize) = (8, 8);

/// Adam optimizer state over a flat parameter vector, with bias-corrected
/// moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One in-place Adam update of `params` against `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Soft-threshold proximal operator of t·‖·‖₁: shrink each coordinate toward
/// zero by `threshold`, crossing through exactly zero.
pub fn prox_l1(values: &mut [f64], threshold: f64) {
    for v in values.iter_mut() {
        *v = if *v > threshold {
            *v - threshold
        } else if *v < -threshold {
            *v + threshold
        } else {
            0.0
        };
    }
}

/// Mapping between a [`ModelParams`] and a flat parameter vector.
///
/// Pack order: transfer coefficients ρ; noise log variances (sources then
/// target); the discrepancy log scale; per source the kernel log amplitude
/// and log lengthscales; the discrepancy-kernel log lengthscales; per source
/// the prior network (mean weight row-major, mean bias, log-variance weight,
/// log-variance bias); per source the recognition network (hidden weight,
/// hidden bias, mean head, log-variance head). The discrepancy-kernel
/// amplitude is fixed and excluded. The objective graph creates its leaves in
/// this same order.
#[derive(Clone, Debug)]
pub struct FlatLayout {
    template: ModelParams,
    n: usize,
}

impl FlatLayout {
    pub fn of(model: &ModelParams) -> Self {
        let n = Self::pack_into(model).len();
        FlatLayout { template: model.clone(), n }
    }

    pub fn n_params(&self) -> usize {
        self.n
    }

    /// Location of the transfer coefficients in the flat vector (the prox
    /// step applies only to this range).
    pub fn rho_range(&self) -> Range<usize> {
        0..self.template.n_sources()
    }

    pub fn pack(&self, m: &ModelParams) -> Vec<f64> {
        Self::pack_into(m)
    }

    fn pack_into(m: &ModelParams) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&m.transfer.rho);
        out.extend_from_slice(&m.transfer.log_noise);
        out.push(m.transfer.log_disc_scale);
        for k in &m.transfer.source_kernels {
            out.push(k.log_amplitude);
            out.extend_from_slice(&k.log_lengthscales);
        }
        out.extend_from_slice(&m.transfer.disc_kernel.log_lengthscales);
        for p in &m.priors {
            out.extend(flatten_rm(&p.mean_weight));
            out.extend(p.mean_bias.iter().copied());
            out.extend(flatten_rm(&p.logvar_weight));
            out.extend(p.logvar_bias.iter().copied());
        }
        for r in &m.recogs {
            out.extend(flatten_rm(&r.hidden_weight));
            out.extend(r.hidden_bias.iter().copied());
            out.extend(flatten_rm(&r.mean_weight));
            out.extend(r.mean_bias.iter().copied());
            out.extend(flatten_rm(&r.logvar_weight));
            out.extend(r.logvar_bias.iter().copied());
        }
        out
    }

    pub fn unpack(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.n {
            return Err(Error::invalid_argument(format!(
                "flat vector has {} entries, layout expects {}",
                flat.len(),
                self.n
            )));
        }
        let mut m = self.template.clone();
        let mut at = 0;
        let mut take = |count: usize| -> &[f64] {
            let s = &flat[at..at + count];
            at += count;
            s
        };
        let n = m.n_sources();
        m.transfer.rho.copy_from_slice(take(n));
        m.transfer.log_noise.copy_from_slice(take(n + 1));
        m.transfer.log_disc_scale = take(1)[0];
        for k in &mut m.transfer.source_kernels {
            k.log_amplitude = take(1)[0];
            let d = k.log_lengthscales.len();
            k.log_lengthscales.copy_from_slice(take(d));
        }
        {
            let d = m.transfer.disc_kernel.log_lengthscales.len();
            m.transfer.disc_kernel.log_lengthscales.copy_from_slice(take(d));
        }
        for p in &mut m.priors {
            let (r, c) = p.mean_weight.shape();
            p.mean_weight = unflatten_rm(take(r * c), r, c);
            p.mean_bias = DVector::from_column_slice(take(r));
            p.logvar_weight = unflatten_rm(take(r * c), r, c);
            p.logvar_bias = DVector::from_column_slice(take(r));
        }
        for rec in &mut m.recogs {
            let (h, u) = rec.hidden_weight.shape();
            rec.hidden_weight = unflatten_rm(take(h * u), h, u);
            rec.hidden_bias = DVector::from_column_slice(take(h));
            let (d, hh) = rec.mean_weight.shape();
            rec.mean_weight = unflatten_rm(take(d * hh), d, hh);
            rec.mean_bias = DVector::from_column_slice(take(d));
            rec.logvar_weight = unflatten_rm(take(d * hh), d, hh);
            rec.logvar_bias = DVector::from_column_slice(take(d));
        }
        debug_assert_eq!(at, self.n);
        Ok(m)
    }
}

/// Training configuration.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Width of the moving average used to pick the checkpoint.
    pub smoothing_window: usize,
    pub hidden_width: usize,
    /// Source-weighting coefficients for the recognition inputs; defaults to
    /// all ones.
    pub alphas: Option<Vec<f64>>,
    pub seed: u64,
    /// Optional CSV loss trace (epoch,total,rec,kl,phyr,ssr).
    pub trace_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveConfig::default(),
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            smoothing_window: DEFAULT_SMOOTHING_WINDOW,
            hidden_width: crate::alignnet::DEFAULT_HIDDEN_WIDTH,
            alphas: None,
            seed: 0,
            trace_path: None,
        }
    }
}

/// A trained model bundled with everything prediction needs: the parameters
/// at the best checkpoint, the standardizations of every domain, and the
/// resolved reference mappings.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub source_states: Vec<StandardizationState>,
    pub target_state: StandardizationState,
    pub references: Vec<ReferenceMapping>,
    pub best_epoch: usize,
    pub best_smoothed_loss: f64,
    /// Component values at the checkpointed epoch.
    pub checkpoint_loss: LossBreakdown,
}

impl TrainedModel {
    pub fn rho(&self) -> &[f64] {
        &self.params.transfer.rho
    }

    /// Standardize a transfer problem with the states stored at training
    /// time (the data must have the training shapes).
    pub fn standardized_data(&self, data: &TransferData) -> Result<StandardizedTransfer> {
        if data.sources.len() != self.source_states.len() {
            return Err(Error::invalid_argument(format!(
                "model was trained with {} sources, got {}",
                self.source_states.len(),
                data.sources.len()
            )));
        }
        let mut sources = Vec::with_capacity(data.sources.len());
        for (s, st) in data.sources.iter().zip(&self.source_states) {
            sources.push(Dataset {
                inputs: st.standardize_inputs(&s.inputs),
                outputs: st.standardize_outputs(&s.outputs),
                domain_id: s.domain_id,
            });
        }
        let target = Dataset {
            inputs: self.target_state.standardize_inputs(&data.target.inputs),
            outputs: self.target_state.standardize_outputs(&data.target.outputs),
            domain_id: data.target.domain_id,
        };
        Ok(StandardizedTransfer {
            data: TransferData { sources, target },
            source_states: self.source_states.clone(),
            target_state: self.target_state.clone(),
        })
    }

    /// Moment-matched Monte-Carlo prediction at raw target inputs, returned
    /// in raw output units.
    pub fn predict(
        &self,
        data: &TransferData,
        x_raw: &DMatrix<f64>,
        k_draws: usize,
        w_draws: usize,
        rng: &mut impl Rng,
    ) -> Result<PredictiveDistribution> {
        let std = self.standardized_data(data)?;
        let x_std = self.target_state.standardize_inputs(x_raw);
        let pred = mc_predict(&self.params, &std, &x_std, k_draws, w_draws, rng)?;
        Ok(PredictiveDistribution {
            mean: self.target_state.destandardize_outputs(&pred.mean),
            cov: self.target_state.destandardize_cov(&pred.cov),
        })
    }
}

/// Resolve every reference spec against the training data: direct forms are
/// mapped into source-standardized coordinates, `imc` specs are fitted from
/// the data (source surrogate + affine map).
pub fn resolve_references(
    data: &TransferData,
    std: &StandardizedTransfer,
    specs: &[ReferenceMapSpec],
    seed: u64,
) -> Result<Vec<ReferenceMapping>> {
    if specs.len() != data.sources.len() {
        return Err(Error::invalid_argument(format!(
            "{} reference specs for {} sources",
            specs.len(),
            data.sources.len()
        )));
    }
    let mut refs = Vec::with_capacity(specs.len());
    for (j, spec) in specs.iter().enumerate() {
        let mapping = match spec {
            ReferenceMapSpec::Imc => {
                let sub_seed: u64 = crate::rng::stream(seed, "ref-imc", j as u64).random();
                let surrogate = crate::baselines::tgp_fit(&data.sources[j], sub_seed)?;
                crate::alignnet::imc_reference(&data.target, &surrogate, sub_seed)?
            }
            other => crate::alignnet::resolve_reference(
                other,
                &data.target.inputs,
                &std.source_states[j],
            )?,
        };
        refs.push(mapping);
    }
    Ok(refs)
}

/// Train the transfer model: Adam on the smooth objective with a proximal
/// soft-threshold on the transfer coefficients after every step, tracking a
/// moving average of the total loss and returning the parameters from the
/// best-smoothed epoch.
/// Adam steps used to pre-fit the alignment mean heads to the reference
/// mappings before joint training.
pub const PREFIT_STEPS: usize = 600;
/// Learning rate of the alignment pre-fit.
pub const PREFIT_LEARNING_RATE: f64 = 2e-2;

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |c, _| m.column(c).sum())
}

fn add_row_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for i in 0..m.nrows() {
        for c in 0..m.ncols() {
            m[(i, c)] += b[c];
        }
    }
}

/// Pre-fit the mean heads of every prior and recognition network to the
/// reference-mapped training points (least squares over the training batch),
/// so joint training starts from the anchored alignment instead of a random
/// map. Sources whose reference carries real signal are then useful from the
/// first epoch, which keeps their transfer coefficients from collapsing while
/// the alignment would otherwise still be finding its feet. Variance heads
/// are left at their initialization; the pre-fit is deterministic.
pub fn prefit_alignment(
    model: &mut ModelParams,
    std: &StandardizedTransfer,
    ref_values: &[DMatrix<f64>],
) -> Result<()> {
    if ref_values.len() != model.n_sources() {
        return Err(Error::invalid_argument(
            "one reference-value matrix required per source",
        ));
    }
    let x = &std.data.target.inputs;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::invalid_argument("cannot pre-fit on an empty target set"));
    }
    let scale = 2.0 / n as f64;

    for (j, r) in ref_values.iter().enumerate() {
        if r.nrows() != n {
            return Err(Error::invalid_argument(
                "reference values must cover every target training point",
            ));
        }

        // Prior mean head: ψ(x Aᵀ + b) → r.
        {
            let p = &mut model.priors[j];
            let d_s = p.mean_weight.nrows();
            let n_w = p.mean_weight.len();
            let mut params = flatten_rm(&p.mean_weight);
            params.extend(p.mean_bias.iter().copied());
            let mut adam = AdamState::new(params.len(), PREFIT_LEARNING_RATE);
            for _ in 0..PREFIT_STEPS {
                let a = unflatten_rm(&params[..n_w], d_s, p.mean_weight.ncols());
                let b = DVector::from_column_slice(&params[n_w..]);
                let mut pre = x * a.transpose();
                add_row_bias(&mut pre, &b);
                let out = p.activation.apply(pre);
                let err = &out - r;
                let g_pre = match p.activation {
                    Activation::Identity => err.scale(scale),
                    Activation::Tanh => {
                        err.zip_map(&out, |e, o| scale * e * (1.0 - o * o))
                    }
                };
                let g_a = g_pre.transpose() * x;
                let g_b = column_sums(&g_pre);
                let mut grad = flatten_rm(&g_a);
                grad.extend(g_b.iter().copied());
                adam.step(&mut params, &grad);
            }
            p.mean_weight = unflatten_rm(&params[..n_w], d_s, p.mean_weight.ncols());
            p.mean_bias = DVector::from_column_slice(&params[n_w..]);
        }

        // Recognition mean head: tanh(u Whᵀ + bh) Wmᵀ + bm → r. The hidden
        // layer is shared with the log-variance head, whose small random
        // output weights keep that head near its bias while the hidden layer
        // moves.
        {
            let rec = &mut model.recogs[j];
            let u = crate::alignnet::recog_inputs(
                &std.data.target,
                &std.data.sources[j],
                rec.alpha,
            );
            let h_dim = rec.hidden_weight.nrows();
            let u_dim = rec.hidden_weight.ncols();
            let d_s = rec.mean_weight.nrows();
            let n_wh = rec.hidden_weight.len();
            let n_wm = rec.mean_weight.len();
            let mut params = flatten_rm(&rec.hidden_weight);
            params.extend(rec.hidden_bias.iter().copied());
            params.extend(flatten_rm(&rec.mean_weight));
            params.extend(rec.mean_bias.iter().copied());
            let mut adam = AdamState::new(params.len(), PREFIT_LEARNING_RATE);
            for _ in 0..PREFIT_STEPS {
                let wh = unflatten_rm(&params[..n_wh], h_dim, u_dim);
                let bh = DVector::from_column_slice(&params[n_wh..n_wh + h_dim]);
                let wm = unflatten_rm(&params[n_wh + h_dim..n_wh + h_dim + n_wm], d_s, h_dim);
                let bm = DVector::from_column_slice(&params[n_wh + h_dim + n_wm..]);
                let mut hidden = &u * wh.transpose();
                add_row_bias(&mut hidden, &bh);
                let hidden = hidden.map(f64::tanh);
                let mut out = &hidden * wm.transpose();
                add_row_bias(&mut out, &bm);
                let g_out = (&out - r).scale(scale);
                let g_wm = g_out.transpose() * &hidden;
                let g_bm = column_sums(&g_out);
                let g_hidden = &g_out * &wm;
                let g_pre = g_hidden.zip_map(&hidden, |g, h| g * (1.0 - h * h));
                let g_wh = g_pre.transpose() * &u;
                let g_bh = column_sums(&g_pre);
                let mut grad = flatten_rm(&g_wh);
                grad.extend(g_bh.iter().copied());
                grad.extend(flatten_rm(&g_wm));
                grad.extend(g_bm.iter().copied());
                adam.step(&mut params, &grad);
            }
            rec.hidden_weight = unflatten_rm(&params[..n_wh], h_dim, u_dim);
            rec.hidden_bias = DVector::from_column_slice(&params[n_wh..n_wh + h_dim]);
            rec.mean_weight =
                unflatten_rm(&params[n_wh + h_dim..n_wh + h_dim + n_wm], d_s, h_dim);
            rec.mean_bias = DVector::from_column_slice(&params[n_wh + h_dim + n_wm..]);
        }
    }
    Ok(())
}

pub fn train(
    data: &TransferData,
    specs: &[ReferenceMapSpec],
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.objective.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::Config("epoch count must be positive".into()));
    }
    if data.sources.is_empty() {
        return Err(Error::invalid_argument("at least one source dataset is required"));
    }
    let std = standardize_transfer(&data.sources, &data.target);
    let references = resolve_references(data, &std, specs, cfg.seed)?;
    let ref_values: Vec<DMatrix<f64>> = references.iter().map(|r| r.values.clone()).collect();

    let mut dims = ModelDims::new(
        data.sources.iter().map(Dataset::dim).collect(),
        data.target.dim(),
    );
    dims.hidden_width = cfg.hidden_width;
    if let Some(a) = &cfg.alphas {
        if a.len() != data.sources.len() {
            return Err(Error::Config("one alpha required per source".into()));
        }
        dims.alphas = a.clone();
    }
    let mut init_rng = crate::rng::stream(cfg.seed, "init", 0);
    let mut model0 = ModelParams::init(&dims, &mut init_rng);
    prefit_alignment(&mut model0, &std, &ref_values)?;
    let layout = FlatLayout::of(&model0);
    let mut flat = layout.pack(&model0);

    let mut trace = match &cfg.trace_path {
        Some(p) => {
            let mut w =
                csv::Writer::from_path(p).map_err(|e| Error::Io(std::io::Error::other(e)))?;
            w.write_record(["epoch", "total", "rec", "kl", "phyr", "ssr"])
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            Some(w)
        }
        None => None,
    };

    let mut adam = AdamState::new(layout.n_params(), cfg.learning_rate);
    let mut eps_rng = crate::rng::stream(cfg.seed, "train-eps", 0);
    let rho_range = layout.rho_range();
    let threshold = cfg.learning_rate * cfg.objective.gamma;

    let mut window: VecDeque<f64> = VecDeque::with_capacity(cfg.smoothing_window.max(1));
    let mut best_smoothed = f64::INFINITY;
    let mut best_flat = flat.clone();
    let mut best_epoch = 0usize;
    let mut best_breakdown: Option<LossBreakdown> = None;

    for epoch in 0..cfg.epochs {
        let eval = evaluate(&layout, &flat, &std, &ref_values, &cfg.objective, &mut eps_rng)?;
        if !eval.breakdown.total.is_finite() {
            return Err(Error::numerical(format!(
                "objective became non-finite at epoch {epoch}"
            )));
        }
        if let Some(w) = trace.as_mut() {
            w.serialize((
                epoch,
                eval.breakdown.total,
                eval.breakdown.rec,
                eval.breakdown.kl,
                eval.breakdown.phyr,
                eval.breakdown.ssr,
            ))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }

        if window.len() == cfg.smoothing_window.max(1) {
            window.pop_front();
        }
        window.push_back(eval.breakdown.total);
        let smoothed = window.iter().sum::<f64>() / window.len() as f64;
        if smoothed < best_smoothed {
            best_smoothed = smoothed;
            best_flat.copy_from_slice(&flat);
            best_epoch = epoch;
            best_breakdown = Some(eval.breakdown);
        }

        adam.step(&mut flat, &eval.grad);
        if threshold > 0.0 {
            prox_l1(&mut flat[rho_range.clone()], threshold);
        }
    }
    if let Some(w) = trace.as_mut() {
        w.flush()?;
    }

    let params = layout.unpack(&best_flat)?;
    Ok(TrainedModel {
        params,
        source_states: std.source_states,
        target_state: std.target_state,
        references,
        best_epoch,
        best_smoothed_loss: best_smoothed,
        checkpoint_loss: best_breakdown.expect("at least one epoch ran"),
    })
}

/// On-disk model format marker.
pub const MODEL_FORMAT_VERSION: &str = "r2hgp-model-v1";

#[derive(Serialize, Deserialize)]
struct SerializedReference {
    spec: ReferenceMapSpec,
    values: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelEnvelope {
    version: String,
    source_dims: Vec<usize>,
    target_dim: usize,
    hidden_width: usize,
    alphas: Vec<f64>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    source_states: Vec<StandardizationState>,
    target_state: StandardizationState,
    references: Vec<SerializedReference>,
    best_epoch: usize,
    best_smoothed_loss: f64,
    checkpoint_loss: LossBreakdown,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn rows_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Config("reference value table is empty".into()));
    }
    let c = rows[0].len();
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::Config("ragged reference value table".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

/// Persist a trained model as a JSON envelope: format version, dimensions,
/// the flat parameter vector, per-domain standardizations, and the resolved
/// reference mappings.
pub fn save_model(path: impl AsRef<Path>, m: &TrainedModel) -> Result<()> {
    let layout = FlatLayout::of(&m.params);
    let env = ModelEnvelope {
        version: MODEL_FORMAT_VERSION.to_string(),
        source_dims: m.params.transfer.source_kernels.iter().map(|k| k.dim()).collect(),
        target_dim: m.params.transfer.disc_kernel.dim(),
        hidden_width: m.params.recogs.first().map(|r| r.hidden_width()).unwrap_or(0),
        alphas: m.params.recogs.iter().map(|r| r.alpha).collect(),
        activations: m.params.priors.iter().map(|p| p.activation).collect(),
        params: layout.pack(&m.params),
        source_states: m.source_states.clone(),
        target_state: m.target_state.clone(),
        references: m
            .references
            .iter()
            .map(|r| SerializedReference { spec: r.spec.clone(), values: matrix_rows(&r.values) })
            .collect(),
        best_epoch: m.best_epoch,
        best_smoothed_loss: m.best_smoothed_loss,
        checkpoint_loss: m.checkpoint_loss,
    };
    crate::dataio::write_results_json(path, &env)
}

/// Load a model saved by [`save_model`]. A different format version is
/// rejected rather than reinterpreted.
pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path)?;
    let env: ModelEnvelope =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("model file: {e}")))?;
    if env.version != MODEL_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "model format version mismatch: file has {:?}, this build reads {:?}",
            env.version, MODEL_FORMAT_VERSION
        )));
    }
    let dims = ModelDims {
        source_dims: env.source_dims.clone(),
        target_dim: env.target_dim,
        hidden_width: env.hidden_width,
        alphas: env.alphas.clone(),
    };
    // template for shapes only; every trainable value is overwritten
    let mut template_rng = crate::rng::stream(0, "load-template", 0);
    let mut template = ModelParams::init(&dims, &mut template_rng);
    for (p, a) in template.priors.iter_mut().zip(&env.activations) {
        p.activation = *a;
    }
    let layout = FlatLayout::of(&template);
    let params = layout.unpack(&env.params)?;
    let mut references = Vec::with_capacity(env.references.len());
    for r in &env.references {
        references.push(ReferenceMapping { values: rows_matrix(&r.values)?, spec: r.spec.clone() });
    }
    Ok(TrainedModel {
        params,
        source_states: env.source_states,
        target_state: env.target_state,
        references,
        best_epoch: env.best_epoch,
        best_smoothed_loss: env.best_smoothed_loss,
        checkpoint_loss: env.checkpoint_loss,
    })
}

/// Result of the hyperparameter grid search.
#[derive(Clone, Debug)]
pub struct HyperSearch {
    pub lambda: f64,
    pub gamma: f64,
    pub cv_rmse: f64,
    /// Every (λ, γ, mean validation RMSE) evaluated, in grid order.
    pub table: Vec<(f64, f64, f64)>,
}

/// Select (λ, γ) by k-fold cross-validation on the target data: folds are a
/// seeded shuffle split of the target samples, sources stay whole. The grid
/// is scanned in ascending order and later entries replace on ties, so equal
/// scores prefer stronger regularization.
pub fn select_hyperparams(
    data: &TransferData,
    specs: &[ReferenceMapSpec],
    base: &TrainConfig,
    lambdas: &[f64],
    gammas: &[f64],
    folds: usize,
) -> Result<HyperSearch> {
    let n_t = data.target.n();
    if folds < 2 || folds > n_t {
        return Err(Error::Config(format!(
            "fold count must lie in [2, {n_t}], got {folds}"
        )));
    }
    if lambdas.is_empty() || gammas.is_empty() {
        return Err(Error::Config("hyperparameter grids must be nonempty".into()));
    }

    let mut order: Vec<usize> = (0..n_t).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = crate::rng::stream(base.seed, "cv-folds", 0);
        order.shuffle(&mut rng);
    }
    // fold f takes the f-th chunk of the shuffled order
    let mut fold_of = vec![0usize; n_t];
    for (pos, &idx) in order.iter().enumerate() {
        fold_of[idx] = pos * folds / n_t;
    }

    let take_rows = |keep: &dyn Fn(usize) -> bool| -> (DMatrix<f64>, DVector<f64>) {
        let rows: Vec<usize> = (0..n_t).filter(|&i| keep(i)).collect();
        let x = DMatrix::from_fn(rows.len(), data.target.dim(), |i, j| {
            data.target.inputs[(rows[i], j)]
        });
        let y = DVector::from_fn(rows.len(), |i, _| data.target.outputs[rows[i]]);
        (x, y)
    };

    let mut best: Option<(f64, f64, f64)> = None;
    let mut table = Vec::with_capacity(lambdas.len() * gammas.len());
    for (gi, (&lambda, &gamma)) in lambdas
        .iter()
        .flat_map(|l| gammas.iter().map(move |g| (l, g)))
        .enumerate()
    {
        let mut fold_rmse = Vec::with_capacity(folds);
        for f in 0..folds {
            let (xt, yt) = take_rows(&|i| fold_of[i] != f);
            let (xv, yv) = take_rows(&|i| fold_of[i] == f);
            if xt.nrows() == 0 || xv.nrows() == 0 {
                continue;
            }
            let sub_data = TransferData {
                sources: data.sources.clone(),
                target: Dataset::new(xt, yt, data.target.domain_id)?,
            };
            let mut sub_cfg = base.clone();
            sub_cfg.objective.lambda = lambda;
            sub_cfg.objective.gamma = gamma;
            sub_cfg.trace_path = None;
            sub_cfg.seed = crate::rng::stream(base.seed, "cv-train", (gi * folds + f) as u64).random();

            let rmse = match train(&sub_data, specs, &sub_cfg) {
                Ok(model) => {
                    let mut rng =
                        crate::rng::stream(base.seed, "cv-pred", (gi * folds + f) as u64);
                    match model.predict(&sub_data, &xv, CV_PRED_DRAWS.0, CV_PRED_DRAWS.1, &mut rng)
                    {
                        Ok(pred) => {
                            let mut sq = 0.0;
                            for i in 0..yv.len() {
                                sq += (pred.mean[i] - yv[i]).powi(2);
                            }
                            (sq / yv.len() as f64).sqrt()
                        }
                        Err(_) => f64::INFINITY,
                    }
                }
                Err(_) => f64::INFINITY,
            };
            fold_rmse.push(rmse);
        }
        let mean = fold_rmse.iter().sum::<f64>() / fold_rmse.len().max(1) as f64;
        table.push((lambda, gamma, mean));
        if mean.is_finite() && best.map_or(true, |(_, _, b)| mean <= b) {
            best = Some((lambda, gamma, mean));
        }
    }

    let (lambda, gamma, cv_rmse) = best.ok_or_else(|| {
        Error::numerical("every hyperparameter combination failed cross-validation")
    })?;
    Ok(HyperSearch { lambda, gamma, cv_rmse, table })
}
