//! Temporary probe: training-dynamics trace (ρ, alignment error, variances).

use nalgebra::DMatrix;
use r2hgp::alignnet::prior_forward;
use r2hgp::bench::{gen_case, CaseId, SimCaseSpec};
use r2hgp::dataio::standardize_transfer;
use r2hgp::gpcore::{ModelDims, ModelParams};
use r2hgp::objective::{evaluate, ObjectiveConfig};
use r2hgp::optim::{prox_l1, resolve_references, AdamState, FlatLayout};
use r2hgp::rng::stream;
use rand::Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lambda: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let gamma: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let mu: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.7);

    let spec = SimCaseSpec::canonical(CaseId::Case2);
    let rep: u64 = std::env::var("REP").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    let rep_seed: u64 = stream(20260815, "bench-rep", rep).random();
    let gen = gen_case(&spec, rep_seed).unwrap();
    let data = gen.training_data();
    let std = standardize_transfer(&data.sources, &data.target);
    let seed: u64 = stream(rep_seed, "method-fit", 0).random();
    let refs = resolve_references(&data, &std, &gen.references, seed).unwrap();
    let ref_values: Vec<DMatrix<f64>> = refs.iter().map(|r| r.values.clone()).collect();

    let dims = ModelDims::new(
        std.data.sources.iter().map(|s| s.dim()).collect(),
        std.data.target.dim(),
    );
    let mut model = ModelParams::init(&dims, &mut stream(seed, "init", 0));
    if let Ok(pb) = std::env::var("PRIOR_LV_BIAS") {
        let v: f64 = pb.parse().unwrap();
        for p in &mut model.priors {
            p.logvar_bias.fill(v);
        }
    }
    if let Ok(rb) = std::env::var("RECOG_LV_BIAS") {
        let v: f64 = rb.parse().unwrap();
        for r in &mut model.recogs {
            r.logvar_bias.fill(v);
        }
    }
    if let Ok(db) = std::env::var("DISC_LV_BIAS") {
        model.transfer.log_disc_scale = db.parse().unwrap();
    }
    if let Ok(dl) = std::env::var("DISC_LS") {
        let v: f64 = dl.parse().unwrap();
        for l in &mut model.transfer.disc_kernel.log_lengthscales {
            *l = v;
        }
    }
    if std::env::var("NO_PREFIT").is_err() {
        r2hgp::optim::prefit_alignment(&mut model, &std, &ref_values).unwrap();
    }
    let layout = FlatLayout::of(&model);
    let mut flat = layout.pack(&model);
    let mut adam = AdamState::new(flat.len(), 2e-3);
    let cfg = ObjectiveConfig { mu, beta: 0.8, lambda, gamma, l_draws: 2, m_draws: 2 };
    let mut eps_rng = stream(seed, "train-eps", 0);

    for epoch in 0..epochs {
        let eval = evaluate(&layout, &flat, &std, &ref_values, &cfg, &mut eps_rng).unwrap();
        adam.step(&mut flat, &eval.grad);
        let thr = 2e-3 * gamma;
        if thr > 0.0 {
            let r = layout.rho_range();
            prox_l1(&mut flat[r], thr);
        }
        if epoch % 100 == 0 || epoch + 1 == epochs {
            let m = layout.unpack(&flat).unwrap();
            let mut align = Vec::new();
            let mut pstd = Vec::new();
            for j in 0..m.n_sources() {
                let p = prior_forward(&m.priors[j], &std.data.target.inputs).unwrap();
                align.push((&p.means - &ref_values[j]).norm() / (ref_values[j].nrows() as f64).sqrt());
                pstd.push(p.stds.mean());
            }
            println!(
                "ep {epoch:4}  total {:9.3}  rec {:9.3}  kl {:8.3}  phyr {:7.3}  rho [{:+.3} {:+.3} {:+.3}]  align [{:.3} {:.3} {:.3}]  pstd [{:.3} {:.3} {:.3}]  sigd {:+.2} noiseT {:+.2}",
                eval.breakdown.total,
                eval.breakdown.rec,
                eval.breakdown.kl,
                eval.breakdown.phyr,
                flat[0], flat[1], flat[2],
                align[0], align[1], align[2],
                pstd[0], pstd[1], pstd[2],
                m.transfer.log_disc_scale,
                m.transfer.log_noise[3],
            );
        }
    }
}
