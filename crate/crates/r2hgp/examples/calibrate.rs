//! Temporary timing/quality probe for choosing benchmark budgets.

use std::time::Instant;

use rand::Rng;

use r2hgp::bench::{
    gen_case, metric_mnll, metric_r2, metric_rmse, BenchSettings, CaseId, SimCaseSpec,
};
use r2hgp::baselines::{imc_fit, imc_predict, tgp_fit, tgp_predict};
use r2hgp::objective::ObjectiveConfig;
use r2hgp::optim::{train, TrainConfig};
use r2hgp::rng::stream;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let case = match args.get(1).map(|s| s.as_str()) {
        Some("1") => CaseId::Case1,
        Some("3") => CaseId::Case3,
        _ => CaseId::Case2,
    };
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let gamma: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let lambda: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let rep: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0);
    let s = BenchSettings::desk();

    let spec = SimCaseSpec::canonical(case);
    let rep_seed: u64 = stream(20260815, "bench-rep", rep).random();
    let t0 = Instant::now();
    let gen = gen_case(&spec, rep_seed).unwrap();
    let data = gen.training_data();
    println!("gen: {:?}  (n_T={}, test={})", t0.elapsed(), data.target.n(), gen.test_inputs.nrows());

    // TGP
    let t0 = Instant::now();
    let gp = tgp_fit(&data.target, stream(rep_seed, "method-fit", 4).random()).unwrap();
    let t_fit = t0.elapsed();
    let pred = tgp_predict(&gp, &gen.test_inputs).unwrap();
    println!(
        "TGP   fit {:?} pred {:?}  rmse={:.4} r2={:.4} mnll={:.4}",
        t_fit,
        t0.elapsed() - t_fit,
        metric_rmse(&pred.mean, &gen.test_outputs).unwrap(),
        metric_r2(&pred.mean, &gen.test_outputs).unwrap(),
        metric_mnll(&pred, &gen.test_outputs).unwrap()
    );

    // IMC
    let t0 = Instant::now();
    let m = imc_fit(&data, case.single_source_index(), stream(rep_seed, "method-fit", 5).random())
        .unwrap();
    let t_fit = t0.elapsed();
    let pred = imc_predict(&m, &gen.test_inputs).unwrap();
    println!(
        "IMC   fit {:?} pred {:?}  rmse={:.4} r2={:.4} mnll={:.4}",
        t_fit,
        t0.elapsed() - t_fit,
        metric_rmse(&pred.mean, &gen.test_outputs).unwrap(),
        metric_r2(&pred.mean, &gen.test_outputs).unwrap(),
        metric_mnll(&pred, &gen.test_outputs).unwrap()
    );

    // Transfer model
    let t0 = Instant::now();
    let cfg = TrainConfig {
        objective: ObjectiveConfig {
            mu: s.mu,
            beta: s.beta,
            lambda,
            gamma,
            l_draws: s.l_draws,
            m_draws: s.m_draws,
        },
        epochs,
        learning_rate: s.learning_rate,
        smoothing_window: s.smoothing_window,
        hidden_width: s.hidden_width,
        alphas: None,
        seed: stream(rep_seed, "method-fit", 0).random(),
        trace_path: None,
    };
    let model = train(&data, &gen.references, &cfg).unwrap();
    let t_fit = t0.elapsed();
    let mut prng = stream(rep_seed, "method-pred", 0);
    let pred = model.predict(&data, &gen.test_inputs, s.k_draws, s.w_draws, &mut prng).unwrap();
    println!(
        "R2HGP fit {:?} pred {:?}  rmse={:.4} r2={:.4} mnll={:.4}",
        t_fit,
        t0.elapsed() - t_fit,
        metric_rmse(&pred.mean, &gen.test_outputs).unwrap(),
        metric_r2(&pred.mean, &gen.test_outputs).unwrap(),
        metric_mnll(&pred, &gen.test_outputs).unwrap()
    );
    println!(
        "rho = {:?}  best_epoch = {}  checkpoint = {:?}",
        model.rho(),
        model.best_epoch,
        model.checkpoint_loss
    );
}
