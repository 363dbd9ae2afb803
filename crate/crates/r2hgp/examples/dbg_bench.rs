//! Temporary probe: full benchmark run via the production harness, printing
//! the aggregate numbers needed to check the release thresholds.

use std::time::Instant;

use r2hgp::bench::{run_benchmark, BenchSettings, CaseId, Method, SimCaseSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let case = match args.get(1).map(|s| s.as_str()) {
        Some("1") => CaseId::Case1,
        Some("3") => CaseId::Case3,
        _ => CaseId::Case2,
    };
    let methods: Vec<Method> = match args.get(2).map(|s| s.as_str()) {
        Some("all") => vec![
            Method::R2Hgp,
            Method::Hgp,
            Method::PhyrHgp,
            Method::SsrHgp,
            Method::Tgp,
            Method::Imc,
        ],
        Some("abl") => vec![Method::R2Hgp, Method::SsrHgp, Method::Hgp, Method::Tgp, Method::Imc],
        _ => vec![Method::R2Hgp, Method::Tgp, Method::Imc],
    };
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20260815);
    let settings = BenchSettings::desk();

    let spec = SimCaseSpec::canonical(case);
    let t0 = Instant::now();
    let report = run_benchmark(&spec, &methods, &settings, seed).unwrap();
    println!("total wall time: {:?}", t0.elapsed());

    for (name, m) in &report.methods {
        println!(
            "{name:8} rmse mean={:?} std={:?}  r2 mean={:?}  mnll mean={:?}  failures={}",
            m.rmse.mean, m.rmse.std, m.r2.mean, m.mnll.mean, m.failures.len()
        );
        println!("  rmse per rep: {:?}", m.rmse.per_rep);
        if let Some(rho) = &m.rho {
            for (r, v) in rho.iter().enumerate() {
                if let Some(v) = v {
                    let pass = v.len() >= 3 && {
                        let a: Vec<f64> = v.iter().map(|x| x.abs()).collect();
                        a[2] < a[0] && a[2] < a[1] && a[2] < 0.1 * a[0].max(a[1])
                    };
                    println!("  rep {r}: rho={v:?} sel={}", if pass { "PASS" } else { "fail" });
                }
            }
        }
    }
}
