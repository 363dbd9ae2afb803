//! Temporary probe: joint log-likelihood as a function of the transfer
//! coefficients under ideal reference alignment, case 2.

use nalgebra::DMatrix;
use r2hgp::alignnet::{resolve_reference, ReferenceMapSpec};
use r2hgp::bench::{gen_case, CaseId, SimCaseSpec};
use r2hgp::dataio::standardize_transfer;
use r2hgp::gpcore::{assemble_cov, joint_loglik, JointInputs, TransferParams};
use r2hgp::kernels::KernelParams;
use r2hgp::rng::stream;
use rand::Rng;

fn main() {
    let spec = SimCaseSpec::canonical(CaseId::Case2);
    let rep_seed: u64 = stream(20260815, "bench-rep", 0).random();
    let gen = gen_case(&spec, rep_seed).unwrap();
    let data = gen.training_data();
    let std = standardize_transfer(&data.sources, &data.target);
    let y = std.data.stacked_outputs();

    // Ideal aligned inputs from the stated references (standardized source
    // coordinates at the target training points).
    let z1 = resolve_reference(
        &ReferenceMapSpec::Subset { indices: vec![0] },
        &data.target.inputs,
        &std.source_states[0],
    )
    .unwrap()
    .values;
    let z2 = resolve_reference(
        &ReferenceMapSpec::Subset { indices: vec![1] },
        &data.target.inputs,
        &std.source_states[1],
    )
    .unwrap()
    .values;
    let z3 = DMatrix::zeros(data.target.n(), 2);

    let source_inputs: Vec<DMatrix<f64>> =
        std.data.sources.iter().map(|s| s.inputs.clone()).collect();

    for &log_ls in &[0.0f64, -0.7, -1.2] {
        for &disc_scale in &[1.0f64, 0.3, 0.1] {
            print!("ls=e^{log_ls:+.1} sd={disc_scale:3.1} | ");
            for &rho in &[0.0f64, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2] {
                let t = TransferParams {
                    rho: vec![rho, rho, 0.0],
                    log_noise: std
                        .source_states
                        .iter()
                        .chain(std::iter::once(&std.target_state))
                        .map(|st| ((0.2f64 / st.output_std) * (0.2 / st.output_std)).ln())
                        .collect(),
                    log_disc_scale: (disc_scale * disc_scale_f(disc_scale)).ln(),
                    source_kernels: vec![
                        KernelParams { log_amplitude: 0.0, log_lengthscales: vec![log_ls] },
                        KernelParams { log_amplitude: 0.0, log_lengthscales: vec![log_ls] },
                        KernelParams { log_amplitude: 0.0, log_lengthscales: vec![log_ls; 2] },
                    ],
                    disc_kernel: KernelParams { log_amplitude: 0.0, log_lengthscales: vec![log_ls; 2] },
                };
                let inp = JointInputs {
                    source_inputs: &source_inputs,
                    aligned: &[z1.clone(), z2.clone(), z3.clone()],
                    target_inputs: &std.data.target.inputs,
                };
                let cov = assemble_cov(&t, &inp).unwrap();
                let ll = joint_loglik(&cov, &y).unwrap();
                print!("ρ={rho:.1}:{ll:8.2} ");
            }
            println!();
        }
    }
}

fn disc_scale_f(s: f64) -> f64 {
    s
}
