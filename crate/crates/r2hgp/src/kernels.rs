//! Squared-exponential (ARD) kernel: evaluation, matrix construction, and
//! analytic derivatives with respect to hyperparameters and inputs.
//!
//! Hyperparameters live in log space so positivity is structural:
//! k(x, x') = exp(2·log_amplitude) · exp(−½ Σ_k (x_k − x'_k)² / exp(2·log_lengthscale_k)).

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Amplitude and per-dimension length-scales of one SE kernel, in log space.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    pub log_amplitude: f64,
    pub log_lengthscales: Vec<f64>,
}

impl KernelParams {
    pub fn new(log_amplitude: f64, log_lengthscales: Vec<f64>) -> Self {
        KernelParams { log_amplitude, log_lengthscales }
    }

    /// Unit kernel: amplitude 1, all length-scales 1 (log 0).
    pub fn unit(dim: usize) -> Self {
        KernelParams { log_amplitude: 0.0, log_lengthscales: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    fn amplitude_sq(&self) -> f64 {
        (2.0 * self.log_amplitude).exp()
    }

    /// Λ diagonal: squared length-scales.
    fn lengthscales_sq(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| (2.0 * l).exp()).collect()
    }
}

/// Evaluate the kernel for a single pair of points.
pub fn kernel_eval(p: &KernelParams, x: &[f64], x2: &[f64]) -> Result<f64> {
    if x.len() != p.dim() || x2.len() != p.dim() {
        return Err(Error::invalid_argument(format!(
            "kernel over {} dims applied to points of dims {} and {}",
            p.dim(),
            x.len(),
            x2.len()
        )));
    }
    let lam = p.lengthscales_sq();
    let mut q = 0.0;
    for k in 0..x.len() {
        let d = x[k] - x2[k];
        q += d * d / lam[k];
    }
    Ok(p.amplitude_sq() * (-0.5 * q).exp())
}

fn check_matrix_dims(p: &KernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.ncols() != p.dim() || b.ncols() != p.dim() {
        return Err(Error::invalid_argument(format!(
            "kernel over {} dims applied to matrices with {} and {} columns",
            p.dim(),
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Cross-covariance matrix: entry (i, j) is k(Aᵢ, Bⱼ).
pub fn kernel_matrix(p: &KernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_matrix_dims(p, a, b)?;
    let s = p.amplitude_sq();
    let lam = p.lengthscales_sq();
    let (n, m) = (a.nrows(), b.nrows());
    let mut k = DMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut q = 0.0;
            for c in 0..p.dim() {
                let d = a[(i, c)] - b[(j, c)];
                q += d * d / lam[c];
            }
            k[(i, j)] = s * (-0.5 * q).exp();
        }
    }
    Ok(k)
}

/// All analytic partial derivatives of a kernel matrix.
///
/// Each field holds ∂K/∂θ with the same n×m layout as the matrix itself;
/// input gradients come as one n×m matrix per input dimension, where
/// `d_a[c][(i, j)]` is ∂K_ij/∂A_ic and `d_b[c][(i, j)]` is ∂K_ij/∂B_jc.
#[derive(Clone, Debug)]
pub struct KernelGrads {
    pub matrix: DMatrix<f64>,
    pub d_log_amplitude: DMatrix<f64>,
    pub d_log_lengthscales: Vec<DMatrix<f64>>,
    pub d_a: Vec<DMatrix<f64>>,
    pub d_b: Vec<DMatrix<f64>>,
}

/// Kernel matrix together with every partial derivative.
///
/// With δ = A_ic − B_jc and λ_c = exp(2·log_lengthscale_c):
/// ∂K/∂log α = 2K, ∂K/∂log ℓ_c = K·δ²/λ_c, ∂K/∂A_ic = −K·δ/λ_c = −∂K/∂B_jc.
pub fn kernel_grads(p: &KernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<KernelGrads> {
    check_matrix_dims(p, a, b)?;
    let matrix = kernel_matrix(p, a, b)?;
    let lam = p.lengthscales_sq();
    let (n, m, dim) = (a.nrows(), b.nrows(), p.dim());

    let d_log_amplitude = &matrix * 2.0;
    let mut d_log_lengthscales = vec![DMatrix::zeros(n, m); dim];
    let mut d_a = vec![DMatrix::zeros(n, m); dim];
    let mut d_b = vec![DMatrix::zeros(n, m); dim];
    for c in 0..dim {
        for i in 0..n {
            for j in 0..m {
                let delta = a[(i, c)] - b[(j, c)];
                let kij = matrix[(i, j)];
                d_log_lengthscales[c][(i, j)] = kij * delta * delta / lam[c];
                d_a[c][(i, j)] = -kij * delta / lam[c];
                d_b[c][(i, j)] = kij * delta / lam[c];
            }
        }
    }
    Ok(KernelGrads { matrix, d_log_amplitude, d_log_lengthscales, d_a, d_b })
}
