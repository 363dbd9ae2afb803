//! Small reverse-mode gradient engine over dense matrices.
//!
//! The training objective is a scalar built from a modest number of matrix
//! operations, so the engine records a tape of [`Op`] nodes holding full
//! `DMatrix<f64>` values (scalars are 1×1) and runs one backward sweep that
//! accumulates adjoints. Two fused ops carry custom analytic adjoints because
//! they dominate cost and numerical sensitivity: the squared-exponential
//! kernel (including gradients into its input matrices) and the zero-mean
//! Gaussian log-density through a Cholesky factorization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{Error, Result};

pub type NodeId = usize;

/// Jitter escalation schedule for Cholesky factorizations: retry with each
/// multiple of the identity added until one succeeds.
pub const JITTER_SCHEDULE: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Factor a symmetric matrix, escalating jitter on failure. Returns the
/// factorization and the jitter that was needed.
pub fn cholesky_with_jitter(c: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if !c.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("covariance contains non-finite entries"));
    }
    for &jitter in &JITTER_SCHEDULE {
        let candidate = if jitter == 0.0 {
            c.clone()
        } else {
            let mut m = c.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
            m
        };
        if let Some(chol) = Cholesky::new(candidate) {
            return Ok((chol, jitter));
        }
    }
    Err(Error::numerical(format!(
        "Cholesky failed after jitters {:?}",
        &JITTER_SCHEDULE[1..]
    )))
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Clamp(NodeId, f64, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    /// Matrix plus a 1×d row broadcast over every row.
    AddRowVec(NodeId, NodeId),
    /// 1×1 scalar node times a matrix node.
    ScalarMulMat(NodeId, NodeId),
    /// Square matrix plus a 1×1 scalar node times the identity.
    AddScaledEye(NodeId, NodeId),
    FrobNorm(NodeId),
    SeKernel { log_amp: NodeId, log_ls: NodeId, a: NodeId, b: NodeId },
    GaussLogLik(NodeId),
    /// Symmetric block matrix: square diagonal blocks in order (the last one
    /// is the target block) and cross blocks (domain index, n_i × n_last)
    /// mirrored across the diagonal. Omitted blocks are zero.
    SymBlock { diag: Vec<NodeId>, cross: Vec<(usize, NodeId)> },
}

struct Node {
    op: Op,
    value: DMatrix<f64>,
    /// Factorization cached by GaussLogLik for its backward pass.
    chol: Option<(Cholesky<f64, Dyn>, DVector<f64>)>,
}

/// Adjoints from one backward sweep, indexed by node.
pub struct Gradients {
    adj: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// Adjoint of `id`, as a zero matrix of the node's shape if the root did
    /// not depend on it.
    pub fn grad(&self, id: NodeId, nrows: usize, ncols: usize) -> DMatrix<f64> {
        match &self.adj[id] {
            Some(g) => g.clone(),
            None => DMatrix::zeros(nrows, ncols),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: DMatrix<f64>) -> NodeId {
        self.nodes.push(Node { op, value, chol: None });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &DMatrix<f64> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!((v.nrows(), v.ncols()), (1, 1), "node is not scalar");
        v[(0, 0)]
    }

    pub fn leaf(&mut self, value: DMatrix<f64>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> NodeId {
        self.leaf(DMatrix::from_element(1, 1, value))
    }

    pub fn leaf_row(&mut self, values: &[f64]) -> NodeId {
        self.leaf(DMatrix::from_row_slice(1, values.len(), values))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).component_mul(self.value(b));
        self.push(Op::MulElem(a, b), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = DMatrix::from_element(1, 1, self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn add_row_vec(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "broadcast operand must be a row vector");
        assert_eq!(r.ncols(), self.value(a).ncols());
        let mut v = self.value(a).clone();
        for i in 0..v.nrows() {
            for j in 0..v.ncols() {
                v[(i, j)] += r[(0, j)];
            }
        }
        self.push(Op::AddRowVec(a, row), v)
    }

    pub fn scalar_mul(&mut self, s: NodeId, m: NodeId) -> NodeId {
        let sv = self.scalar_value(s);
        let v = self.value(m) * sv;
        self.push(Op::ScalarMulMat(s, m), v)
    }

    pub fn add_scaled_eye(&mut self, m: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar_value(s);
        let mut v = self.value(m).clone();
        assert_eq!(v.nrows(), v.ncols(), "add_scaled_eye needs a square matrix");
        for i in 0..v.nrows() {
            v[(i, i)] += sv;
        }
        self.push(Op::AddScaledEye(m, s), v)
    }

    pub fn frob_norm(&mut self, a: NodeId) -> NodeId {
        let v = DMatrix::from_element(1, 1, self.value(a).norm());
        self.push(Op::FrobNorm(a), v)
    }

    pub fn se_kernel(&mut self, log_amp: NodeId, log_ls: NodeId, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!((1, self.value(a).ncols()), self.value(log_ls).shape(), "log_ls must be 1×d");
        let params = crate::kernels::KernelParams::new(
            self.scalar_value(log_amp),
            self.value(log_ls).iter().copied().collect(),
        );
        let k = crate::kernels::kernel_matrix(&params, self.value(a), self.value(b))
            .expect("se_kernel shape mismatch");
        self.push(Op::SeKernel { log_amp, log_ls, a, b }, k)
    }

    pub fn gauss_loglik(&mut self, c: NodeId, y: &DVector<f64>) -> Result<NodeId> {
        let cv = self.value(c);
        let n = cv.nrows();
        assert_eq!(n, cv.ncols());
        assert_eq!(n, y.len());
        let (chol, _jitter) = cholesky_with_jitter(cv)?;
        let alpha = chol.solve(y);
        let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let ll = -0.5 * (y.dot(&alpha) + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln());
        let id = self.push(Op::GaussLogLik(c), DMatrix::from_element(1, 1, ll));
        self.nodes[id].chol = Some((chol, alpha));
        Ok(id)
    }

    pub fn sym_block(&mut self, diag: Vec<NodeId>, cross: Vec<(usize, NodeId)>) -> NodeId {
        let sizes: Vec<usize> = diag
            .iter()
            .map(|&d| {
                let v = self.value(d);
                assert_eq!(v.nrows(), v.ncols(), "diagonal blocks must be square");
                v.nrows()
            })
            .collect();
        let offsets: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| {
                let at = *acc;
                *acc += s;
                Some(at)
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let last = sizes.len() - 1;
        let mut m = DMatrix::zeros(total, total);
        for (idx, &d) in diag.iter().enumerate() {
            m.view_mut((offsets[idx], offsets[idx]), (sizes[idx], sizes[idx]))
                .copy_from(self.value(d));
        }
        for &(idx, node) in &cross {
            assert!(idx < last, "cross blocks pair a source with the target block");
            let v = self.value(node);
            assert_eq!(v.shape(), (sizes[idx], sizes[last]));
            m.view_mut((offsets[idx], offsets[last]), (sizes[idx], sizes[last])).copy_from(v);
            m.view_mut((offsets[last], offsets[idx]), (sizes[last], sizes[idx]))
                .copy_from(&v.transpose());
        }
        self.push(Op::SymBlock { diag, cross }, m)
    }

    /// One reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut adj: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        adj[root] = Some(DMatrix::from_element(1, 1, 1.0));

        for id in (0..=root).rev() {
            let Some(g) = adj[id].clone() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, -g);
                }
                Op::MulElem(a, b) => {
                    accumulate(&mut adj, *a, g.component_mul(self.value(*b)));
                    accumulate(&mut adj, *b, g.component_mul(self.value(*a)));
                }
                Op::Exp(a) => {
                    accumulate(&mut adj, *a, g.component_mul(self.value(id)));
                }
                Op::Tanh(a) => {
                    let t = self.value(id);
                    accumulate(&mut adj, *a, g.component_mul(&t.map(|v| 1.0 - v * v)));
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj, *a, g * *c);
                }
                Op::AddScalar(a) => {
                    accumulate(&mut adj, *a, g);
                }
                Op::Clamp(a, lo, hi) => {
                    let input = self.value(*a);
                    let masked = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| {
                        let v = input[(i, j)];
                        if v > *lo && v < *hi {
                            g[(i, j)]
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj, *a, masked);
                }
                Op::MatMul(a, b) => {
                    accumulate(&mut adj, *a, &g * self.value(*b).transpose());
                    accumulate(&mut adj, *b, self.value(*a).transpose() * &g);
                }
                Op::Transpose(a) => {
                    accumulate(&mut adj, *a, g.transpose());
                }
                Op::Sum(a) => {
                    let v = self.value(*a);
                    accumulate(
                        &mut adj,
                        *a,
                        DMatrix::from_element(v.nrows(), v.ncols(), g[(0, 0)]),
                    );
                }
                Op::AddRowVec(a, row) => {
                    let mut row_grad = DMatrix::zeros(1, g.ncols());
                    for j in 0..g.ncols() {
                        row_grad[(0, j)] = g.column(j).sum();
                    }
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *row, row_grad);
                }
                Op::ScalarMulMat(s, m) => {
                    let sv = self.scalar_value(*s);
                    let dot = g.component_mul(self.value(*m)).sum();
                    accumulate(&mut adj, *s, DMatrix::from_element(1, 1, dot));
                    accumulate(&mut adj, *m, g * sv);
                }
                Op::AddScaledEye(m, s) => {
                    accumulate(&mut adj, *s, DMatrix::from_element(1, 1, g.trace()));
                    accumulate(&mut adj, *m, g);
                }
                Op::FrobNorm(a) => {
                    let norm = self.value(id)[(0, 0)];
                    if norm > 0.0 {
                        accumulate(&mut adj, *a, self.value(*a) * (g[(0, 0)] / norm));
                    }
                }
                Op::SeKernel { log_amp, log_ls, a, b } => {
                    self.backward_se_kernel(&mut adj, &g, *log_amp, *log_ls, *a, *b, id);
                }
                Op::GaussLogLik(c) => {
                    let (chol, alpha) =
                        self.nodes[id].chol.as_ref().expect("loglik node lost its factorization");
                    let c_inv = chol.inverse();
                    let outer = alpha * alpha.transpose();
                    accumulate(&mut adj, *c, (outer - c_inv) * (0.5 * g[(0, 0)]));
                }
                Op::SymBlock { diag, cross } => {
                    let sizes: Vec<usize> = diag.iter().map(|&d| self.value(d).nrows()).collect();
                    let offsets: Vec<usize> = sizes
                        .iter()
                        .scan(0, |acc, &s| {
                            let at = *acc;
                            *acc += s;
                            Some(at)
                        })
                        .collect();
                    let last = sizes.len() - 1;
                    for (idx, &d) in diag.iter().enumerate() {
                        let sub = g.view((offsets[idx], offsets[idx]), (sizes[idx], sizes[idx]));
                        accumulate(&mut adj, d, sub.into_owned());
                    }
                    for &(idx, node) in cross {
                        let fwd = g.view((offsets[idx], offsets[last]), (sizes[idx], sizes[last]));
                        let mirror =
                            g.view((offsets[last], offsets[idx]), (sizes[last], sizes[idx]));
                        accumulate(&mut adj, node, fwd.into_owned() + mirror.transpose());
                    }
                }
            }
        }
        Gradients { adj }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_se_kernel(
        &self,
        adj: &mut Vec<Option<DMatrix<f64>>>,
        g: &DMatrix<f64>,
        log_amp: NodeId,
        log_ls: NodeId,
        a: NodeId,
        b: NodeId,
        out: NodeId,
    ) {
        let k = self.value(out);
        let av = self.value(a);
        let bv = self.value(b);
        let (n, m) = k.shape();
        let dim = av.ncols();
        let lam: Vec<f64> = self.value(log_ls).iter().map(|l| (2.0 * l).exp()).collect();

        let gk = g.component_mul(k);
        accumulate(adj, log_amp, DMatrix::from_element(1, 1, 2.0 * gk.sum()));

        let mut g_ls = DMatrix::zeros(1, dim);
        let mut g_a = DMatrix::zeros(n, dim);
        let mut g_b = DMatrix::zeros(m, dim);
        for c in 0..dim {
            let inv_lam = 1.0 / lam[c];
            for i in 0..n {
                for j in 0..m {
                    let delta = av[(i, c)] - bv[(j, c)];
                    let w = gk[(i, j)] * inv_lam;
                    g_ls[(0, c)] += w * delta * delta;
                    g_a[(i, c)] -= w * delta;
                    g_b[(j, c)] += w * delta;
                }
            }
        }
        accumulate(adj, log_ls, g_ls);
        accumulate(adj, a, g_a);
        accumulate(adj, b, g_b);
    }
}

fn accumulate(adj: &mut [Option<DMatrix<f64>>], id: NodeId, delta: DMatrix<f64>) {
    match &mut adj[id] {
        Some(acc) => *acc += delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Row-major flattening used wherever matrices map into flat parameter
/// vectors; nalgebra's own iteration order is column-major.
pub fn flatten_rm(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn unflatten_rm(values: &[f64], nrows: usize, ncols: usize) -> DMatrix<f64> {
    assert_eq!(values.len(), nrows * ncols);
    DMatrix::from_row_slice(nrows, ncols, values)
}
