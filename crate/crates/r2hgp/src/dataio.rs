//! Dataset containers, standardization, Latin hypercube sampling, and CSV I/O.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which domain a dataset belongs to: one of the sources (1-based index) or
/// the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainId {
    Source(usize),
    Target,
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainId::Source(j) => write!(f, "source{j}"),
            DomainId::Target => write!(f, "target"),
        }
    }
}

/// Input matrix plus output vector for one domain.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub outputs: DVector<f64>,
    pub domain_id: DomainId,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, outputs: DVector<f64>, domain_id: DomainId) -> Result<Self> {
        if inputs.nrows() != outputs.len() {
            return Err(Error::invalid_argument(format!(
                "{} inputs rows vs {} outputs",
                inputs.nrows(),
                outputs.len()
            )));
        }
        if inputs.nrows() == 0 || inputs.ncols() == 0 {
            return Err(Error::invalid_argument("dataset needs n >= 1 and d >= 1"));
        }
        Ok(Dataset { inputs, outputs, domain_id })
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn with_domain(mut self, domain_id: DomainId) -> Self {
        self.domain_id = domain_id;
        self
    }
}

/// Source datasets together with the target dataset they transfer into.
#[derive(Clone, Debug)]
pub struct TransferData {
    pub sources: Vec<Dataset>,
    pub target: Dataset,
}

impl TransferData {
    /// All outputs stacked source-by-source with the target block last; the
    /// order every joint-covariance routine assumes.
    pub fn stacked_outputs(&self) -> DVector<f64> {
        let total = self.sources.iter().map(Dataset::n).sum::<usize>() + self.target.n();
        let mut y = DVector::zeros(total);
        let mut at = 0;
        for s in &self.sources {
            y.rows_mut(at, s.n()).copy_from(&s.outputs);
            at += s.n();
        }
        y.rows_mut(at, self.target.n()).copy_from(&self.target.outputs);
        y
    }
}

/// Affine maps that take one domain's raw data to standardized coordinates:
/// outputs to zero mean and unit variance, inputs to the unit box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationState {
    pub output_mean: f64,
    pub output_std: f64,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    /// Input dimensions that were constant in the data and are therefore
    /// mapped by the identity instead of a degenerate rescale.
    pub degenerate_dims: Vec<usize>,
}

impl StandardizationState {
    pub fn standardize_inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for d in 0..x.ncols() {
            let (lo, hi) = (self.input_lower[d], self.input_upper[d]);
            for i in 0..x.nrows() {
                out[(i, d)] = (x[(i, d)] - lo) / (hi - lo);
            }
        }
        out
    }

    pub fn destandardize_inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for d in 0..x.ncols() {
            let (lo, hi) = (self.input_lower[d], self.input_upper[d]);
            for i in 0..x.nrows() {
                out[(i, d)] = lo + x[(i, d)] * (hi - lo);
            }
        }
        out
    }

    pub fn standardize_outputs(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.output_mean) / self.output_std)
    }

    pub fn destandardize_outputs(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.output_std + self.output_mean)
    }

    /// Rescale a predictive covariance back to raw output units.
    pub fn destandardize_cov(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        v * (self.output_std * self.output_std)
    }
}

/// Standardize one dataset, returning the transformed copy and the state
/// needed to undo the transform on predictions.
///
/// Output standardization uses the population (divide-by-n) standard
/// deviation; a constant output vector falls back to unit scale. Constant
/// input columns are kept as-is and flagged in `degenerate_dims`.
pub fn standardize(ds: &Dataset) -> (Dataset, StandardizationState) {
    let n = ds.n();
    let d = ds.dim();
    let output_mean = ds.outputs.mean();
    let var = ds.outputs.iter().map(|v| (v - output_mean).powi(2)).sum::<f64>() / n as f64;
    let output_std = if n < 2 || var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };

    let mut input_lower = vec![0.0; d];
    let mut input_upper = vec![1.0; d];
    let mut degenerate_dims = Vec::new();
    for c in 0..d {
        let col = ds.inputs.column(c);
        let lo = col.min();
        let hi = col.max();
        if hi - lo < 1e-12 {
            // Identity map: lower 0, upper 1 leaves the column untouched.
            degenerate_dims.push(c);
        } else {
            input_lower[c] = lo;
            input_upper[c] = hi;
        }
    }

    let state = StandardizationState {
        output_mean,
        output_std,
        input_lower,
        input_upper,
        degenerate_dims,
    };
    let std_ds = Dataset {
        inputs: state.standardize_inputs(&ds.inputs),
        outputs: state.standardize_outputs(&ds.outputs),
        domain_id: ds.domain_id,
    };
    (std_ds, state)
}

/// A transfer problem with every domain standardized independently.
#[derive(Clone, Debug)]
pub struct StandardizedTransfer {
    pub data: TransferData,
    pub source_states: Vec<StandardizationState>,
    pub target_state: StandardizationState,
}

pub fn standardize_transfer(sources: &[Dataset], target: &Dataset) -> StandardizedTransfer {
    let mut std_sources = Vec::with_capacity(sources.len());
    let mut source_states = Vec::with_capacity(sources.len());
    for s in sources {
        let (ds, st) = standardize(s);
        std_sources.push(ds);
        source_states.push(st);
    }
    let (std_target, target_state) = standardize(target);
    StandardizedTransfer {
        data: TransferData { sources: std_sources, target: std_target },
        source_states,
        target_state,
    }
}

/// Latin hypercube sample: `n` points in the box given by `bounds`, one point
/// per equal-width stratum in every dimension, strata randomly permuted per
/// dimension. Deterministic given the generator state.
pub fn lhs_sample(n: usize, bounds: &[(f64, f64)], rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    if n == 0 || bounds.is_empty() {
        return Err(Error::invalid_argument("lhs_sample needs n >= 1 and d >= 1"));
    }
    for (k, &(lo, hi)) in bounds.iter().enumerate() {
        if !(hi > lo) {
            return Err(Error::invalid_argument(format!(
                "degenerate bounds ({lo}, {hi}) in dimension {k}"
            )));
        }
    }
    let mut out = DMatrix::zeros(n, bounds.len());
    for (k, &(lo, hi)) in bounds.iter().enumerate() {
        let width = (hi - lo) / n as f64;
        let mut vals: Vec<f64> = (0..n)
            .map(|i| lo + (i as f64 + rng.random::<f64>()) * width)
            .collect();
        vals.shuffle(rng);
        for (i, v) in vals.into_iter().enumerate() {
            out[(i, k)] = v;
        }
    }
    Ok(out)
}

/// Seeded convenience wrapper around [`lhs_sample`].
pub fn lhs_sample_seeded(n: usize, bounds: &[(f64, f64)], seed: u64) -> Result<DMatrix<f64>> {
    lhs_sample(n, bounds, &mut crate::rng::stream(seed, "lhs", 0))
}

/// Load a dataset from a CSV file with header `x1,...,xd,y`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Parse { line: 1, msg: "need columns x1..xd then y".into() });
    }
    let d = headers.len() - 1;
    for (k, name) in headers.iter().enumerate() {
        let expected = if k < d { format!("x{}", k + 1) } else { "y".to_string() };
        if name != expected {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header column {expected:?}, found {name:?}"),
            });
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut outputs: Vec<f64> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != d + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", d + 1, record.len()),
            });
        }
        let mut row = Vec::with_capacity(d);
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric value {field:?} in column {}", k + 1),
            })?;
            if k < d {
                row.push(v);
            } else {
                outputs.push(v);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 1, msg: "no data rows".into() });
    }
    let n = rows.len();
    let inputs = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    Dataset::new(inputs, DVector::from_vec(outputs), DomainId::Target)
}

/// Write a dataset as CSV with the canonical `x1,...,xd,y` header.
pub fn write_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut body = String::new();
    let header: Vec<String> =
        (1..=ds.dim()).map(|k| format!("x{k}")).chain(std::iter::once("y".into())).collect();
    body.push_str(&header.join(","));
    body.push('\n');
    for i in 0..ds.n() {
        let mut fields: Vec<String> =
            (0..ds.dim()).map(|j| format!("{}", ds.inputs[(i, j)])).collect();
        fields.push(format!("{}", ds.outputs[i]));
        body.push_str(&fields.join(","));
        body.push('\n');
    }
    std::fs::write(path, body)?;
    Ok(())
}

/// Serialize a results structure as pretty JSON. Byte-deterministic given an
/// identical value (map keys must already be ordered by the value's type).
pub fn write_results_json(path: impl AsRef<Path>, results: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(results)
        .map_err(|e| Error::InvalidState(format!("results serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_dataset() -> Dataset {
        let inputs = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 2.0, 5.0, 4.0, 3.0]);
        let outputs = DVector::from_vec(vec![1.0, 2.0, 6.0]);
        Dataset::new(inputs, outputs, DomainId::Target).unwrap()
    }

    #[test]
    fn dataset_shape_mismatch_rejected() {
        let inputs = DMatrix::zeros(3, 2);
        let outputs = DVector::zeros(2);
        assert!(Dataset::new(inputs, outputs, DomainId::Target).is_err());
    }

    #[test]
    fn standardize_two_point_outputs() {
        let ds = Dataset::new(
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DVector::from_vec(vec![0.0, 2.0]),
            DomainId::Target,
        )
        .unwrap();
        let (std_ds, st) = standardize(&ds);
        // population std of {0, 2} is 1, mean 1
        assert_abs_diff_eq!(st.output_mean, 1.0);
        assert_abs_diff_eq!(st.output_std, 1.0);
        assert_abs_diff_eq!(std_ds.outputs[0], -1.0);
        assert_abs_diff_eq!(std_ds.outputs[1], 1.0);
    }

    #[test]
    fn standardize_constant_outputs_falls_back() {
        let ds = Dataset::new(
            DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]),
            DVector::from_vec(vec![2.0, 2.0, 2.0]),
            DomainId::Target,
        )
        .unwrap();
        let (std_ds, st) = standardize(&ds);
        assert_abs_diff_eq!(st.output_std, 1.0);
        for v in std_ds.outputs.iter() {
            assert_abs_diff_eq!(*v, 0.0);
        }
    }

    #[test]
    fn standardize_constant_input_column_flagged_identity() {
        let ds = Dataset::new(
            DMatrix::from_row_slice(3, 2, &[1.5, 0.0, 1.5, 2.0, 1.5, 4.0]),
            DVector::from_vec(vec![0.0, 1.0, 2.0]),
            DomainId::Target,
        )
        .unwrap();
        let (std_ds, st) = standardize(&ds);
        assert_eq!(st.degenerate_dims, vec![0]);
        for i in 0..3 {
            assert_abs_diff_eq!(std_ds.inputs[(i, 0)], 1.5);
        }
        assert_abs_diff_eq!(std_ds.inputs[(2, 1)], 1.0);
    }

    #[test]
    fn standardize_round_trip() {
        let ds = toy_dataset();
        let (std_ds, st) = standardize(&ds);
        let back_in = st.destandardize_inputs(&std_ds.inputs);
        let back_out = st.destandardize_outputs(&std_ds.outputs);
        for i in 0..ds.n() {
            assert_abs_diff_eq!(back_out[i], ds.outputs[i], epsilon = 1e-12);
            for j in 0..ds.dim() {
                assert_abs_diff_eq!(back_in[(i, j)], ds.inputs[(i, j)], epsilon = 1e-12);
            }
        }
        // standardized moments
        let m = std_ds.outputs.mean();
        let v = std_ds.outputs.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ds.n() as f64;
        assert!(m.abs() < 1e-10);
        assert!((v.sqrt() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lhs_strata_occupied_once() {
        let mut rng = crate::rng::stream(11, "lhs-test", 0);
        let n = 4;
        let x = lhs_sample(n, &[(0.0, 2.0)], &mut rng).unwrap();
        let mut sorted: Vec<f64> = x.column(0).iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        for (i, v) in sorted.iter().enumerate() {
            assert!(*v >= 0.5 * i as f64 && *v < 0.5 * (i + 1) as f64, "{v} not in stratum {i}");
        }
    }

    #[test]
    fn lhs_single_point_in_bounds() {
        let mut rng = crate::rng::stream(1, "lhs-test", 1);
        let x = lhs_sample(1, &[(0.0, 1.0)], &mut rng).unwrap();
        assert!(x[(0, 0)] >= 0.0 && x[(0, 0)] < 1.0);
    }

    #[test]
    fn lhs_deterministic_per_seed() {
        let a = lhs_sample_seeded(8, &[(0.0, 1.0), (-1.0, 1.0)], 42).unwrap();
        let b = lhs_sample_seeded(8, &[(0.0, 1.0), (-1.0, 1.0)], 42).unwrap();
        let c = lhs_sample_seeded(8, &[(0.0, 1.0), (-1.0, 1.0)], 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn lhs_degenerate_bounds_rejected() {
        let mut rng = crate::rng::stream(0, "lhs-test", 2);
        assert!(lhs_sample(3, &[(1.0, 1.0)], &mut rng).is_err());
    }

    #[test]
    fn csv_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.csv");
        std::fs::write(&path, "x1,y\n0.5,1.0\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.n(), 1);
        assert_eq!(ds.dim(), 1);
        assert_abs_diff_eq!(ds.inputs[(0, 0)], 0.5);
        assert_abs_diff_eq!(ds.outputs[0], 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round.csv");
        let ds = toy_dataset();
        write_csv(&path, &ds).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded.inputs, ds.inputs);
        assert_eq!(loaded.outputs, ds.outputs);
    }

    #[test]
    fn csv_non_numeric_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x1,y\n0.5,abc\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hdr.csv");
        std::fs::write(&path, "a,b\n0.5,1.0\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn csv_ragged_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ragged.csv");
        std::fs::write(&path, "x1,x2,y\n0.5,1.0,2.0\n0.5,1.0\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
