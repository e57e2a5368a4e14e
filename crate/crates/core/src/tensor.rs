//! Dense linear algebra, flattened parameter vectors and finite-difference
//! oracles.
//!
//! Everything here works in `f64`. The oracles are used by tests and by the
//! exact-HVP strategy variant to check the hand-derived backward pass and
//! the Hadamard curvature surrogate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Step used by gradient checks.
pub const DEFAULT_GRAD_EPS: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("layout error: {0}")]
    Layout(String),
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("finite-difference oracle failed: non-finite loss when probing index {index}")]
    Oracle { index: usize },
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(TensorError::Dimension { expected, found })
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len(rows * cols, data.len())?;
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_len(cols, row.len())?;
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        check_len(self.cols, other.cols)?;
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self · otherᵀ`, i.e. (n×k)·(m×k)ᵀ → n×m.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        check_len(self.cols, other.cols)?;
        let (n, m) = (self.rows, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                let b = other.row(j);
                out[i * m + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self · other`, (n×k)·(k×m) → n×m.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        check_len(self.cols, other.rows)?;
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let dst = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                for (d, b) in dst.iter_mut().zip(other.row(p)) {
                    *d += a * b;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `selfᵀ · other`, (n×k)ᵀ·(n×m) → k×m.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        check_len(self.rows, other.rows)?;
        let (k, m) = (self.cols, other.cols);
        let mut out = vec![0.0; k * m];
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (p, &ap) in a.iter().enumerate() {
                if ap == 0.0 {
                    continue;
                }
                let dst = &mut out[p * m..(p + 1) * m];
                for (d, bv) in dst.iter_mut().zip(b) {
                    *d += ap * bv;
                }
            }
        }
        Ok(Self {
            rows: k,
            cols: m,
            data: out,
        })
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        check_len(self.cols, bias.len())?;
        for row in self.data.chunks_mut(self.cols) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column sums.
    pub fn sum_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named tensor's shape and row-major contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_len(shape.iter().product(), data.len())?;
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_matrix(m: &DenseMatrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }
}

/// Where one named tensor lives inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flattened view of a parameter set, with the layout needed to undo the
/// flattening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<TensorSpec>,
}

impl ParamVector {
    /// Wraps raw values in a single-tensor layout named `values`.
    pub fn from_values(values: Vec<f64>) -> Self {
        let layout = if values.is_empty() {
            Vec::new()
        } else {
            vec![TensorSpec {
                name: "values".into(),
                shape: vec![values.len()],
                offset: 0,
            }]
        };
        Self { values, layout }
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        check_len(self.values.len(), values.len())?;
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_same_len(&self, other: &Self) -> Result<()> {
        check_len(self.values.len(), other.values.len())
    }

    /// Panics on length mismatch; callers validate lengths first.
    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        assert_eq!(self.len(), other.len(), "axpy: length mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| alpha * v).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Checks that offsets are contiguous and cover `values` exactly.
    pub fn validate_layout(&self) -> Result<()> {
        let mut expected = 0;
        for spec in &self.layout {
            if spec.offset != expected {
                return Err(TensorError::Layout(format!(
                    "tensor `{}` starts at {} but previous tensor ends at {}",
                    spec.name, spec.offset, expected
                )));
            }
            expected += spec.numel();
        }
        check_len(expected, self.values.len())
    }
}

/// Flattens a named tensor set. Tensors are laid out in lexicographic name
/// order regardless of input order.
pub fn flatten_params<I>(params: I) -> Result<ParamVector>
where
    I: IntoIterator<Item = (String, NamedTensor)>,
{
    let mut sorted: BTreeMap<String, NamedTensor> = BTreeMap::new();
    for (name, tensor) in params {
        check_len(tensor.shape.iter().product(), tensor.data.len())?;
        if let Some(index) = tensor.data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        if sorted.contains_key(&name) {
            return Err(TensorError::Layout(format!("duplicate tensor name `{name}`")));
        }
        sorted.insert(name, tensor);
    }
    let mut values = Vec::new();
    let mut layout = Vec::with_capacity(sorted.len());
    for (name, tensor) in sorted {
        layout.push(TensorSpec {
            name,
            shape: tensor.shape,
            offset: values.len(),
        });
        values.extend(tensor.data);
    }
    Ok(ParamVector { values, layout })
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params(params: &ParamVector) -> Result<BTreeMap<String, NamedTensor>> {
    params.validate_layout()?;
    let mut out = BTreeMap::new();
    for spec in &params.layout {
        let data = params.values[spec.offset..spec.offset + spec.numel()].to_vec();
        if out
            .insert(
                spec.name.clone(),
                NamedTensor {
                    shape: spec.shape.clone(),
                    data,
                },
            )
            .is_some()
        {
            return Err(TensorError::Layout(format!(
                "duplicate tensor name `{}`",
                spec.name
            )));
        }
    }
    Ok(out)
}

/// Default HVP probe step, scaled by the magnitude of the evaluation point.
pub fn default_hvp_eps(at: &ParamVector) -> f64 {
    1e-4 * (1.0 + at.norm_inf())
}

/// Central-difference gradient of `loss_fn` at `at`.
pub fn finite_diff_gradient<F>(loss_fn: F, at: &ParamVector, eps: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> f64,
{
    if !(eps > 0.0) {
        return Err(TensorError::BadStep(eps));
    }
    let mut probe = at.clone();
    let mut grad = Vec::with_capacity(at.len());
    for k in 0..at.len() {
        let x = at.values[k];
        probe.values[k] = x + eps;
        let plus = loss_fn(&probe);
        probe.values[k] = x - eps;
        let minus = loss_fn(&probe);
        probe.values[k] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::Oracle { index: k });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    at.with_values(grad)
}

/// Central-difference Hessian-vector product: `(∇L(θ+εv) − ∇L(θ−εv)) / 2ε`.
pub fn finite_diff_hvp<F>(
    grad_fn: F,
    at: &ParamVector,
    direction: &ParamVector,
    eps: f64,
) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> ParamVector,
{
    at.check_same_len(direction)?;
    if !(eps > 0.0) {
        return Err(TensorError::BadStep(eps));
    }
    let mut plus = at.clone();
    plus.axpy(eps, direction);
    let mut minus = at.clone();
    minus.axpy(-eps, direction);
    let g_plus = grad_fn(&plus);
    let g_minus = grad_fn(&minus);
    check_len(at.len(), g_plus.len())?;
    check_len(at.len(), g_minus.len())?;
    let values: Vec<f64> = g_plus
        .values
        .iter()
        .zip(&g_minus.values)
        .map(|(p, m)| (p - m) / (2.0 * eps))
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { index });
    }
    at.with_values(values)
}
