//! Dense `f64` tensors.
//!
//! Storage is a flat row-major `Vec<f64>` plus a shape vector. Tensors are
//! value-semantic: cloning copies the buffer, and nothing here is reference
//! counted, so they move freely between threads. The differentiable graph
//! lives in [`crate::tape`]; this module provides the plain forward kernels
//! and a handful of eager convenience ops used by tests and tooling.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    /// Dimension sizes, outermost first; `[rows, cols]` for matrices.
    pub shape: Vec<usize>,
    /// Flat row-major payload; `data.len() == shape.iter().product()`.
    pub data: Vec<f64>,
    /// Whether gradients should be tracked when this tensor enters a tape.
    pub requires_grad: bool,
}

impl Tensor {
    /// Tensor of zeros with the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()], requires_grad: false }
    }

    /// Tensor of ones with the given shape.
    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![1.0; shape.iter().product()], requires_grad: false }
    }

    /// Tensor with every element set to `value`.
    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()], requires_grad: false }
    }

    /// Build a tensor from an explicit buffer, checking the element count.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::contract(format!(
                "from_vec: shape {:?} needs {} elements, buffer has {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false })
    }

    /// Samples i.i.d. from N(0, std^2).
    pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(rng);
            data.push(z * std);
        }
        Tensor { shape: shape.to_vec(), data, requires_grad: false }
    }

    /// Marks the tensor as a gradient leaf and returns it.
    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    /// Number of elements.
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor (vectors count as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows: tensor of rank {} is not a matrix", self.shape.len()),
        }
    }

    /// Columns of a 1-D or 2-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols: tensor of rank {} is not a matrix", self.shape.len()),
        }
    }

    /// Element at `(row, col)` of a 1-D or 2-D tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with `context` if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }

    /// Mean of all elements (0 for an empty tensor).
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population variance of all elements (0 for an empty tensor).
    pub fn variance(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let mean = self.mean();
        self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / self.data.len() as f64
    }

    /// Matrix product; both operands must be matrices with matching inner dim.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        check_matrix(self, "matmul lhs")?;
        check_matrix(rhs, "matmul rhs")?;
        if self.cols() != rhs.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: vec![self.cols()],
                got: vec![rhs.rows()],
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), rhs.cols());
        let data = matmul_kernel(&self.data, &rhs.data, m, k, n);
        Tensor::from_vec(&[m, n], data)
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    /// Elementwise difference of same-shape tensors.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product of same-shape tensors.
    pub fn mul_elem(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "mul_elem", |a, b| a * b)
    }

    /// Every element multiplied by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= c;
        }
        out.requires_grad = false;
        out
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        check_matrix(self, "transpose")?;
        let (m, n) = (self.rows(), self.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(&[n, m], data)
    }

    /// Row-wise softmax of a matrix (a vector is one row).
    pub fn softmax_rows(&self) -> Result<Tensor> {
        check_matrix(self, "softmax_rows")?;
        let (m, n) = (self.rows(), self.cols());
        let mut out = self.clone();
        out.requires_grad = false;
        for i in 0..m {
            softmax_row_kernel(&mut out.data[i * n..(i + 1) * n]);
        }
        Ok(out)
    }

    fn zip_with(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch { op, expected: self.shape.clone(), got: rhs.shape.clone() });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| f(*a, *b)).collect();
        Tensor::from_vec(&self.shape, data)
    }
}

fn check_matrix(t: &Tensor, op: &'static str) -> Result<()> {
    if t.shape.len() != 2 && t.shape.len() != 1 {
        return Err(Error::contract(format!("{op}: expected a 1-D or 2-D tensor, got rank {}", t.shape.len())));
    }
    Ok(())
}

// ── Shared forward kernels ──────────────────────────────────────────────────
// The tape ops in `crate::tape` reuse these so the eager and differentiable
// paths cannot drift apart.

/// Plain triple-loop matrix product: (m x k) * (k x n) -> (m x n).
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// In-place numerically stable softmax over one row.
pub(crate) fn softmax_row_kernel(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Tanh-form GELU used by the feed-forward blocks and adapters.
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu_scalar`].
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Stable log-sum-exp over a slice of (possibly -inf) values.
pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_arithmetic() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape, vec![2, 2]);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_of_zeros_is_zeros() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 4]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data, vec![0.0; 8]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        match a.matmul(&b) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_match_reference_values() {
        let t = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert!((s.data[0] - 0.268_941).abs() < 1e-5);
        assert!((s.data[1] - 0.731_059).abs() < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_stay_finite_for_large_inputs() {
        let t = Tensor::from_vec(&[2, 3], vec![1000.0, 1000.0, 1000.0, -40.0, 0.0, 40.0]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert!(s.all_finite());
        for i in 0..2 {
            let sum: f64 = s.data[i * 3..(i + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!((s.data[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let t = Tensor::from_vec(&[1, 4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let shifted = Tensor::from_vec(&[1, 4], t.data.iter().map(|v| v + 7.0).collect()).unwrap();
        let a = t.softmax_rows().unwrap();
        let b = shifted.softmax_rows().unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_round_trips() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.transpose().unwrap();
        assert_eq!(t.shape, vec![3, 2]);
        assert_eq!(t.at(0, 1), 4.0);
        assert_eq!(t.transpose().unwrap(), a);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn elementwise_ops_require_same_shape() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(a.add(&b).is_err());
        assert!(a.mul_elem(&b).is_err());
    }

    #[test]
    fn variance_of_half_zeros_half_twos_is_one() {
        let t = Tensor::from_vec(&[4], vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(t.mean(), 1.0);
        assert_eq!(t.variance(), 1.0);
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        let h = 1e-6;
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let num = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((gelu_grad_scalar(x) - num).abs() < 1e-8, "x = {x}");
        }
    }
}
