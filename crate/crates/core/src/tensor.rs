//! Dense row-major tensors with the elementwise math used by every layer.
//!
//! Everything is 64-bit so central finite differences stay tight enough to
//! verify analytic gradients at rtol 1e-4.

use crate::{Error, Result};

/// Dense tensor: shape plus contiguous row-major f64 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that the data length matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    /// 2-D tensor from a flat row-major vector.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2, "rows() needs a 2-D tensor");
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2, "cols() needs a 2-D tensor");
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
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

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    fn check_same_shape(&self, rhs: &Tensor, op: &str) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_same_shape(rhs, "add")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_same_shape(rhs, "sub")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn hadamard(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_same_shape(rhs, "hadamard")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    /// In-place `self += rhs`, used by gradient accumulation.
    pub fn add_assign(&mut self, rhs: &Tensor) -> Result<()> {
        self.check_same_shape(rhs, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += s * rhs`.
    pub fn add_scaled_assign(&mut self, rhs: &Tensor, s: f64) -> Result<()> {
        self.check_same_shape(rhs, "add_scaled_assign")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Matrix product of two 2-D tensors: `(L x K) . (K x N) -> (L x N)`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                self.shape, rhs.shape
            )));
        }
        let (l, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: {:?} . {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; l * n];
        // i-k-j loop order keeps the inner walk contiguous in both operands.
        for i in 0..l {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[kk * n..(kk + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![l, n],
            data: out,
        })
    }

    /// Transpose of a 2-D tensor.
    pub fn transposed(&self) -> Tensor {
        debug_assert_eq!(self.shape.len(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Stack rows of `self` on top of rows of `other` (column counts must match).
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols() != other.cols() {
            return Err(Error::Shape(format!(
                "concat_rows: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            shape: vec![self.rows() + other.rows(), self.cols()],
            data,
        })
    }

    /// Copy of rows `start..end`.
    pub fn row_slice(&self, start: usize, end: usize) -> Tensor {
        let cols = self.cols();
        Tensor {
            shape: vec![end - start, cols],
            data: self.data[start * cols..end * cols].to_vec(),
        }
    }

    /// Copy of columns `start..end`.
    pub fn col_slice(&self, start: usize, end: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor {
            shape: vec![r, w],
            data,
        }
    }

    /// Write `block` into columns `start..` of `self`.
    pub fn set_col_block(&mut self, start: usize, block: &Tensor) {
        let c = self.cols();
        let w = block.cols();
        for i in 0..self.rows() {
            self.data[i * c + start..i * c + start + w].copy_from_slice(block.row(i));
        }
    }

    /// Column sums of a 2-D tensor, as a 1-D tensor.
    pub fn col_sums(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c],
            data: out,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Numerically stable scalar sigmoid; saturates instead of overflowing.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise sigmoid.
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward of elementwise sigmoid given its output `y`: `dy * y * (1 - y)`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    dy.hadamard(&y.map(|v| v * (1.0 - v)))
}

/// Stable softplus `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax of a 2-D tensor, with max subtraction for stability.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            out.set(i, j, e / z);
        }
    }
    out
}

/// Backward of row-wise softmax given its output `y` and upstream `dy`.
///
/// `dx[i,j] = y[i,j] * (dy[i,j] - sum_k dy[i,k] * y[i,k])`
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let (r, c) = (y.rows(), y.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let dot: f64 = y.row(i).iter().zip(dy.row(i)).map(|(a, b)| a * b).sum();
        for j in 0..c {
            out.set(i, j, y.at(i, j) * (dy.at(i, j) - dot));
        }
    }
    out
}

/// A learnable tensor with its gradient and momentum accumulators.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            velocity,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }
}

/// One SGD-with-momentum update:
/// `velocity <- mu * velocity + grad; value <- value - lr * velocity`.
pub fn sgd_momentum_step(param: &mut Parameter, lr: f64, mu: f64) -> Result<()> {
    if !param.grad.all_finite() {
        return Err(Error::NonFinite("gradient in sgd_momentum_step".into()));
    }
    for ((v, g), w) in param
        .velocity
        .data_mut()
        .iter_mut()
        .zip(param.grad.data())
        .zip(param.value.data.iter_mut())
    {
        *v = mu * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}

/// Central-difference gradient of `loss` with respect to `theta`:
/// `(f(theta + h e_i) - f(theta - h e_i)) / (2h)` per coordinate.
///
/// The closure receives the perturbed parameter value and must be
/// deterministic; any non-finite loss is an error.
pub fn finite_diff_grad(
    loss: &mut dyn FnMut(&Tensor) -> f64,
    theta: &Tensor,
    h: f64,
) -> Result<Tensor> {
    let mut probe = theta.clone();
    let mut grad = Tensor::zeros(theta.shape());
    for i in 0..probe.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = loss(&probe);
        probe.data[i] = orig - h;
        let fm = loss(&probe);
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at perturbed coordinate {i}: f+={fp}, f-={fm}"
            )));
        }
        grad.data[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// `|a - b| <= rtol * max(|a|, |b|) + atol`, the comparison used by all
/// gradient checks.
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + atol
}
