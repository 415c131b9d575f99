//! Dense 2-D f64 tensor and the shared math kernels.
//!
//! Every numeric path in the crate (graph forward/backward and host-side
//! inference) goes through the kernels in this file, so the two routes
//! produce bit-identical values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense tensor of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        // Zero rows describe an empty batch; feature widths must be
        // positive.
        if shape.is_empty() || shape[1..].iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                node: "tensor".into(),
                detail: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                node: "tensor".into(),
                detail: format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    /// N x 1 column tensor.
    pub fn column(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len(), 1],
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

// ── Kernels ──────────────────────────────────────────────────────────
//
// All loops run with the innermost index contiguous in memory so the
// compiler can vectorize them.

/// y = x @ w + b, shapes [n,din] x [din,dout] + [1,dout].
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (n, din, dout) = (x.rows(), w.rows(), w.cols());
    debug_assert_eq!(x.cols(), din);
    for i in 0..n {
        let yrow = &mut out.data[i * dout..(i + 1) * dout];
        yrow.copy_from_slice(&b.data);
        let xrow = &x.data[i * din..(i + 1) * din];
        for (k, &xv) in xrow.iter().enumerate() {
            let wrow = &w.data[k * dout..(k + 1) * dout];
            for (y, &wv) in yrow.iter_mut().zip(wrow) {
                *y += xv * wv;
            }
        }
    }
}

/// dx = dy @ w^T
pub fn affine_backward_x(dy: &Tensor, w: &Tensor, dx: &mut Tensor) {
    let (n, din, dout) = (dy.rows(), w.rows(), w.cols());
    for i in 0..n {
        let dyrow = &dy.data[i * dout..(i + 1) * dout];
        let dxrow = &mut dx.data[i * din..(i + 1) * din];
        for k in 0..din {
            let wrow = &w.data[k * dout..(k + 1) * dout];
            let mut acc = 0.0;
            for (dv, wv) in dyrow.iter().zip(wrow) {
                acc += dv * wv;
            }
            dxrow[k] += acc;
        }
    }
}

pub fn relu(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

pub fn sigmoid(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = sigmoid_scalar(v);
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor, out: &mut Tensor) {
    let (n, d) = (x.rows(), x.cols());
    for i in 0..n {
        let row = &x.data[i * d..(i + 1) * d];
        let orow = &mut out.data[i * d..(i + 1) * d];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Tensor, out: &mut Tensor) {
    let (n, d) = (x.rows(), x.cols());
    for i in 0..n {
        let row = &x.data[i * d..(i + 1) * d];
        let orow = &mut out.data[i * d..(i + 1) * d];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - m).exp();
        }
        let lse = m + sum.ln();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
}

/// Stable per-element binary cross-entropy with logits:
/// max(z,0) - z*y + ln(1 + exp(-|z|)).
pub fn bce_with_logits(z: &[f64], y: &[f64], out: &mut [f64]) {
    for ((o, &zv), &yv) in out.iter_mut().zip(z).zip(y) {
        *o = zv.max(0.0) - zv * yv + (-zv.abs()).exp().ln_1p();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_shape_data_disagreement() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_ok()); // empty batch
    }

    #[test]
    fn affine_identity_passes_through() {
        let x = Tensor::from_rows(1, 2, vec![1.0, 0.0]).unwrap();
        let w = Tensor::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_rows(1, 2, vec![0.0, 0.0]).unwrap();
        let mut out = Tensor::zeros(1, 2);
        affine(&x, &w, &b, &mut out);
        assert_eq!(out.data, vec![1.0, 0.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut out = [0.0];
        sigmoid(&[0.0], &mut out);
        assert_eq!(out[0], 0.5);
    }

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let x = Tensor::from_rows(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let mut out = Tensor::zeros(1, 3);
        softmax_rows(&x, &mut out);
        for &v in &out.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_matches_naive_formula_in_safe_range() {
        let z = [0.3, -1.2, 2.0];
        let y = [1.0, 0.0, 1.0];
        let mut out = [0.0; 3];
        bce_with_logits(&z, &y, &mut out);
        for i in 0..3 {
            let p = sigmoid_scalar(z[i]);
            let naive = -(y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln());
            assert!((out[i] - naive).abs() < 1e-12);
        }
    }
}
