//! Forward kernels shared by the tape and by direct callers.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Elementwise nonlinearities with explicit backward rules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    /// `max(0, min(1, (slope * x + 1) / 2))`.
    HardSigmoid { slope: f64 },
}

impl Activation {
    pub fn hard_sigmoid(slope: f64) -> Result<Self> {
        if slope > 0.0 && slope.is_finite() {
            Ok(Activation::HardSigmoid { slope })
        } else {
            Err(Error::Config(format!("hard sigmoid slope must be positive, got {slope}")))
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::HardSigmoid { slope } => hard_sigmoid(x, slope),
        }
    }

    /// Derivative given the input `x` and output `y`. Kinks get subgradient 0.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::HardSigmoid { slope } => hard_sigmoid_derivative(x, slope),
        }
    }

    /// Distance from `x` to the nearest point where the derivative jumps.
    pub fn kink_distance(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid | Activation::Tanh => f64::INFINITY,
            Activation::Relu => x.abs(),
            Activation::HardSigmoid { slope } => {
                let k = 1.0 / slope;
                (x - k).abs().min((x + k).abs())
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn hard_sigmoid(x: f64, slope: f64) -> f64 {
    ((slope * x + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// `slope / 2` on the open interval `(-1/slope, 1/slope)`, zero elsewhere.
pub fn hard_sigmoid_derivative(x: f64, slope: f64) -> f64 {
    let k = 1.0 / slope;
    if x > -k && x < k {
        slope / 2.0
    } else {
        0.0
    }
}

pub fn apply_activation(kind: Activation, x: &Tensor) -> Result<Tensor> {
    if let Activation::HardSigmoid { slope } = kind {
        Activation::hard_sigmoid(slope)?;
    }
    let data = x.data().iter().map(|&v| kind.apply(v)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `y = W x (+ b)` for a single vector `x`.
pub fn affine(w: &Tensor, x: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.shape().len() != 2 {
        return Err(Error::Dimension(format!("weight must be a matrix, got {:?}", w.shape())));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    if x.len() != n {
        return Err(Error::Dimension(format!("weight {:?} cannot multiply vector of {}", w.shape(), x.len())));
    }
    if let Some(b) = b {
        if b.len() != m {
            return Err(Error::Dimension(format!("bias of {} for {m} outputs", b.len())));
        }
    }
    let mut y = vec![0.0; m];
    gemm_nt(1, n, m, x.data(), w.data(), &mut y, 0.0);
    if let Some(b) = b {
        for (yi, bi) in y.iter_mut().zip(b.data()) {
            *yi += bi;
        }
    }
    Ok(Tensor::vector(y))
}

/// Negative log-likelihood of `target` under `softmax(logits)`, with the probabilities.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::Dimension(format!("softmax needs at least two classes, got {}", logits.len())));
    }
    if target >= logits.len() {
        return Err(Error::Index { index: target, size: logits.len() });
    }
    let probs = softmax(logits);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[target], probs))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    p
}

/// Threshold at 0.5 (strict) or, given a uniform draw `u`, the Bernoulli outcome `u < p`.
pub fn binarize_value(p: f64, uniform: Option<f64>) -> f64 {
    let fire = match uniform {
        None => p > 0.5,
        Some(u) => u < p,
    };
    if fire {
        1.0
    } else {
        0.0
    }
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm(v: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = v.cols();
    if gain.len() != n || bias.len() != n {
        return Err(Error::Dimension(format!(
            "layer norm over {n} features with gain {} and bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = v.clone();
    for r in 0..v.rows() {
        let (mean, rstd) = row_moments(v.row(r));
        for (j, y) in out.row_mut(r).iter_mut().enumerate() {
            *y = (*y - mean) * rstd * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(out)
}

/// Mean and reciprocal standard deviation of one row.
pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// `C[rows x m] = X[rows x k] * W[m x k]^T + beta * C`.
pub(crate) fn gemm_nt(rows: usize, k: usize, m: usize, x: &[f64], w: &[f64], c: &mut [f64], beta: f64) {
    assert!(x.len() >= rows * k && w.len() >= m * k && c.len() >= rows * m);
    // SAFETY: bounds asserted above; strides describe row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            rows, k, m, 1.0,
            x.as_ptr(), k as isize, 1,
            w.as_ptr(), 1, k as isize,
            beta, c.as_mut_ptr(), m as isize, 1,
        );
    }
}

/// `C[rows x k] += G[rows x m] * W[m x k]`.
pub(crate) fn gemm_nn_acc(rows: usize, m: usize, k: usize, g: &[f64], w: &[f64], c: &mut [f64]) {
    assert!(g.len() >= rows * m && w.len() >= m * k && c.len() >= rows * k);
    // SAFETY: bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            rows, m, k, 1.0,
            g.as_ptr(), m as isize, 1,
            w.as_ptr(), k as isize, 1,
            1.0, c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `C[m x k] += G[rows x m]^T * X[rows x k]`.
pub(crate) fn gemm_tn_acc(rows: usize, m: usize, k: usize, g: &[f64], x: &[f64], c: &mut [f64]) {
    assert!(g.len() >= rows * m && x.len() >= rows * k && c.len() >= m * k);
    // SAFETY: bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m, rows, k, 1.0,
            g.as_ptr(), 1, m as isize,
            x.as_ptr(), k as isize, 1,
            1.0, c.as_mut_ptr(), k as isize, 1,
        );
    }
}
