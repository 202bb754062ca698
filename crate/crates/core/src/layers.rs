//! Forward and reverse passes for the building blocks of the denoiser:
//! masked softmax attention, layer normalization and pointwise activations.
//!
//! Each forward returns whatever the matching backward needs. Backward
//! functions accumulate parameter gradients into caller-owned buffers and
//! return input gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{acc_at_b, acc_col_sums, matmul, matmul_bt, Matrix};

/// Epsilon inside the normalization square root.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Row-stochastic attention weights; masked entries are exactly zero.
    pub probs: Matrix,
}

/// Softmax of each row restricted to `mask[j] == true` columns.
pub fn masked_softmax_rows(scores: &mut Matrix, mask: Option<&[bool]>) {
    let cols = scores.cols;
    for r in 0..scores.rows {
        let row = scores.row_mut(r);
        let keep = |j: usize| mask.map_or(true, |m| m[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &s) in row.iter().enumerate() {
            if keep(j) && s > max {
                max = s;
            }
        }
        let mut sum = 0.0;
        for (j, s) in row.iter_mut().enumerate() {
            if keep(j) {
                *s = libm::exp(*s - max);
                sum += *s;
            } else {
                *s = 0.0;
            }
        }
        let inv = 1.0 / sum;
        for s in row.iter_mut().take(cols) {
            *s *= inv;
        }
    }
}

/// Scaled dot-product attention of `queries` over `keys_values`.
///
/// `out = softmax(mask((queries·w_q)(keys_values·w_k)ᵀ / √d_k)) · (keys_values·w_v)`
pub fn attention_forward(
    queries: &Matrix,
    keys_values: &Matrix,
    mask: Option<&[bool]>,
    w_q: &Matrix,
    w_k: &Matrix,
    w_v: &Matrix,
) -> (Matrix, AttentionCache) {
    let q = matmul(queries, w_q);
    let k = matmul(keys_values, w_k);
    let v = matmul(keys_values, w_v);
    let scale = 1.0 / libm::sqrt(w_q.cols as f64);
    let mut probs = matmul_bt(&q, &k);
    probs.scale(scale);
    masked_softmax_rows(&mut probs, mask);
    let out = matmul(&probs, &v);
    (out, AttentionCache { q, k, v, probs })
}

pub struct AttentionGrads<'a> {
    pub w_q: &'a mut Matrix,
    pub w_k: &'a mut Matrix,
    pub w_v: &'a mut Matrix,
}

/// Reverse pass of [`attention_forward`]. Returns `(d_queries, d_keys_values)`.
pub fn attention_backward(
    d_out: &Matrix,
    queries: &Matrix,
    keys_values: &Matrix,
    cache: &AttentionCache,
    w_q: &Matrix,
    w_k: &Matrix,
    w_v: &Matrix,
    grads: AttentionGrads<'_>,
) -> (Matrix, Matrix) {
    let scale = 1.0 / libm::sqrt(w_q.cols as f64);
    let probs = &cache.probs;

    let mut d_v = Matrix::zeros(cache.v.rows, cache.v.cols);
    acc_at_b(probs, d_out, &mut d_v);
    let d_probs = matmul_bt(d_out, &cache.v);

    // softmax reverse: dS = P ⊙ (dP − Σ_j dP⊙P)
    let mut d_scores = Matrix::zeros(probs.rows, probs.cols);
    for r in 0..probs.rows {
        let p = probs.row(r);
        let dp = d_probs.row(r);
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        let ds = d_scores.row_mut(r);
        for j in 0..p.len() {
            ds[j] = p[j] * (dp[j] - dot) * scale;
        }
    }

    let d_q = matmul(&d_scores, &cache.k);
    let mut d_k = Matrix::zeros(cache.k.rows, cache.k.cols);
    acc_at_b(&d_scores, &cache.q, &mut d_k);

    acc_at_b(queries, &d_q, grads.w_q);
    acc_at_b(keys_values, &d_k, grads.w_k);
    acc_at_b(keys_values, &d_v, grads.w_v);

    let d_queries = matmul_bt(&d_q, w_q);
    let mut d_kv = matmul_bt(&d_k, w_k);
    d_kv.add_assign(&matmul_bt(&d_v, w_v));
    (d_queries, d_kv)
}

#[derive(Debug, Clone)]
pub struct NormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// Per-row normalization with per-feature gain and bias (`1 × cols` each).
pub fn layer_norm_forward(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, NormCache) {
    let n = x.cols as f64;
    let mut normalized = Matrix::zeros(x.rows, x.cols);
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / libm::sqrt(var + NORM_EPS);
        inv_std.push(inv);
        let nr = normalized.row_mut(r);
        for (o, v) in nr.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        let or = out.row_mut(r);
        for c in 0..x.cols {
            or[c] = gain.data[c] * normalized.data[r * x.cols + c] + bias.data[c];
        }
    }
    (out, NormCache { normalized, inv_std })
}

pub fn layer_norm_backward(
    d_out: &Matrix,
    cache: &NormCache,
    gain: &Matrix,
    d_gain: &mut Matrix,
    d_bias: &mut Matrix,
) -> Matrix {
    let cols = d_out.cols;
    let n = cols as f64;
    let mut d_x = Matrix::zeros(d_out.rows, cols);
    let mut d_hat = vec![0.0; cols];
    for r in 0..d_out.rows {
        let dy = d_out.row(r);
        let xh = cache.normalized.row(r);
        for c in 0..cols {
            d_gain.data[c] += dy[c] * xh[c];
            d_bias.data[c] += dy[c];
            d_hat[c] = dy[c] * gain.data[c];
        }
        let mean_d = d_hat.iter().sum::<f64>() / n;
        let mean_dx = d_hat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let inv = cache.inv_std[r];
        let dx = d_x.row_mut(r);
        for c in 0..cols {
            dx[c] = inv * (d_hat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    d_x
}

/// Smooth pointwise nonlinearity used in the feedforward sublayers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// tanh approximation of GELU
    Gelu,
    Tanh,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gelu" => Some(Activation::Gelu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let inner = Self::GELU_C * (x + 0.044_715 * x * x * x);
                0.5 * x * (1.0 + libm::tanh(inner))
            }
            Activation::Tanh => libm::tanh(x),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let inner = Self::GELU_C * (x + 0.044_715 * x * x * x);
                let th = libm::tanh(inner);
                0.5 * (1.0 + th)
                    + 0.5 * x * (1.0 - th * th) * Self::GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
            }
            Activation::Tanh => {
                let th = libm::tanh(x);
                1.0 - th * th
            }
        }
    }
}

/// `x · w + b` with `b` broadcast over rows.
pub fn linear_forward(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut out = matmul(x, w);
    out.add_row_broadcast(&b.data);
    out
}

/// Reverse of [`linear_forward`]; returns `d_x`.
pub fn linear_backward(
    d_out: &Matrix,
    x: &Matrix,
    w: &Matrix,
    d_w: &mut Matrix,
    d_b: &mut Matrix,
) -> Matrix {
    acc_at_b(x, d_out, d_w);
    acc_col_sums(d_out, &mut d_b.data);
    matmul_bt(d_out, w)
}
