//! Slice-level numeric kernels shared by the tape's forward and backward rules.
//!
//! All loops run in a fixed order so results are bit-reproducible.

use crate::error::{Error, Result};

/// Which attention scores are admissible.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionMask {
    None,
    /// Entry `(i, j)` is blocked iff `key_frames[j] > query_frames[i]`.
    CausalByFrame {
        query_frames: Vec<usize>,
        key_frames: Vec<usize>,
    },
}

impl AttentionMask {
    /// Self-attention mask over tokens sharing one frame map.
    pub fn causal(frame_of_token: Vec<usize>) -> Self {
        Self::CausalByFrame {
            query_frames: frame_of_token.clone(),
            key_frames: frame_of_token,
        }
    }

    pub fn causal_cross(query_frames: Vec<usize>, key_frames: Vec<usize>) -> Self {
        Self::CausalByFrame {
            query_frames,
            key_frames,
        }
    }

    #[inline]
    pub fn blocked(&self, query: usize, key: usize) -> bool {
        match self {
            Self::None => false,
            Self::CausalByFrame {
                query_frames,
                key_frames,
            } => key_frames[key] > query_frames[query],
        }
    }

    pub(crate) fn validate(&self, lq: usize, lk: usize) -> Result<()> {
        match self {
            Self::None => Ok(()),
            Self::CausalByFrame {
                query_frames,
                key_frames,
            } => {
                if query_frames.len() != lq || key_frames.len() != lk {
                    return Err(Error::Dimension {
                        op: "causal mask",
                        lhs: vec![lq, lk],
                        rhs: vec![query_frames.len(), key_frames.len()],
                    });
                }
                Ok(())
            }
        }
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
pub fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_layout(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * n + a) * inner + i;
            let max = (0..n).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for a in 0..n {
                let e = (x[at(a)] - max).exp();
                out[at(a)] = e;
                sum += e;
            }
            for a in 0..n {
                out[at(a)] /= sum;
            }
        }
    }
    out
}

pub fn softmax_backward(y: &[f64], g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_layout(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * n + a) * inner + i;
            let mut s = 0.0;
            for a in 0..n {
                s += g[at(a)] * y[at(a)];
            }
            for a in 0..n {
                dx[at(a)] = y[at(a)] * (g[at(a)] - s);
            }
        }
    }
    dx
}

/// Per-row normalization statistics: `(x̂, 1/σ)`.
pub fn layer_norm_stats(x: &[f64], rows: usize, d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        inv[r] = inv_std;
        for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * inv_std;
        }
    }
    (xhat, inv)
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], rows: usize, d: usize, eps: f64) -> Vec<f64> {
    let (mut xhat, _) = layer_norm_stats(x, rows, d, eps);
    for r in 0..rows {
        for c in 0..d {
            let v = &mut xhat[r * d + c];
            *v = *v * gain[c] + bias[c];
        }
    }
    xhat
}

/// Gradients of layer norm w.r.t. input, gain and bias.
pub fn layer_norm_backward(
    x: &[f64],
    gain: &[f64],
    g: &[f64],
    rows: usize,
    d: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (xhat, inv) = layer_norm_stats(x, rows, d, eps);
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let n = d as f64;
    for r in 0..rows {
        let base = r * d;
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..d {
            let gy = g[base + c];
            dgain[c] += gy * xhat[base + c];
            dbias[c] += gy;
            let dxh = gy * gain[c];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat[base + c];
        }
        for c in 0..d {
            let dxh = g[base + c] * gain[c];
            dx[base + c] = inv[r] / n * (n * dxh - sum_dxhat - xhat[base + c] * sum_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

/// Single-head scaled dot-product attention. Returns the output and the
/// probability matrix (blocked entries are exactly zero).
#[allow(clippy::too_many_arguments)]
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    lq: usize,
    lk: usize,
    d: usize,
    dv: usize,
    scale: f64,
    mask: &AttentionMask,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut probs = vec![0.0; lq * lk];
    let mut out = vec![0.0; lq * dv];
    for i in 0..lq {
        let qi = &q[i * d..(i + 1) * d];
        let prow = &mut probs[i * lk..(i + 1) * lk];
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for j in 0..lk {
            if mask.blocked(i, j) {
                continue;
            }
            any = true;
            let s = dot(qi, &k[j * d..(j + 1) * d]) * scale;
            prow[j] = s;
            max = max.max(s);
        }
        if !any {
            return Err(Error::AllBlocked { row: i });
        }
        let mut sum = 0.0;
        for j in 0..lk {
            if mask.blocked(i, j) {
                continue;
            }
            let e = (prow[j] - max).exp();
            prow[j] = e;
            sum += e;
        }
        let orow = &mut out[i * dv..(i + 1) * dv];
        for j in 0..lk {
            if mask.blocked(i, j) {
                continue;
            }
            prow[j] /= sum;
            let p = prow[j];
            for (o, &vv) in orow.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                *o += p * vv;
            }
        }
    }
    Ok((out, probs))
}

/// Vector-Jacobian product of [`attention`]: returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    lq: usize,
    lk: usize,
    d: usize,
    dv: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dq = vec![0.0; lq * d];
    let mut dk = vec![0.0; lk * d];
    let mut dvv = vec![0.0; lk * dv];
    let mut dp = vec![0.0; lk];
    for i in 0..lq {
        let gi = &g[i * dv..(i + 1) * dv];
        let prow = &probs[i * lk..(i + 1) * lk];
        let mut s = 0.0;
        for j in 0..lk {
            let p = prow[j];
            if p == 0.0 {
                dp[j] = 0.0;
                continue;
            }
            let vj = &v[j * dv..(j + 1) * dv];
            dp[j] = dot(gi, vj);
            s += p * dp[j];
            for (o, &gv) in dvv[j * dv..(j + 1) * dv].iter_mut().zip(gi) {
                *o += p * gv;
            }
        }
        let qi = &q[i * d..(i + 1) * d];
        for j in 0..lk {
            let p = prow[j];
            if p == 0.0 {
                continue;
            }
            let ds = p * (dp[j] - s) * scale;
            let kj = &k[j * d..(j + 1) * d];
            for c in 0..d {
                dq[i * d + c] += ds * kj[c];
                dk[j * d + c] += ds * qi[c];
            }
        }
    }
    (dq, dk, dvv)
}

pub const ROPE_BASE: f64 = 10000.0;

/// Rotates each channel pair `(2i, 2i+1)` of every row by `position · base^(-2i/d)`.
/// `sign = -1.0` applies the inverse rotation.
pub fn rope(x: &[f64], positions: &[usize], d: usize, sign: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, &pos) in positions.iter().enumerate() {
        for i in 0..d / 2 {
            let theta = ROPE_BASE.powf(-2.0 * i as f64 / d as f64);
            let angle = pos as f64 * theta;
            let (sin, cos) = (sign * angle).sin_cos();
            let a = x[row * d + 2 * i];
            let b = x[row * d + 2 * i + 1];
            out[row * d + 2 * i] = a * cos - b * sin;
            out[row * d + 2 * i + 1] = a * sin + b * cos;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
