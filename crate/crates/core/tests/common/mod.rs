//! Straight-line reference implementations used as test oracles.
//!
//! Everything here works on plain nested `Vec`s with explicit loops and reads
//! parameters by name; none of it goes through the tape or the kernels.

#![allow(dead_code)]

use vidroute::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub const LN_EPS: f64 = 1e-5;

pub fn mat(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn param(store: &ParamStore, name: &str) -> Mat {
    let id = store.lookup(name).unwrap_or_else(|| panic!("no parameter {name}"));
    mat(store.get(id))
}

pub fn row(store: &ParamStore, name: &str) -> Vec<f64> {
    param(store, name).remove(0)
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn add_row(a: &Mat, r: &[f64]) -> Mat {
    a.iter()
        .map(|x| x.iter().zip(r).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn scale(a: &Mat, s: f64) -> Mat {
    a.iter().map(|x| x.iter().map(|v| v * s).collect()).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

/// Single-head attention; `blocked(i, j)` removes key `j` for query `i`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, blocked: impl Fn(usize, usize) -> bool) -> Mat {
    let d = q[0].len() as f64;
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let keys: Vec<usize> = (0..k.len()).filter(|&j| !blocked(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let p = softmax(&scores);
            let mut out = vec![0.0; v[0].len()];
            for (w, &j) in p.iter().zip(&keys) {
                for c in 0..out.len() {
                    out[c] += w * v[j][c];
                }
            }
            out
        })
        .collect()
}

pub fn rope(x: &Mat, positions: &[usize]) -> Mat {
    x.iter()
        .zip(positions)
        .map(|(r, &p)| {
            let d = r.len();
            let mut out = r.clone();
            for i in 0..d / 2 {
                let angle = p as f64 * 10000f64.powf(-((2 * i) as f64) / d as f64);
                out[2 * i] = r[2 * i] * angle.cos() - r[2 * i + 1] * angle.sin();
                out[2 * i + 1] = r[2 * i] * angle.sin() + r[2 * i + 1] * angle.cos();
            }
            out
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn linear(x: &Mat, store: &ParamStore, prefix: &str, bias: bool) -> Mat {
    let y = mm(x, &param(store, &format!("{prefix}.weight")));
    if bias {
        add_row(&y, &row(store, &format!("{prefix}.bias")))
    } else {
        y
    }
}

pub fn norm(x: &Mat, store: &ParamStore, prefix: &str) -> Mat {
    layer_norm(
        x,
        &row(store, &format!("{prefix}.gain")),
        &row(store, &format!("{prefix}.bias")),
    )
}

fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// Pre-norm transformer block.
pub fn block(
    x: &Mat,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    blocked: &dyn Fn(usize, usize) -> bool,
    positions: Option<&[usize]>,
) -> Mat {
    let d = x[0].len();
    let hd = d / heads;
    let h = norm(x, store, &format!("{prefix}.attn_norm"));
    let q = mm(&h, &param(store, &format!("{prefix}.attn.query")));
    let k = mm(&h, &param(store, &format!("{prefix}.attn.key")));
    let v = mm(&h, &param(store, &format!("{prefix}.attn.value")));
    let mut merged = vec![Vec::new(); x.len()];
    for i in 0..heads {
        let (mut qh, mut kh) = (cols(&q, i * hd, hd), cols(&k, i * hd, hd));
        if let Some(p) = positions {
            qh = rope(&qh, p);
            kh = rope(&kh, p);
        }
        let out = attention(&qh, &kh, &cols(&v, i * hd, hd), blocked);
        for (m, o) in merged.iter_mut().zip(out) {
            m.extend(o);
        }
    }
    let x = add(x, &mm(&merged, &param(store, &format!("{prefix}.attn.output"))));
    let h = norm(&x, store, &format!("{prefix}.ffn_norm"));
    let h = linear(&h, store, &format!("{prefix}.ffn.in"), true);
    let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    add(&x, &linear(&h, store, &format!("{prefix}.ffn.out"), true))
}

/// `softmax((queries·Wq)(context·Wk)ᵀ/√d)(context·Wv)·Wo`.
pub fn cross_attention(context: &Mat, queries: &Mat, store: &ParamStore, prefix: &str) -> Mat {
    let q = mm(queries, &param(store, &format!("{prefix}.query")));
    let k = mm(context, &param(store, &format!("{prefix}.key")));
    let v = mm(context, &param(store, &format!("{prefix}.value")));
    mm(
        &attention(&q, &k, &v, |_, _| false),
        &param(store, &format!("{prefix}.output")),
    )
}

/// `M×L'` router logits, row `m = W_m·LN(l_m)·W_l·(LN(z)·W_z)ᵀ`.
pub fn router_logits(local: &[Mat], z: &Mat, store: &ParamStore, prefix: &str) -> Mat {
    let agg = param(store, &format!("{prefix}.aggregator"));
    let w_l = param(store, &format!("{prefix}.local_proj"));
    let w_z = param(store, &format!("{prefix}.latent_proj"));
    let zp = mm(&norm(z, store, &format!("{prefix}.latent_norm")), &w_z);
    local
        .iter()
        .enumerate()
        .map(|(m, l)| {
            let ln = norm(l, store, &format!("{prefix}.local_norm"));
            let pooled = mm(&mm(&vec![agg[m].clone()], &ln), &w_l);
            zp.iter()
                .map(|zr| zr.iter().zip(&pooled[0]).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

/// Softmax down each column.
pub fn router_weights(logits: &Mat) -> Mat {
    transpose(&transpose(logits).iter().map(|c| softmax(c)).collect())
}

/// `z + α·Σ_m w_m ⊙ φ(l_m, z)`.
pub fn spatial_enhance(z: &Mat, local: &[Mat], weights: &Mat, store: &ParamStore, prefix: &str, alpha: f64) -> Mat {
    let mut out = z.clone();
    for (m, l) in local.iter().enumerate() {
        let u = cross_attention(l, z, store, &format!("{prefix}.phi"));
        for i in 0..z.len() {
            for c in 0..z[0].len() {
                out[i][c] += alpha * weights[m][i] * u[i][c];
            }
        }
    }
    out
}

pub fn psi(x: &Mat, positions: &[usize], store: &ParamStore, prefix: &str, layers: usize, heads: usize) -> Mat {
    let blocked = |i: usize, j: usize| positions[j] > positions[i];
    let mut h = x.clone();
    for n in 0..layers {
        h = block(&h, store, &format!("{prefix}.{n}"), heads, &blocked, Some(positions));
    }
    h
}

/// Chunk-wise refinement of `(F·S)×D'` tokens.
#[allow(clippy::too_many_arguments)]
pub fn temporal_refine(
    z: &Mat,
    frames: usize,
    s: usize,
    chunks: usize,
    store: &ParamStore,
    prefix: &str,
    layers: usize,
    heads: usize,
    beta: f64,
) -> Mat {
    let per = frames / chunks;
    // Previous enhanced chunk as (tokens, per-token positions).
    let mut prev_tokens = param(store, &format!("{prefix}.start"));
    let mut prev_pos = vec![0usize; s];
    let mut out = Vec::new();
    for k in 0..chunks {
        let cond = prev_tokens[prev_tokens.len() - s..].to_vec();
        let cond_pos = *prev_pos.last().unwrap();
        let payload = z[k * per * s..(k + 1) * per * s].to_vec();
        let payload_pos: Vec<usize> = (0..per * s).map(|i| k * per + i / s + 1).collect();
        let context = psi(&prev_tokens, &prev_pos, store, &format!("{prefix}.psi"), layers, heads);
        let mut current = cond.clone();
        current.extend(payload.iter().cloned());
        let bias = cross_attention(&context, &current, store, &format!("{prefix}.phi"));
        let enhanced: Mat = payload
            .iter()
            .zip(&bias[s..])
            .map(|(p, b)| p.iter().zip(b).map(|(x, y)| x + beta * y).collect())
            .collect();
        let mut pos = vec![cond_pos; s];
        pos.extend(payload_pos);
        prev_tokens = cond;
        prev_tokens.extend(enhanced.iter().cloned());
        prev_pos = pos;
        out.extend(enhanced);
    }
    out
}

/// Denoiser noise prediction and block-1 routing weights.
#[allow(clippy::too_many_arguments)]
pub fn denoiser(
    z_t: &Mat,
    t: usize,
    features: &[Mat],
    identity: &[f64],
    store: &ParamStore,
    blocks: usize,
    heads: usize,
    alpha: f64,
) -> (Mat, Mat) {
    let p = "denoiser";
    let mut h = linear(z_t, store, &format!("{p}.input"), true);
    h = add_row(&h, &param(store, &format!("{p}.time_embed"))[t]);
    let c = linear(&vec![identity.to_vec()], store, &format!("{p}.cond_embed"), true);
    h = add_row(&h, &c[0]);
    let local: Vec<Mat> = features
        .iter()
        .map(|f| linear(f, store, &format!("{p}.local_encoder.proj"), true))
        .collect();
    let logits = router_logits(&local, &h, store, &format!("{p}.router"));
    let w = router_weights(&logits);
    h = spatial_enhance(&h, &local, &w, store, &format!("{p}.router"), alpha);
    for b in 0..blocks {
        h = block(&h, store, &format!("{p}.block{b}"), heads, &|_, _| false, None);
    }
    h = norm(&h, store, &format!("{p}.final_norm"));
    (linear(&h, store, &format!("{p}.output"), true), w)
}

pub fn ddim(z: f64, e: f64, a_t: f64, a_prev: f64) -> f64 {
    let x0 = (z - (1.0 - a_t).sqrt() * e) / a_t.sqrt();
    a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * e
}

/// Mean frame-to-frame L2 distance of an `F×(S·D')` video.
pub fn temporal_deviation(frames: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for f in 1..frames.len() {
        let mut sq = 0.0;
        for (a, b) in frames[f - 1].iter().zip(&frames[f]) {
            sq += (b - a) * (b - a);
        }
        total += sq.sqrt();
    }
    total / (frames.len() - 1) as f64
}
