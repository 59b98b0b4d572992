//! Parameterised building blocks shared by the router, the temporal module and the denoiser.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::AttentionMask;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Standard deviation used for projection initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.ones(format!("{prefix}.gain"), &[dim])?,
            bias: store.zeros(format!("{prefix}.bias"), &[dim])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// `x·W (+ b)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        std: f64,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = if std == 0.0 {
            store.zeros(format!("{prefix}.weight"), &[input, output])?
        } else {
            store.normal(format!("{prefix}.weight"), &[input, output], std, rng)?
        };
        let bias = if bias {
            Some(store.zeros(format!("{prefix}.bias"), &[output])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Single-head cross-attention: queries come from one sequence, keys and
/// values from a context sequence, and the result is projected back to the
/// query width.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    /// `query_dim × attn_dim`
    pub query: ParamId,
    /// `context_dim × attn_dim`
    pub key: ParamId,
    /// `context_dim × query_dim`
    pub value: ParamId,
    /// `query_dim × query_dim`, zero-initialised
    pub output: ParamId,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        query_dim: usize,
        context_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            query: store.normal(format!("{prefix}.query"), &[query_dim, attn_dim], INIT_STD, rng)?,
            key: store.normal(format!("{prefix}.key"), &[context_dim, attn_dim], INIT_STD, rng)?,
            value: store.normal(format!("{prefix}.value"), &[context_dim, query_dim], INIT_STD, rng)?,
            output: store.zeros(format!("{prefix}.output"), &[query_dim, query_dim])?,
        })
    }

    /// `softmax((queries·Wq)(context·Wk)ᵀ/√d)·(context·Wv)·Wo`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, context: Var, queries: Var) -> Result<Var> {
        let wq = tape.param(store, self.query);
        let wk = tape.param(store, self.key);
        let wv = tape.param(store, self.value);
        let wo = tape.param(store, self.output);
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(context, wk)?;
        let v = tape.matmul(context, wv)?;
        let a = tape.attention(q, k, v, &AttentionMask::None)?;
        tape.matmul(a, wo)
    }
}

/// Pre-norm transformer block: multi-head self-attention followed by a GELU
/// feed-forward layer, each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub heads: usize,
    pub attn_norm: LayerNormParams,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub attn_out: ParamId,
    pub ffn_norm: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl TransformerBlock {
    /// `zero_outputs` zero-initialises both residual branch outputs so the
    /// block starts as the identity map.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        zero_outputs: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Parameter(format!("width {dim} not divisible by {heads} heads")));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let out_std = if zero_outputs { 0.0 } else { std };
        let hidden = 4 * dim;
        Ok(Self {
            heads,
            attn_norm: LayerNormParams::new(store, &format!("{prefix}.attn_norm"), dim)?,
            query: store.normal(format!("{prefix}.attn.query"), &[dim, dim], std, rng)?,
            key: store.normal(format!("{prefix}.attn.key"), &[dim, dim], std, rng)?,
            value: store.normal(format!("{prefix}.attn.value"), &[dim, dim], std, rng)?,
            attn_out: if zero_outputs {
                store.zeros(format!("{prefix}.attn.output"), &[dim, dim])?
            } else {
                store.normal(format!("{prefix}.attn.output"), &[dim, dim], out_std, rng)?
            },
            ffn_norm: LayerNormParams::new(store, &format!("{prefix}.ffn_norm"), dim)?,
            ffn_in: Linear::new(store, &format!("{prefix}.ffn.in"), dim, hidden, std, true, rng)?,
            ffn_out: Linear::new(
                store,
                &format!("{prefix}.ffn.out"),
                hidden,
                dim,
                if zero_outputs {
                    0.0
                } else {
                    1.0 / (hidden as f64).sqrt()
                },
                true,
                rng,
            )?,
        })
    }

    /// `rope_positions`, when given, rotates per-head queries and keys by the
    /// position of each token.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: &AttentionMask,
        rope_positions: Option<&[usize]>,
    ) -> Result<Var> {
        let dim = tape.shape(x)[1];
        let head_dim = dim / self.heads;
        let h = self.attn_norm.forward(tape, store, x)?;
        let wq = tape.param(store, self.query);
        let wk = tape.param(store, self.key);
        let wv = tape.param(store, self.value);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let mut qh = tape.slice_cols(q, i * head_dim, head_dim)?;
            let mut kh = tape.slice_cols(k, i * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, i * head_dim, head_dim)?;
            if let Some(pos) = rope_positions {
                qh = tape.rope(qh, pos)?;
                kh = tape.rope(kh, pos)?;
            }
            heads.push(tape.attention(qh, kh, vh, mask)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let wo = tape.param(store, self.attn_out);
        let attn = tape.matmul(merged, wo)?;
        let x = tape.add(x, attn)?;

        let h = self.ffn_norm.forward(tape, store, x)?;
        let h = self.ffn_in.forward(tape, store, h)?;
        let h = tape.gelu(h)?;
        let h = self.ffn_out.forward(tape, store, h)?;
        tape.add(x, h)
    }
}
