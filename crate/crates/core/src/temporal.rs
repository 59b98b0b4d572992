//! Chunk-wise temporal autoregressive refinement.
//!
//! Denoised latents are split along the frame axis into `K` chunks. Chunk
//! `k` is prefixed with the last enhanced frame of chunk `k−1` (teacher
//! forcing) and refined by an additive bias
//!
//! `c*_k = c_k + β·b_k`, `b_k = φ(ψ(c*_{k−1}), c_k)`
//!
//! where ψ is a causal, RoPE-positioned transformer over the previous
//! enhanced chunk and φ a cross-attention reading from it. The first chunk
//! is conditioned on a learned start-frame block.
//!
//! Positions on the timeline are `0` for the start block and `f + 1` for
//! video frame `f`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::AttentionMask;
use crate::layers::{CrossAttention, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::router::LatentTokens;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalDims {
    /// `D'`
    pub latent_dim: usize,
    /// `S`
    pub tokens_per_frame: usize,
    /// Attention width of φ.
    pub inner_dim: usize,
    /// `N`
    pub layers: usize,
    /// `H`
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct PsiParams {
    pub blocks: Vec<TransformerBlock>,
}

impl PsiParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: &TemporalDims,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..dims.layers)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.{i}"), dims.latent_dim, dims.heads, false, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }
}

#[derive(Clone, Debug)]
pub struct TamParams {
    pub dims: TemporalDims,
    pub psi: PsiParams,
    pub phi: CrossAttention,
    /// `S×D'` block standing in for the frame before the first chunk.
    pub start: ParamId,
    pub beta: f64,
}

impl TamParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: TemporalDims,
        beta: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !beta.is_finite() {
            return Err(Error::Parameter(format!("beta must be finite, got {beta}")));
        }
        Ok(Self {
            dims,
            psi: PsiParams::new(store, &format!("{prefix}.psi"), &dims, rng)?,
            phi: CrossAttention::new(
                store,
                &format!("{prefix}.phi"),
                dims.latent_dim,
                dims.latent_dim,
                dims.inner_dim,
                rng,
            )?,
            start: store.zeros(format!("{prefix}.start"), &[dims.tokens_per_frame, dims.latent_dim])?,
            beta,
        })
    }
}

/// A contiguous run of frames plus (once filled) one prepended conditioning frame.
#[derive(Clone, Debug)]
pub struct Chunk {
    /// 1-based chunk number; the start block is chunk 0.
    pub index: usize,
    pub tokens_per_frame: usize,
    /// Conditioning frame tokens (`S×D'`) and their timeline position.
    pub conditioning: Option<(Var, usize)>,
    /// `F_c·S×D'`
    pub payload: Var,
    /// Timeline position of each payload frame.
    pub payload_positions: Vec<usize>,
}

impl Chunk {
    pub fn frames(&self) -> usize {
        self.payload_positions.len()
    }

    /// Conditioning frame followed by the payload.
    pub fn tokens(&self, tape: &mut Tape) -> Result<Var> {
        match self.conditioning {
            Some((c, _)) => tape.concat_rows(&[c, self.payload]),
            None => Ok(self.payload),
        }
    }

    /// Timeline position of every token in [`Chunk::tokens`].
    pub fn token_positions(&self) -> Vec<usize> {
        let s = self.tokens_per_frame;
        let mut out = Vec::with_capacity((self.frames() + 1) * s);
        if let Some((_, p)) = self.conditioning {
            out.extend(std::iter::repeat_n(p, s));
        }
        for &p in &self.payload_positions {
            out.extend(std::iter::repeat_n(p, s));
        }
        out
    }

    /// Last payload frame (`S×D'`) and its position.
    pub fn last_frame(&self, tape: &mut Tape) -> Result<(Var, usize)> {
        let s = self.tokens_per_frame;
        let last = *self
            .payload_positions
            .last()
            .ok_or_else(|| Error::Contract("empty chunk".into()))?;
        let v = tape.slice_rows(self.payload, (self.frames() - 1) * s, s)?;
        Ok((v, last))
    }
}

/// Splits `F` frames into `K` equal chunks in temporal order.
pub fn split_chunks(tape: &mut Tape, z0: &LatentTokens, chunks: usize) -> Result<Vec<Chunk>> {
    let (f, s) = (z0.frames, z0.tokens_per_frame);
    if chunks == 0 || f % chunks != 0 {
        return Err(Error::Chunking { frames: f, chunks });
    }
    let per = f / chunks;
    (0..chunks)
        .map(|k| {
            let payload = if chunks == 1 {
                z0.tokens
            } else {
                tape.slice_rows(z0.tokens, k * per * s, per * s)?
            };
            Ok(Chunk {
                index: k + 1,
                tokens_per_frame: s,
                conditioning: None,
                payload,
                payload_positions: (k * per..(k + 1) * per).map(|fr| fr + 1).collect(),
            })
        })
        .collect()
}

/// Concatenates chunk payloads back into one token matrix.
pub fn reassemble(tape: &mut Tape, chunks: &[Chunk]) -> Result<Var> {
    if chunks.len() == 1 {
        return Ok(chunks[0].payload);
    }
    let parts: Vec<Var> = chunks.iter().map(|c| c.payload).collect();
    tape.concat_rows(&parts)
}

/// Causal transformer over tokens tagged with non-decreasing frame positions.
pub fn psi_forward(
    tape: &mut Tape,
    store: &ParamStore,
    psi: &PsiParams,
    tokens: Var,
    positions: &[usize],
) -> Result<Var> {
    if let Some(t) = positions.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::Ordering { token: t + 1 });
    }
    if positions.len() != tape.shape(tokens)[0] {
        return Err(Error::Dimension {
            op: "psi_forward",
            lhs: tape.shape(tokens).to_vec(),
            rhs: vec![positions.len()],
        });
    }
    let mask = AttentionMask::causal(positions.to_vec());
    let mut x = tokens;
    for block in &psi.blocks {
        x = block.forward(tape, store, x, &mask, Some(positions))?;
    }
    Ok(x)
}

/// The learned start block, shaped as chunk 0.
pub fn start_chunk(tape: &mut Tape, store: &ParamStore, params: &TamParams) -> Chunk {
    Chunk {
        index: 0,
        tokens_per_frame: params.dims.tokens_per_frame,
        conditioning: None,
        payload: tape.param(store, params.start),
        payload_positions: vec![0],
    }
}

/// Refines `current` given the previous enhanced chunk. Returns the enhanced
/// chunk and the full predicted bias (conditioning rows included).
pub fn refine_chunk(
    tape: &mut Tape,
    store: &ParamStore,
    params: &TamParams,
    previous: &Chunk,
    current: &Chunk,
) -> Result<(Chunk, Var)> {
    if current.conditioning.is_none() {
        return Err(Error::TeacherForcing(current.index));
    }
    let s = current.tokens_per_frame;
    let prev_tokens = previous.tokens(tape)?;
    let context = psi_forward(tape, store, &params.psi, prev_tokens, &previous.token_positions())?;
    let queries = current.tokens(tape)?;
    let bias = params.phi.forward(tape, store, context, queries)?;
    let payload_bias = tape.slice_rows(bias, s, current.frames() * s)?;
    let scaled = tape.scale(payload_bias, params.beta)?;
    let payload = tape.add(current.payload, scaled)?;
    Ok((
        Chunk {
            payload,
            ..current.clone()
        },
        bias,
    ))
}

/// Refines every chunk of `z0` in temporal order and reassembles the video.
pub fn temporal_refine(
    tape: &mut Tape,
    store: &ParamStore,
    params: &TamParams,
    z0: &LatentTokens,
    chunks: usize,
) -> Result<LatentTokens> {
    if z0.tokens_per_frame != params.dims.tokens_per_frame {
        return Err(Error::Dimension {
            op: "temporal_refine",
            lhs: vec![z0.tokens_per_frame],
            rhs: vec![params.dims.tokens_per_frame],
        });
    }
    let parts = split_chunks(tape, z0, chunks)?;
    let mut previous = start_chunk(tape, store, params);
    let mut refined = Vec::with_capacity(parts.len());
    for mut chunk in parts {
        chunk.conditioning = Some(previous.last_frame(tape)?);
        let (enhanced, _) = refine_chunk(tape, store, params, &previous, &chunk)?;
        refined.push(enhanced.clone());
        previous = enhanced;
    }
    let tokens = reassemble(tape, &refined)?;
    Ok(z0.with_tokens(tokens))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn dims() -> TemporalDims {
        TemporalDims {
            latent_dim: 4,
            tokens_per_frame: 2,
            inner_dim: 4,
            layers: 1,
            heads: 2,
        }
    }

    #[test]
    fn chunking_requires_divisibility() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::zeros(&[6, 4]).unwrap());
        let z = LatentTokens::new(&tape, t, 3, 2).unwrap();
        assert!(matches!(
            split_chunks(&mut tape, &z, 2),
            Err(Error::Chunking { frames: 3, chunks: 2 })
        ));
        assert_eq!(split_chunks(&mut tape, &z, 1).unwrap().len(), 1);
        assert_eq!(split_chunks(&mut tape, &z, 3).unwrap().len(), 3);
    }

    #[test]
    fn unfilled_conditioning_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let tam = TamParams::new(&mut store, "tam", dims(), 0.2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::randn(&[4, 4], 1.0, &mut rng).unwrap());
        let z = LatentTokens::new(&tape, t, 2, 2).unwrap();
        let chunks = split_chunks(&mut tape, &z, 2).unwrap();
        let start = start_chunk(&mut tape, &store, &tam);
        assert!(matches!(
            refine_chunk(&mut tape, &store, &tam, &start, &chunks[0]),
            Err(Error::TeacherForcing(1))
        ));
    }

    #[test]
    fn psi_rejects_decreasing_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let psi = PsiParams::new(&mut store, "psi", &dims(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng).unwrap());
        assert!(matches!(
            psi_forward(&mut tape, &store, &psi, t, &[0, 2, 1]),
            Err(Error::Ordering { token: 2 })
        ));
    }

    #[test]
    fn untrained_module_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let tam = TamParams::new(&mut store, "tam", dims(), 0.2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let input = Tensor::randn(&[8, 4], 1.0, &mut rng).unwrap();
        let t = tape.constant(input.clone());
        let z = LatentTokens::new(&tape, t, 4, 2).unwrap();
        let out = temporal_refine(&mut tape, &store, &tam, &z, 2).unwrap();
        assert!(tape.value(out.tokens).bit_eq(&input));
    }
}
