//! Local component router.
//!
//! Each latent token receives a softmax distribution over `M` facial
//! components. Row `m` of the pre-softmax logits is
//! `W_m · LN(l_m) · W_l · W_zᵀ · LN(z)ᵀ`, i.e. a per-component aggregation of
//! the bilinear correlations between the component's local tokens and every
//! latent token. The weights then gate a per-component cross-attention
//! reconstruction of the latents:
//!
//! `z* = z + α · Σ_m w_mᵀ ⊙ φ(l_m, z)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{CrossAttention, LayerNormParams, Linear, INIT_STD};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor applied to router weights before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Component names used when `M = 6`.
pub const FACIAL_COMPONENTS: [&str; 6] = ["eyebrows", "eyes", "mouth", "nose", "skin", "hair"];

pub fn component_names(m: usize) -> Vec<String> {
    if m == FACIAL_COMPONENTS.len() {
        FACIAL_COMPONENTS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..m).map(|i| format!("component{i}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouterDims {
    /// `M`
    pub components: usize,
    /// `L`, tokens per component sequence
    pub local_tokens: usize,
    /// `D`, local token width
    pub local_dim: usize,
    /// `D'`, latent token width
    pub latent_dim: usize,
    /// `D''`, shared projection width (also φ's attention width)
    pub inner_dim: usize,
    /// Width of the raw per-component features fed to the local encoder.
    pub feature_dim: usize,
}

/// `M` sequences of `L×D` local tokens, one per facial component.
#[derive(Clone, Debug)]
pub struct LocalTokenSet {
    pub tokens: Vec<Var>,
    pub component_names: Vec<String>,
}

impl LocalTokenSet {
    pub fn new(tape: &Tape, tokens: Vec<Var>, component_names: Vec<String>) -> Result<Self> {
        if tokens.len() != component_names.len() {
            return Err(Error::Arity {
                expected: component_names.len(),
                got: tokens.len(),
            });
        }
        let first = tokens
            .first()
            .map(|&v| tape.shape(v).to_vec())
            .ok_or(Error::Arity { expected: 1, got: 0 })?;
        for &t in &tokens {
            if tape.shape(t) != first.as_slice() || first.len() != 2 {
                return Err(Error::Dimension {
                    op: "local token set",
                    lhs: first.clone(),
                    rhs: tape.shape(t).to_vec(),
                });
            }
        }
        Ok(Self {
            tokens,
            component_names,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `F·S` latent tokens with their frame assignment.
#[derive(Clone, Debug)]
pub struct LatentTokens {
    pub tokens: Var,
    pub frames: usize,
    pub tokens_per_frame: usize,
}

impl LatentTokens {
    pub fn new(tape: &Tape, tokens: Var, frames: usize, tokens_per_frame: usize) -> Result<Self> {
        let shape = tape.shape(tokens);
        if shape.len() != 2 || shape[0] != frames * tokens_per_frame {
            return Err(Error::Dimension {
                op: "latent tokens",
                lhs: shape.to_vec(),
                rhs: vec![frames, tokens_per_frame],
            });
        }
        Ok(Self {
            tokens,
            frames,
            tokens_per_frame,
        })
    }

    pub fn frame_of_token(&self) -> Vec<usize> {
        (0..self.frames * self.tokens_per_frame)
            .map(|i| i / self.tokens_per_frame)
            .collect()
    }

    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self { tokens, ..*self }
    }
}

/// Pre-softmax logits and per-token component weights, both `M×L'`.
#[derive(Clone, Copy, Debug)]
pub struct RouterOutput {
    pub logits: Var,
    pub weights: Var,
}

/// Per-token ground-truth component indicators (`M×L'`, at most one 1 per column).
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentMasks {
    y: Tensor,
}

impl ComponentMasks {
    pub fn new(y: Tensor) -> Result<Self> {
        if y.rank() != 2 {
            return Err(Error::Shape {
                shape: y.shape().to_vec(),
                reason: "masks must be M×L'".into(),
            });
        }
        let (m, l) = (y.shape()[0], y.shape()[1]);
        for token in 0..l {
            let mut hot = 0;
            for c in 0..m {
                let v = y.data()[c * l + token];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::MaskConsistency { token });
                }
                hot += (v == 1.0) as usize;
            }
            if hot > 1 {
                return Err(Error::MaskConsistency { token });
            }
        }
        Ok(Self { y })
    }

    /// Builds masks from per-token labels (`None` = background).
    pub fn from_labels(labels: &[Option<usize>], components: usize) -> Result<Self> {
        let l = labels.len();
        let mut y = vec![0.0; components * l];
        for (t, lab) in labels.iter().enumerate() {
            if let Some(c) = *lab {
                if c >= components {
                    return Err(Error::MaskConsistency { token: t });
                }
                y[c * l + t] = 1.0;
            }
        }
        Self::new(Tensor::new(&[components, l], y)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.y
    }

    pub fn components(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.y.shape()[1]
    }

    pub fn label(&self, token: usize) -> Option<usize> {
        let l = self.tokens();
        (0..self.components()).find(|&c| self.y.data()[c * l + token] == 1.0)
    }

    pub fn foreground_count(&self) -> usize {
        self.y.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Trainable map from raw per-component features (`L×P`) to local tokens (`L×D`).
#[derive(Clone, Debug)]
pub struct LocalEncoder {
    pub proj: Linear,
    pub components: usize,
}

impl LocalEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &RouterDims, rng: &mut R) -> Result<Self> {
        let std = 1.0 / (dims.feature_dim as f64).sqrt();
        Ok(Self {
            proj: Linear::new(
                store,
                &format!("{prefix}.proj"),
                dims.feature_dim,
                dims.local_dim,
                std,
                true,
                rng,
            )?,
            components: dims.components,
        })
    }
}

/// Embeds each component's features with the shared local encoder.
pub fn encode_local_components(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &LocalEncoder,
    component_features: &[Var],
) -> Result<LocalTokenSet> {
    if component_features.len() != encoder.components {
        return Err(Error::Arity {
            expected: encoder.components,
            got: component_features.len(),
        });
    }
    let tokens = component_features
        .iter()
        .map(|&f| encoder.proj.forward(tape, store, f))
        .collect::<Result<Vec<_>>>()?;
    LocalTokenSet::new(tape, tokens, component_names(encoder.components))
}

#[derive(Clone, Debug)]
pub struct RouterParams {
    pub dims: RouterDims,
    /// `M×L`; row `m` is the aggregator `W_m`.
    pub aggregator: ParamId,
    /// `D×D''`
    pub local_proj: ParamId,
    /// `D'×D''`
    pub latent_proj: ParamId,
    pub local_norm: LayerNormParams,
    pub latent_norm: LayerNormParams,
    pub phi: CrossAttention,
}

impl RouterParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: RouterDims, rng: &mut R) -> Result<Self> {
        if dims.components < 2 {
            return Err(Error::DegenerateRouting(dims.components));
        }
        Ok(Self {
            dims,
            aggregator: store.normal(
                format!("{prefix}.aggregator"),
                &[dims.components, dims.local_tokens],
                INIT_STD,
                rng,
            )?,
            local_proj: store.normal(
                format!("{prefix}.local_proj"),
                &[dims.local_dim, dims.inner_dim],
                INIT_STD,
                rng,
            )?,
            latent_proj: store.normal(
                format!("{prefix}.latent_proj"),
                &[dims.latent_dim, dims.inner_dim],
                INIT_STD,
                rng,
            )?,
            local_norm: LayerNormParams::new(store, &format!("{prefix}.local_norm"), dims.local_dim)?,
            latent_norm: LayerNormParams::new(store, &format!("{prefix}.latent_norm"), dims.latent_dim)?,
            phi: CrossAttention::new(
                store,
                &format!("{prefix}.phi"),
                dims.latent_dim,
                dims.local_dim,
                dims.inner_dim,
                rng,
            )?,
        })
    }
}

/// `M×L'` routing logits.
pub fn router_logits(
    tape: &mut Tape,
    store: &ParamStore,
    params: &RouterParams,
    local: &LocalTokenSet,
    z: &LatentTokens,
) -> Result<Var> {
    let m = params.dims.components;
    if local.len() != m {
        return Err(Error::Arity {
            expected: m,
            got: local.len(),
        });
    }
    let local_cols = store.get(params.local_proj).shape()[1];
    let latent_cols = store.get(params.latent_proj).shape()[1];
    if local_cols != latent_cols {
        return Err(Error::ProjectionSpace {
            local: local_cols,
            latent: latent_cols,
        });
    }
    let w_l = tape.param(store, params.local_proj);
    let w_z = tape.param(store, params.latent_proj);
    let agg = tape.param(store, params.aggregator);

    let z_norm = params.latent_norm.forward(tape, store, z.tokens)?;
    // (z̃·W_z)ᵀ : D''×L'
    let z_proj = tape.matmul(z_norm, w_z)?;
    let z_proj_t = tape.transpose(z_proj)?;

    let mut rows = Vec::with_capacity(m);
    for (c, &l) in local.tokens.iter().enumerate() {
        let l_norm = params.local_norm.forward(tape, store, l)?;
        let w_m = tape.slice_rows(agg, c, 1)?;
        let pooled = tape.matmul(w_m, l_norm)?; // 1×D
        let pooled = tape.matmul(pooled, w_l)?; // 1×D''
        rows.push(tape.matmul(pooled, z_proj_t)?); // 1×L'
    }
    tape.concat_rows(&rows)
}

/// Softmax over the component axis for every token.
pub fn router_weights(tape: &mut Tape, logits: Var) -> Result<RouterOutput> {
    let m = tape.shape(logits)[0];
    if m < 2 {
        return Err(Error::DegenerateRouting(m));
    }
    let weights = tape.softmax(logits, 0)?;
    Ok(RouterOutput { logits, weights })
}

/// φ(context, queries): queries from the latent tokens, keys and values from
/// the context (local tokens of one component).
pub fn cross_attention_phi(
    tape: &mut Tape,
    store: &ParamStore,
    phi: &CrossAttention,
    context: Var,
    queries: Var,
) -> Result<Var> {
    phi.forward(tape, store, context, queries)
}

/// `z* = z + α · Σ_m w_mᵀ ⊙ φ(l_m, z)`.
pub fn spatial_enhance(
    tape: &mut Tape,
    store: &ParamStore,
    params: &RouterParams,
    z: &LatentTokens,
    local: &LocalTokenSet,
    router: &RouterOutput,
    alpha: f64,
) -> Result<LatentTokens> {
    if !alpha.is_finite() {
        return Err(Error::Parameter(format!("alpha must be finite, got {alpha}")));
    }
    let mut acc: Option<Var> = None;
    for (c, &l) in local.tokens.iter().enumerate() {
        let u = cross_attention_phi(tape, store, &params.phi, l, z.tokens)?;
        let w = tape.slice_rows(router.weights, c, 1)?;
        let weighted = tape.scale_rows(u, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }
    let acc = acc.ok_or(Error::Arity {
        expected: params.dims.components,
        got: 0,
    })?;
    let delta = tape.scale(acc, alpha)?;
    let out = tape.add(z.tokens, delta)?;
    Ok(z.with_tokens(out))
}

/// Mean over foreground tokens of `−log w` at the true component.
/// Background tokens (all-zero mask columns) contribute nothing.
pub fn routing_loss(tape: &mut Tape, router: &RouterOutput, masks: &ComponentMasks) -> Result<Var> {
    let shape = tape.shape(router.weights).to_vec();
    if shape != masks.tensor().shape() {
        return Err(Error::Dimension {
            op: "routing_loss",
            lhs: shape,
            rhs: masks.tensor().shape().to_vec(),
        });
    }
    let foreground = masks.foreground_count().max(1);
    let log_w = tape.clamp_log(router.weights, LOG_FLOOR)?;
    let y = tape.constant(masks.tensor().clone());
    let picked = tape.mul(log_w, y)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / foreground as f64)
}

/// Fraction of foreground tokens whose highest-weight component is the true one.
pub fn routing_accuracy(weights: &Tensor, masks: &ComponentMasks) -> (usize, usize) {
    let (m, l) = (masks.components(), masks.tokens());
    let mut correct = 0;
    let mut total = 0;
    for t in 0..l {
        let Some(label) = masks.label(t) else { continue };
        total += 1;
        let best = (0..m)
            .max_by(|&a, &b| weights.data()[a * l + t].total_cmp(&weights.data()[b * l + t]))
            .unwrap_or(0);
        correct += (best == label) as usize;
    }
    (correct, total)
}
