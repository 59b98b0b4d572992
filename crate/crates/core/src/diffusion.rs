//! Noise schedule, denoiser, diffusion loss and guided DDIM sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::AttentionMask;
use crate::layers::{LayerNormParams, Linear, TransformerBlock, INIT_STD};
use crate::params::{ParamId, ParamStore};
use crate::router::{
    encode_local_components, router_logits, router_weights, spatial_enhance, LatentTokens, LocalEncoder, LocalTokenSet,
    RouterDims, RouterOutput, RouterParams,
};
use crate::tape::{Tape, Var};
use crate::temporal::{temporal_refine, TamParams};
use crate::tensor::Tensor;
use crate::video::LatentVideo;

/// Cumulative signal retention `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_T > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::Schedule("alpha_bar must start at 1 and have T ≥ 1".into()));
        }
        if alpha_bar
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Greater))
            || alpha_bar.last().is_some_and(|&a| a <= 0.0)
        {
            return Err(Error::Schedule(
                "alpha_bar must decrease strictly and stay positive".into(),
            ));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Linearly spaced `β_1..β_T` with `ᾱ_t = Π_{s≤t}(1 − β_s)`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("T must be positive".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 < beta_start ≤ beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for s in 0..steps {
        let beta = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * s as f64 / (steps - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

/// `√ᾱ·z0 + √(1−ᾱ)·ε`, elementwise.
pub fn noise_combination(z0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect()
}

pub fn add_noise(z0: &LatentVideo, eps: &LatentVideo, t: usize, schedule: &NoiseSchedule) -> Result<LatentVideo> {
    if z0.tensor().shape() != eps.tensor().shape() {
        return Err(Error::Contract("noise shape differs from latent shape".into()));
    }
    if t == 0 || t > schedule.steps() {
        return Err(Error::Step {
            t,
            lo: 1,
            hi: schedule.steps(),
        });
    }
    let data = noise_combination(z0.data(), eps.data(), schedule.alpha_bar(t));
    LatentVideo::new(Tensor::new(z0.tensor().shape(), data)?)
}

/// Deterministic DDIM update from `t` to `t_prev`.
pub fn ddim_step(z_t: &[f64], eps_hat: &[f64], t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t_prev >= t {
        return Err(Error::StepOrder { t, t_prev });
    }
    if t > schedule.steps() {
        return Err(Error::Step {
            t,
            lo: 1,
            hi: schedule.steps(),
        });
    }
    if z_t.len() != eps_hat.len() {
        return Err(Error::Contract("prediction shape differs from latent shape".into()));
    }
    let (a_t, a_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let (sa_t, sb_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (sa_prev, sb_prev) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    Ok(z_t
        .iter()
        .zip(eps_hat)
        .map(|(&z, &e)| {
            let x0 = (z - sb_t * e) / sa_t;
            sa_prev * x0 + sb_prev * e
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserDims {
    pub router: RouterDims,
    /// `F`
    pub frames: usize,
    /// `S`
    pub tokens_per_frame: usize,
    /// `H`
    pub heads: usize,
    /// `B`
    pub blocks: usize,
    /// `T`
    pub timesteps: usize,
    /// Width of the identity-condition vector.
    pub identity_dim: usize,
}

/// Raw conditioning inputs before embedding.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Subject {
        /// One `L×P` feature grid per component.
        features: Vec<Tensor>,
        /// Identity-condition vector of width `identity_dim`.
        identity: Tensor,
    },
    Null,
}

impl Condition {
    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }
}

/// Embedded condition as seen by the denoiser.
#[derive(Clone, Debug)]
pub struct ConditionBundle {
    pub local: LocalTokenSet,
    /// `1×identity_dim`
    pub identity: Var,
    pub is_null: bool,
}

#[derive(Clone, Debug)]
pub struct DenoiserParams {
    pub dims: DenoiserDims,
    pub alpha: f64,
    pub input: Linear,
    /// `(T+1)×D'`
    pub time_embed: ParamId,
    pub cond_embed: Linear,
    pub encoder: LocalEncoder,
    pub router: RouterParams,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNormParams,
    pub output: Linear,
    /// One `L×D` null token sequence per component.
    pub null_local: Vec<ParamId>,
    /// `1×identity_dim`
    pub null_identity: ParamId,
}

impl DenoiserParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: DenoiserDims,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::Parameter(format!("alpha must be finite, got {alpha}")));
        }
        let r = dims.router;
        let d = r.latent_dim;
        let std = 1.0 / (d as f64).sqrt();
        let input = Linear::new(store, &format!("{prefix}.input"), d, d, std, true, rng)?;
        let time_embed = store.normal(format!("{prefix}.time_embed"), &[dims.timesteps + 1, d], INIT_STD, rng)?;
        let cond_embed = Linear::new(
            store,
            &format!("{prefix}.cond_embed"),
            dims.identity_dim,
            d,
            1.0 / (dims.identity_dim as f64).sqrt(),
            true,
            rng,
        )?;
        let encoder = LocalEncoder::new(store, &format!("{prefix}.local_encoder"), &r, rng)?;
        let router = RouterParams::new(store, &format!("{prefix}.router"), r, rng)?;
        let blocks = (0..dims.blocks)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), d, dims.heads, false, rng))
            .collect::<Result<Vec<_>>>()?;
        if blocks.is_empty() {
            return Err(Error::Parameter("denoiser needs at least one block".into()));
        }
        let final_norm = LayerNormParams::new(store, &format!("{prefix}.final_norm"), d)?;
        let output = Linear::new(store, &format!("{prefix}.output"), d, d, 0.0, true, rng)?;
        let null_local = (0..r.components)
            .map(|m| {
                store.normal(
                    format!("{prefix}.null_local{m}"),
                    &[r.local_tokens, r.local_dim],
                    INIT_STD,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let null_identity = store.normal(
            format!("{prefix}.null_identity"),
            &[1, dims.identity_dim],
            INIT_STD,
            rng,
        )?;
        Ok(Self {
            dims,
            alpha,
            input,
            time_embed,
            cond_embed,
            encoder,
            router,
            blocks,
            final_norm,
            output,
            null_local,
            null_identity,
        })
    }

    pub fn token_count(&self) -> usize {
        self.dims.frames * self.dims.tokens_per_frame
    }
}

/// Embeds raw conditioning inputs (or the learned null condition).
pub fn resolve_condition(
    tape: &mut Tape,
    store: &ParamStore,
    params: &DenoiserParams,
    cond: &Condition,
) -> Result<ConditionBundle> {
    match cond {
        Condition::Null => {
            let tokens = params.null_local.iter().map(|&id| tape.param(store, id)).collect();
            let local = LocalTokenSet::new(tape, tokens, crate::router::component_names(params.null_local.len()))?;
            Ok(ConditionBundle {
                local,
                identity: tape.param(store, params.null_identity),
                is_null: true,
            })
        }
        Condition::Subject { features, identity } => {
            if identity.numel() != params.dims.identity_dim {
                return Err(Error::Contract(format!(
                    "identity vector has {} values, expected {}",
                    identity.numel(),
                    params.dims.identity_dim
                )));
            }
            let feats: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
            let local = encode_local_components(tape, store, &params.encoder, &feats)?;
            let identity = tape.constant(identity.reshape(&[1, params.dims.identity_dim])?);
            Ok(ConditionBundle {
                local,
                identity,
                is_null: false,
            })
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenoiserOutput {
    /// `(F·S)×D'`
    pub eps_hat: Var,
    /// Block-1 routing.
    pub router: RouterOutput,
}

/// Noise prediction for `z_t` (`(F·S)×D'`) at step `t`.
pub fn denoiser_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &DenoiserParams,
    z_t: Var,
    t: usize,
    cond: &ConditionBundle,
) -> Result<DenoiserOutput> {
    let d = params.dims.router.latent_dim;
    let shape = tape.shape(z_t).to_vec();
    if shape != [params.token_count(), d] {
        return Err(Error::Contract(format!(
            "denoiser expects {}×{d} tokens, got {shape:?}",
            params.token_count()
        )));
    }
    if t > params.dims.timesteps {
        return Err(Error::Step {
            t,
            lo: 0,
            hi: params.dims.timesteps,
        });
    }
    let mut h = params.input.forward(tape, store, z_t)?;
    let table = tape.param(store, params.time_embed);
    let temb = tape.slice_rows(table, t, 1)?;
    h = tape.add_row(h, temb)?;
    let cemb = params.cond_embed.forward(tape, store, cond.identity)?;
    h = tape.add_row(h, cemb)?;

    let tokens = LatentTokens::new(tape, h, params.dims.frames, params.dims.tokens_per_frame)?;
    let logits = router_logits(tape, store, &params.router, &cond.local, &tokens)?;
    let routed = router_weights(tape, logits)?;
    let enhanced = spatial_enhance(tape, store, &params.router, &tokens, &cond.local, &routed, params.alpha)?;
    h = enhanced.tokens;

    for block in &params.blocks {
        h = block.forward(tape, store, h, &AttentionMask::None, None)?;
    }
    h = params.final_norm.forward(tape, store, h)?;
    let eps_hat = params.output.forward(tape, store, h)?;
    Ok(DenoiserOutput {
        eps_hat,
        router: routed,
    })
}

/// Mean squared error between noise and prediction.
pub fn diffusion_loss(tape: &mut Tape, eps: Var, eps_hat: Var) -> Result<Var> {
    if tape.shape(eps) != tape.shape(eps_hat) {
        return Err(Error::Contract(format!(
            "noise shape {:?} differs from prediction shape {:?}",
            tape.shape(eps),
            tape.shape(eps_hat)
        )));
    }
    tape.mse(eps, eps_hat)
}

/// `eps_uncond + scale·(eps_cond − eps_uncond)`.
pub fn guide(eps_cond: &[f64], eps_uncond: &[f64], scale: f64) -> Vec<f64> {
    eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(&c, &u)| u + scale * (c - u))
        .collect()
}

/// Descending timesteps visited by a `steps`-step sampler over a `T`-step
/// schedule; the final update always targets `t = 0`.
pub fn sampling_timesteps(schedule_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > schedule_steps {
        return Err(Error::Step {
            t: steps,
            lo: 1,
            hi: schedule_steps,
        });
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| (schedule_steps as f64 * (steps - i) as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    Ok(ts)
}

fn predict(store: &ParamStore, params: &DenoiserParams, z: &Tensor, t: usize, cond: &Condition) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let zt = tape.constant(z.clone());
    let bundle = resolve_condition(&mut tape, store, params, cond)?;
    let out = denoiser_forward(&mut tape, store, params, zt, t, &bundle)?;
    Ok(tape.value(out.eps_hat).data().to_vec())
}

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub cfg_scale: f64,
    /// Number of DDIM updates.
    pub steps: usize,
    pub chunks: usize,
    pub seed: u64,
    pub apply_tam: bool,
}

/// Guided DDIM sampling from seeded Gaussian noise, optionally followed by
/// one pass of temporal refinement.
pub fn sample(
    store: &ParamStore,
    params: &DenoiserParams,
    tam: &TamParams,
    schedule: &NoiseSchedule,
    cond: &Condition,
    opts: &SampleOptions,
) -> Result<LatentVideo> {
    if !(opts.cfg_scale >= 0.0 && opts.cfg_scale.is_finite()) {
        return Err(Error::Parameter(format!(
            "cfg scale must be ≥ 0, got {}",
            opts.cfg_scale
        )));
    }
    let (f, s, d) = (
        params.dims.frames,
        params.dims.tokens_per_frame,
        params.dims.router.latent_dim,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut z = Tensor::randn(&[f * s, d], 1.0, &mut rng)?;
    let ts = sampling_timesteps(schedule.steps(), opts.steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps_uncond = predict(store, params, &z, t, &Condition::Null)?;
        let eps_cond = if cond.is_null() {
            eps_uncond.clone()
        } else {
            predict(store, params, &z, t, cond)?
        };
        let guided = guide(&eps_cond, &eps_uncond, opts.cfg_scale);
        let next = ddim_step(z.data(), &guided, t, t_prev, schedule)?;
        z = Tensor::new(&[f * s, d], next)?;
    }
    let video = LatentVideo::from_tokens(&z, f, s)?;
    if opts.apply_tam {
        refine_video(store, tam, &video, opts.chunks)
    } else {
        Ok(video)
    }
}

/// Stand-alone temporal refinement of a latent video.
pub fn refine_video(store: &ParamStore, tam: &TamParams, video: &LatentVideo, chunks: usize) -> Result<LatentVideo> {
    let mut tape = Tape::new();
    let tokens = tape.constant(video.tokens());
    let z = LatentTokens::new(&tape, tokens, video.frames(), video.tokens_per_frame())?;
    let out = temporal_refine(&mut tape, store, tam, &z, chunks)?;
    LatentVideo::from_tokens(tape.value(out.tokens), video.frames(), video.tokens_per_frame())
}
