//! Finite-difference checks of every differentiable module at training shapes.
//!
//! Parameters are perturbed away from their initial values first, so that
//! zero-initialised projections do not hide gradients behind exact zeros.
//! Large tensors are checked on a seeded subset of coordinates plus random
//! whole-module directions.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{denoiser_loss, tam_loss, Model, StepDraws, TrainConfig};
use crate::data::{generate_dataset, DatasetSpec, SyntheticSample};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_store, GradCheckOptions, GradCheckReport};
use crate::kernels::AttentionMask;
use crate::params::ParamStore;
use crate::router::{
    encode_local_components, router_logits, router_weights, routing_loss, spatial_enhance, LatentTokens,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest relative error a check may report.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckModule {
    All,
    Router,
    Tam,
    Denoiser,
    Kernel,
}

impl FromStr for CheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "router" => Ok(Self::Router),
            "tam" => Ok(Self::Tam),
            "denoiser" => Ok(Self::Denoiser),
            "kernel" => Ok(Self::Kernel),
            other => Err(Error::Config(format!("unknown module {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= TOLERANCE
    }
}

fn sampled(eps: f64, seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        eps,
        max_coords_per_tensor: Some(6),
        directions: 3,
        seed,
    }
}

/// Adds `N(0, std²)` to every parameter.
pub fn perturb(store: &mut ParamStore, std: f64, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let noise = Tensor::randn(store.get(id).shape(), std, &mut rng)?;
        let moved: Vec<f64> = store
            .get(id)
            .data()
            .iter()
            .zip(noise.data())
            .map(|(a, b)| a + b)
            .collect();
        store.get_mut(id).assign(&moved)?;
    }
    Ok(())
}

fn fixture(config: &TrainConfig) -> Result<(Model, SyntheticSample, StepDraws)> {
    let mut model = Model::new(config)?;
    perturb(&mut model.store, 0.1, config.seed ^ 0x5eed)?;
    let sample = generate_dataset(&DatasetSpec {
        subjects: 1,
        videos_per_subject: 1,
        frames: config.frames,
        tokens_per_frame: config.tokens_per_frame,
        dim: config.latent_dim,
        components: config.components,
        noise_level: 0.02,
        seed: config.seed,
    })?
    .remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draws = StepDraws::draw(&mut rng, config)?;
    draws.null = false;
    draws.t = config.timesteps / 2 + 1;
    Ok((model, sample, draws))
}

fn kernel_checks(config: &TrainConfig, eps: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (l, d, di, m) = (
        config.latent_tokens(),
        config.latent_dim,
        config.inner_dim,
        config.components,
    );
    let head = d / config.heads;
    let frames: Vec<usize> = (0..l).map(|i| i / config.tokens_per_frame).collect();

    type Body = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
    let mask = AttentionMask::causal(frames.clone());
    let positions = frames.clone();
    let cases: Vec<(&str, Vec<Vec<usize>>, Body)> = vec![
        (
            "kernel.matmul",
            vec![vec![l, d], vec![d, di]],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        ("kernel.softmax", vec![vec![m, l]], Box::new(|t, v| t.softmax(v[0], 0))),
        (
            "kernel.layer_norm",
            vec![vec![l, d], vec![d], vec![d]],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
        ),
        (
            "kernel.causal_attention",
            vec![vec![l, head], vec![l, head], vec![l, head]],
            Box::new(move |t, v| t.attention(v[0], v[1], v[2], &mask)),
        ),
        (
            "kernel.rope",
            vec![vec![l, head]],
            Box::new(move |t, v| t.rope(v[0], &positions)),
        ),
        ("kernel.gelu", vec![vec![l, d]], Box::new(|t, v| t.gelu(v[0]))),
        (
            "kernel.clamp_log",
            vec![vec![m, l]],
            Box::new(|t, v| {
                let w = t.softmax(v[0], 0)?;
                t.clamp_log(w, crate::router::LOG_FLOOR)
            }),
        ),
    ];
    let mut out = Vec::new();
    for (i, (name, shapes, body)) in cases.into_iter().enumerate() {
        let mut store = ParamStore::new();
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(j, s)| store.register(format!("{name}.{j}"), Tensor::randn(s, 1.0, &mut rng)?))
            .collect::<Result<Vec<_>>>()?;
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
            let y = body(&mut tape, &vars)?;
            Tensor::randn(tape.shape(y), 1.0, &mut rng)?
        };
        let f = |tape: &mut Tape, s: &ParamStore| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
            let y = body(tape, &vars)?;
            let r = tape.constant(probe.clone());
            let prod = tape.mul(y, r)?;
            tape.sum(prod)
        };
        let report = grad_check_store(f, &store, |_| true, &sampled(eps, i as u64))?;
        out.push(CheckResult {
            name: name.to_string(),
            report,
        });
    }
    Ok(out)
}

fn router_check(config: &TrainConfig, eps: f64) -> Result<CheckResult> {
    let (model, sample, _) = fixture(config)?;
    let cond_features = sample.subject.local_features(config.local_tokens)?;
    let masks = sample.masks()?;
    let z = sample.latents.tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 1);
    let probe = Tensor::randn(z.shape(), 1.0, &mut rng)?;
    let f = |tape: &mut Tape, s: &ParamStore| {
        let feats: Vec<Var> = cond_features.iter().map(|f| tape.constant(f.clone())).collect();
        let local = encode_local_components(tape, s, &model.denoiser.encoder, &feats)?;
        let zv = tape.constant(z.clone());
        let tokens = LatentTokens::new(tape, zv, config.frames, config.tokens_per_frame)?;
        let logits = router_logits(tape, s, &model.denoiser.router, &local, &tokens)?;
        let routed = router_weights(tape, logits)?;
        let enhanced = spatial_enhance(tape, s, &model.denoiser.router, &tokens, &local, &routed, config.alpha)?;
        let r = tape.constant(probe.clone());
        let prod = tape.mul(enhanced.tokens, r)?;
        let proj = tape.mean(prod)?;
        let l = routing_loss(tape, &routed, &masks)?;
        tape.add(l, proj)
    };
    let select = |n: &str| n.starts_with("denoiser.router.") || n.starts_with("denoiser.local_encoder.");
    Ok(CheckResult {
        name: "router".into(),
        report: grad_check_store(f, &model.store, select, &sampled(eps, 11))?,
    })
}

fn tam_check(config: &TrainConfig, eps: f64) -> Result<CheckResult> {
    let (model, sample, draws) = fixture(config)?;
    let f = |tape: &mut Tape, s: &ParamStore| tam_loss(tape, s, &model, &sample, &draws);
    Ok(CheckResult {
        name: "tam".into(),
        report: grad_check_store(f, &model.store, super::is_tam_param, &sampled(eps, 12))?,
    })
}

fn denoiser_check(config: &TrainConfig, eps: f64) -> Result<CheckResult> {
    let (model, sample, draws) = fixture(config)?;
    let f = |tape: &mut Tape, s: &ParamStore| Ok(denoiser_loss(tape, s, &model, &sample, &draws)?.0);
    Ok(CheckResult {
        name: "denoiser".into(),
        report: grad_check_store(f, &model.store, |n| n.starts_with("denoiser."), &sampled(eps, 13))?,
    })
}

/// Runs the checks for `module` on shapes taken from `config`.
pub fn run_suite(module: CheckModule, config: &TrainConfig, eps: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(module, CheckModule::All | CheckModule::Kernel) {
        out.extend(kernel_checks(config, eps)?);
    }
    if matches!(module, CheckModule::All | CheckModule::Router) {
        out.push(router_check(config, eps)?);
    }
    if matches!(module, CheckModule::All | CheckModule::Tam) {
        out.push(tam_check(config, eps)?);
    }
    if matches!(module, CheckModule::All | CheckModule::Denoiser) {
        out.push(denoiser_check(config, eps)?);
    }
    Ok(out)
}
