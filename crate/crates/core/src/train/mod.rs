//! Model assembly, the training step and loop, and evaluation.

mod checkpoint;
mod config;
mod optim;
pub mod suite;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Mode, TrainConfig};
pub use optim::{adamw_step, adamw_update, AdamWConfig, Moments, OptimizerState};

use crate::data::{corrupt_temporal, SyntheticSample};
use crate::diffusion::{
    denoiser_forward, diffusion_loss, make_schedule, noise_combination, refine_video, resolve_condition, Condition,
    DenoiserDims, DenoiserParams, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::router::{routing_accuracy, routing_loss, LatentTokens, RouterDims};
use crate::tape::{Tape, Var};
use crate::temporal::{temporal_refine, TamParams, TemporalDims};
use crate::tensor::Tensor;
use crate::video::LatentVideo;

/// Name prefix of every denoiser parameter.
pub const DENOISER_PREFIX: &str = "denoiser";
/// Name prefix of every temporal-module parameter.
pub const TAM_PREFIX: &str = "tam";

const INIT_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// `λ_diff·l_diff + λ_route·l_route`.
pub fn total_loss(l_diff: f64, l_route: f64, lambda_diff: f64, lambda_route: f64) -> f64 {
    lambda_diff * l_diff + lambda_route * l_route
}

pub fn is_tam_param(name: &str) -> bool {
    name.starts_with("tam.")
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub denoiser: DenoiserParams,
    pub tam: TamParams,
    pub schedule: NoiseSchedule,
}

impl Model {
    /// Initialises every parameter from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let dims = DenoiserDims {
            router: RouterDims {
                components: config.components,
                local_tokens: config.local_tokens,
                local_dim: config.local_dim,
                latent_dim: config.latent_dim,
                inner_dim: config.inner_dim,
                feature_dim: config.latent_dim,
            },
            frames: config.frames,
            tokens_per_frame: config.tokens_per_frame,
            heads: config.heads,
            blocks: config.blocks,
            timesteps: config.timesteps,
            identity_dim: config.latent_dim,
        };
        let denoiser = DenoiserParams::new(&mut store, DENOISER_PREFIX, dims, config.alpha, &mut rng)?;
        let tam = TamParams::new(
            &mut store,
            TAM_PREFIX,
            TemporalDims {
                latent_dim: config.latent_dim,
                tokens_per_frame: config.tokens_per_frame,
                inner_dim: config.inner_dim,
                layers: config.tam_layers,
                heads: config.heads,
            },
            config.beta,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            denoiser,
            tam,
            schedule: make_schedule(config.timesteps, config.beta_start, config.beta_end)?,
        })
    }

    /// Parameters updated in `mode`.
    pub fn trainable(&self, mode: Mode) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, name, _)| {
                if is_tam_param(name) {
                    mode.trains_tam()
                } else {
                    mode.trains_denoiser()
                }
            })
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Conditioning inputs for a sample's subject.
    pub fn condition_for(&self, sample: &SyntheticSample) -> Result<Condition> {
        Ok(Condition::Subject {
            features: sample.subject.local_features(self.config.local_tokens)?,
            identity: sample.subject.identity_tensor()?,
        })
    }

    pub fn check_sample(&self, sample: &SyntheticSample) -> Result<()> {
        let c = &self.config;
        let v = &sample.latents;
        if (v.frames(), v.tokens_per_frame(), v.dim(), sample.subject.components())
            != (c.frames, c.tokens_per_frame, c.latent_dim, c.components)
        {
            return Err(Error::Contract(format!(
                "sample is {}×{}×{} with {} components, config expects {}×{}×{} with {}",
                v.frames(),
                v.tokens_per_frame(),
                v.dim(),
                sample.subject.components(),
                c.frames,
                c.tokens_per_frame,
                c.latent_dim,
                c.components
            )));
        }
        Ok(())
    }

    /// Refines a whole video with the temporal module.
    pub fn refine(&self, video: &LatentVideo) -> Result<LatentVideo> {
        refine_video(&self.store, &self.tam, video, self.config.chunks)
    }
}

/// Random draws consumed by one sample of a training step, in draw order.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws {
    pub t: usize,
    pub null: bool,
    pub corrupt_seed: u64,
    pub eps: Tensor,
}

impl StepDraws {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, config: &TrainConfig) -> Result<Self> {
        let t = rng.random_range(1..=config.timesteps);
        let null = rng.random::<f64>() < config.null_ratio;
        let corrupt_seed = rng.random::<u64>();
        let eps = Tensor::randn(&[config.latent_tokens(), config.latent_dim], 1.0, rng)?;
        Ok(Self {
            t,
            null,
            corrupt_seed,
            eps,
        })
    }
}

/// Builds `λ_diff·l_diff + λ_route·l_route` on `tape`, reading parameters
/// from `store`. The routing term is dropped when the condition is nulled.
pub fn denoiser_loss(
    tape: &mut Tape,
    store: &ParamStore,
    model: &Model,
    sample: &SyntheticSample,
    draws: &StepDraws,
) -> Result<(Var, Var, Option<Var>)> {
    let cfg = &model.config;
    let z0 = sample.latents.tokens();
    let zt = Tensor::new(
        z0.shape(),
        noise_combination(z0.data(), draws.eps.data(), model.schedule.alpha_bar(draws.t)),
    )?;
    let zt = tape.constant(zt);
    let eps = tape.constant(draws.eps.clone());
    let cond = if draws.null {
        Condition::Null
    } else {
        model.condition_for(sample)?
    };
    let bundle = resolve_condition(tape, store, &model.denoiser, &cond)?;
    let out = denoiser_forward(tape, store, &model.denoiser, zt, draws.t, &bundle)?;
    let l_diff = diffusion_loss(tape, eps, out.eps_hat)?;
    let mut total = tape.scale(l_diff, cfg.lambda_diff)?;
    let l_route = if draws.null {
        None
    } else {
        let l = routing_loss(tape, &out.router, &sample.masks()?)?;
        let weighted = tape.scale(l, cfg.lambda_route)?;
        total = tape.add(total, weighted)?;
        Some(l)
    };
    Ok((total, l_diff, l_route))
}

/// `MSE(temporal_refine(corrupt(z0)), z0)`.
pub fn tam_loss(
    tape: &mut Tape,
    store: &ParamStore,
    model: &Model,
    sample: &SyntheticSample,
    draws: &StepDraws,
) -> Result<Var> {
    let cfg = &model.config;
    let corrupted = corrupt_temporal(&sample.latents, cfg.jitter, draws.corrupt_seed)?;
    let input = tape.constant(corrupted.tokens());
    let z = LatentTokens::new(tape, input, cfg.frames, cfg.tokens_per_frame)?;
    let refined = temporal_refine(tape, store, &model.tam, &z, cfg.chunks)?;
    let target = tape.constant(sample.latents.tokens());
    tape.mse(refined.tokens, target)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l_diff: f64,
    pub l_route: f64,
    pub l_tam: f64,
    /// `λ_diff·l_diff + λ_route·l_route (+ l_tam)` for the active mode.
    pub l_total: f64,
    /// Samples in the batch whose condition was replaced by the null condition.
    pub nulled: usize,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
    pub mode: Mode,
}

impl Trainer {
    pub fn new(config: &TrainConfig, mode: Mode) -> Result<Self> {
        let model = Model::new(config)?;
        Ok(Self {
            optimizer: OptimizerState::new(AdamWConfig {
                lr: config.lr,
                beta1: config.adam_beta1,
                beta2: config.adam_beta2,
                eps: config.adam_eps,
                weight_decay: config.weight_decay,
            }),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            mode,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    /// One optimizer update. Gradients of the batch are averaged. Every
    /// sample consumes the same random draws in every mode.
    pub fn train_step(&mut self, batch: &[&SyntheticSample]) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mode = self.mode;
        let scale = 1.0 / batch.len() as f64;
        self.model.store.zero_grads();
        let mut out = StepLosses::default();
        for sample in batch {
            self.model.check_sample(sample)?;
            let draws = StepDraws::draw(&mut self.rng, &self.model.config)?;
            out.nulled += draws.null as usize;
            if mode.trains_denoiser() {
                let mut tape = Tape::new();
                let (total, l_diff, l_route) =
                    denoiser_loss(&mut tape, &self.model.store, &self.model, sample, &draws)?;
                let scaled = tape.scale(total, scale)?;
                tape.backward_into(scaled, &mut self.model.store)?;
                out.l_diff += scale * tape.value(l_diff).item()?;
                if let Some(l) = l_route {
                    out.l_route += scale * tape.value(l).item()?;
                }
            }
            if mode.trains_tam() {
                let mut tape = Tape::new();
                let l = tam_loss(&mut tape, &self.model.store, &self.model, sample, &draws)?;
                let scaled = tape.scale(l, scale)?;
                tape.backward_into(scaled, &mut self.model.store)?;
                out.l_tam += scale * tape.value(l).item()?;
            }
        }
        let cfg = &self.model.config;
        out.l_total = if mode.trains_denoiser() {
            total_loss(out.l_diff, out.l_route, cfg.lambda_diff, cfg.lambda_route)
        } else {
            0.0
        } + if mode.trains_tam() { out.l_tam } else { 0.0 };
        let selected = self.model.trainable(mode);
        adamw_step(&mut self.model.store, &selected, &mut self.optimizer)?;
        Ok(out)
    }

    /// Draws a batch of `grad_accum` sample indices.
    pub fn draw_batch<'a>(&mut self, dataset: &'a [SyntheticSample]) -> Result<Vec<&'a SyntheticSample>> {
        if dataset.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        Ok((0..self.model.config.grad_accum)
            .map(|_| &dataset[self.rng.random_range(0..dataset.len())])
            .collect())
    }

    /// Runs until the optimizer has taken `config.steps` steps, appending a
    /// metrics row every `log_every` steps (and on the last one) when a path
    /// is given.
    pub fn fit(&mut self, dataset: &[SyntheticSample], metrics: Option<&Path>) -> Result<Vec<(u64, StepLosses)>> {
        let mut log = match metrics {
            Some(path) => Some(MetricsLog::open(path)?),
            None => None,
        };
        let start = Instant::now();
        let mut history = Vec::new();
        let target = self.model.config.steps as u64;
        while self.optimizer.step < target {
            let batch = self.draw_batch(dataset)?;
            let losses = self.train_step(&batch)?;
            let step = self.optimizer.step;
            history.push((step, losses));
            if step.is_multiple_of(self.model.config.log_every as u64) || step == target {
                if let Some(log) = log.as_mut() {
                    log.append(step, &losses, start.elapsed().as_millis())?;
                }
            }
        }
        Ok(history)
    }
}

pub const METRICS_HEADER: &str = "step,l_diff,l_route,l_total,wall_ms";

/// Append-only CSV of training losses.
pub struct MetricsLog {
    file: std::fs::File,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() == 0 {
            writeln!(file, "{METRICS_HEADER}")?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, step: u64, l: &StepLosses, wall_ms: u128) -> Result<()> {
        writeln!(
            self.file,
            "{step},{:?},{:?},{:?},{wall_ms}",
            l.l_diff, l.l_route, l.l_total
        )?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub routing_accuracy: f64,
    pub mean_route_loss: f64,
    pub mean_diff_loss: f64,
    pub temporal_deviation_before: f64,
    pub temporal_deviation_after: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "routing_accuracy,mean_route_loss,mean_diff_loss,temporal_deviation_before,temporal_deviation_after";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{:?},{:?},{:?},{:?},{:?}\n",
            Self::CSV_HEADER,
            self.routing_accuracy,
            self.mean_route_loss,
            self.mean_diff_loss,
            self.temporal_deviation_before,
            self.temporal_deviation_after
        )
    }

    /// `1 − after/before`.
    pub fn temporal_reduction(&self) -> f64 {
        1.0 - self.temporal_deviation_after / self.temporal_deviation_before
    }
}

/// Evaluates routing on clean latents (`t = 0`), the diffusion loss at a
/// seeded random step, and temporal deviation of jittered latents before and
/// after refinement.
pub fn evaluate(model: &Model, dataset: &[SyntheticSample]) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Evaluation("empty dataset".into()));
    }
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(EVAL_STREAM);
    let (mut correct, mut total) = (0usize, 0usize);
    let (mut route, mut diff, mut before, mut after) = (0.0, 0.0, 0.0, 0.0);
    for sample in dataset {
        model.check_sample(sample)?;
        let mut draws = StepDraws::draw(&mut rng, cfg)?;
        draws.null = false;

        let mut tape = Tape::new();
        let z0 = tape.constant(sample.latents.tokens());
        let cond = model.condition_for(sample)?;
        let bundle = resolve_condition(&mut tape, &model.store, &model.denoiser, &cond)?;
        let out = denoiser_forward(&mut tape, &model.store, &model.denoiser, z0, 0, &bundle)?;
        let masks = sample.masks()?;
        let (c, n) = routing_accuracy(tape.value(out.router.weights), &masks);
        correct += c;
        total += n;
        let l = routing_loss(&mut tape, &out.router, &masks)?;
        route += tape.value(l).item()?;

        let mut tape = Tape::new();
        let (_, l_diff, _) = denoiser_loss(&mut tape, &model.store, model, sample, &draws)?;
        diff += tape.value(l_diff).item()?;

        let corrupted = corrupt_temporal(&sample.latents, cfg.jitter, draws.corrupt_seed)?;
        before += corrupted.temporal_deviation();
        after += model.refine(&corrupted)?.temporal_deviation();
    }
    let n = dataset.len() as f64;
    Ok(MetricsReport {
        routing_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        mean_route_loss: route / n,
        mean_diff_loss: diff / n,
        temporal_deviation_before: before / n,
        temporal_deviation_after: after / n,
    })
}
