//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Joint,
    TamOnly,
    RouterOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::TamOnly => "tam-only",
            Mode::RouterOnly => "router-only",
        }
    }

    pub fn trains_denoiser(self) -> bool {
        matches!(self, Mode::Joint | Mode::RouterOnly)
    }

    pub fn trains_tam(self) -> bool {
        matches!(self, Mode::Joint | Mode::TamOnly)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Mode::Joint),
            "tam-only" => Ok(Mode::TamOnly),
            "router-only" => Ok(Mode::RouterOnly),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: String,
    pub mode: Mode,
    pub lambda_diff: f64,
    pub lambda_route: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Samples whose gradients are summed (averaged) per optimizer step.
    pub grad_accum: usize,
    pub null_ratio: f64,
    /// Spatial enhancement scale.
    pub alpha: f64,
    /// Temporal bias scale.
    pub beta: f64,
    /// `K`
    pub chunks: usize,
    /// `T`
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// `M`
    pub components: usize,
    /// `L`
    pub local_tokens: usize,
    /// `D`
    pub local_dim: usize,
    /// `D'`
    pub latent_dim: usize,
    /// `D''`
    pub inner_dim: usize,
    /// `N`
    pub tam_layers: usize,
    /// `H`
    pub heads: usize,
    /// `B`
    pub blocks: usize,
    /// `F`
    pub frames: usize,
    /// `S`
    pub tokens_per_frame: usize,
    pub seed: u64,
    pub cfg_scale: f64,
    /// Per-frame offset scale used to corrupt temporal-refinement inputs.
    pub jitter: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small profile that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            mode: Mode::Joint,
            lambda_diff: 1.0,
            lambda_route: 1.0,
            lr: 5e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            steps: 2000,
            grad_accum: 1,
            null_ratio: 0.1,
            alpha: 1.0,
            beta: 0.2,
            chunks: 4,
            timesteps: 20,
            beta_start: 1e-4,
            beta_end: 0.02,
            components: 4,
            local_tokens: 8,
            local_dim: 16,
            latent_dim: 32,
            inner_dim: 16,
            tam_layers: 2,
            heads: 2,
            blocks: 2,
            frames: 8,
            tokens_per_frame: 16,
            seed: 0,
            cfg_scale: 6.0,
            jitter: 0.1,
            log_every: 10,
        }
    }

    /// Full-scale values for documentation and shape checks. `L' = F·S =
    /// 17750` has a single factor of two, so no frame count is divisible by
    /// `K = 4` and [`TrainConfig::validate`] rejects this profile.
    pub fn paper() -> Self {
        Self {
            profile: "paper".into(),
            lr: 3e-6,
            steps: 10_000,
            null_ratio: 0.1,
            alpha: 1.0,
            beta: 0.2,
            chunks: 4,
            timesteps: 50,
            components: 6,
            local_tokens: 32,
            local_dim: 2048,
            latent_dim: 3072,
            inner_dim: 2048,
            tam_layers: 6,
            heads: 24,
            blocks: 1,
            frames: 10,
            tokens_per_frame: 1775,
            cfg_scale: 6.0,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }

    /// Token count `L' = F·S`.
    pub fn latent_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    pub fn validate(&self) -> Result<()> {
        Self::profile(&self.profile)?;
        let positive = [
            ("steps", self.steps),
            ("grad_accum", self.grad_accum),
            ("chunks", self.chunks),
            ("timesteps", self.timesteps),
            ("local_tokens", self.local_tokens),
            ("local_dim", self.local_dim),
            ("latent_dim", self.latent_dim),
            ("inner_dim", self.inner_dim),
            ("tam_layers", self.tam_layers),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("frames", self.frames),
            ("tokens_per_frame", self.tokens_per_frame),
            ("log_every", self.log_every),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        let finite = [
            ("lambda_diff", self.lambda_diff),
            ("lambda_route", self.lambda_route),
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("cfg_scale", self.cfg_scale),
            ("jitter", self.jitter),
        ];
        if let Some((k, v)) = finite.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("{k} must be finite and ≥ 0, got {v}")));
        }
        if self.lr == 0.0 || self.adam_eps == 0.0 {
            return Err(Error::Config("lr and adam_eps must be positive".into()));
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.null_ratio) {
            return Err(Error::Config(format!(
                "null_ratio must lie in [0, 1], got {}",
                self.null_ratio
            )));
        }
        if self.components < 2 {
            return Err(Error::DegenerateRouting(self.components));
        }
        if self.tokens_per_frame < self.components {
            return Err(Error::Layout {
                tokens: self.tokens_per_frame,
                components: self.components,
            });
        }
        if !self.latent_dim.is_multiple_of(self.heads) || !(self.latent_dim / self.heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "latent_dim {} must split into {} heads of even width",
                self.latent_dim, self.heads
            )));
        }
        if !self.frames.is_multiple_of(self.chunks) {
            return Err(Error::Chunking {
                frames: self.frames,
                chunks: self.chunks,
            });
        }
        crate::diffusion::make_schedule(self.timesteps, self.beta_start, self.beta_end)?;
        Ok(())
    }

    /// Serialises every key; [`TrainConfig::parse`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("profile", self.profile.clone()),
            ("mode", self.mode.as_str().into()),
            ("lambda_diff", format!("{:?}", self.lambda_diff)),
            ("lambda_route", format!("{:?}", self.lambda_route)),
            ("lr", format!("{:?}", self.lr)),
            ("adam_beta1", format!("{:?}", self.adam_beta1)),
            ("adam_beta2", format!("{:?}", self.adam_beta2)),
            ("adam_eps", format!("{:?}", self.adam_eps)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("steps", self.steps.to_string()),
            ("grad_accum", self.grad_accum.to_string()),
            ("null_ratio", format!("{:?}", self.null_ratio)),
            ("alpha", format!("{:?}", self.alpha)),
            ("beta", format!("{:?}", self.beta)),
            ("chunks", self.chunks.to_string()),
            ("timesteps", self.timesteps.to_string()),
            ("beta_start", format!("{:?}", self.beta_start)),
            ("beta_end", format!("{:?}", self.beta_end)),
            ("components", self.components.to_string()),
            ("local_tokens", self.local_tokens.to_string()),
            ("local_dim", self.local_dim.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("inner_dim", self.inner_dim.to_string()),
            ("tam_layers", self.tam_layers.to_string()),
            ("heads", self.heads.to_string()),
            ("blocks", self.blocks.to_string()),
            ("frames", self.frames.to_string()),
            ("tokens_per_frame", self.tokens_per_frame.to_string()),
            ("seed", self.seed.to_string()),
            ("cfg_scale", format!("{:?}", self.cfg_scale)),
            ("jitter", format!("{:?}", self.jitter)),
            ("log_every", self.log_every.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "profile" => self.profile = value.to_string(),
            "mode" => self.mode = value.parse()?,
            "lambda_diff" => self.lambda_diff = num(key, value)?,
            "lambda_route" => self.lambda_route = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "grad_accum" => self.grad_accum = num(key, value)?,
            "null_ratio" => self.null_ratio = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "chunks" => self.chunks = num(key, value)?,
            "timesteps" => self.timesteps = num(key, value)?,
            "beta_start" => self.beta_start = num(key, value)?,
            "beta_end" => self.beta_end = num(key, value)?,
            "components" => self.components = num(key, value)?,
            "local_tokens" => self.local_tokens = num(key, value)?,
            "local_dim" => self.local_dim = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "inner_dim" => self.inner_dim = num(key, value)?,
            "tam_layers" => self.tam_layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "tokens_per_frame" => self.tokens_per_frame = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "cfg_scale" => self.cfg_scale = num(key, value)?,
            "jitter" => self.jitter = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. A `profile` line
    /// selects the defaults the remaining keys override. Does not validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if pairs.iter().any(|(seen, _)| *seen == k) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            pairs.push((k, v));
        }
        let mut cfg = match pairs.iter().find(|(k, _)| *k == "profile") {
            Some((_, p)) => Self::profile(p)?,
            None => Self::desk(),
        };
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}
