use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("layer norm needs at least 2 features per row, got {0}")]
    DegenerateRow(usize),
    #[error("attention query row {row} has every key blocked")]
    AllBlocked { row: usize },
    #[error("rotary embedding needs an even channel count, got {0}")]
    ChannelParity(usize),
    #[error("expected a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    Determinism { first: f64, second: f64 },
    #[error("expected {expected} components, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("projection spaces disagree: local projection has {local} columns, latent projection has {latent}")]
    ProjectionSpace { local: usize, latent: usize },
    #[error("routing needs at least 2 components, got {0}")]
    DegenerateRouting(usize),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("token {token} is assigned to more than one component")]
    MaskConsistency { token: usize },
    #[error("cannot split {frames} frames into {chunks} equal chunks")]
    Chunking { frames: usize, chunks: usize },
    #[error("frame indices must be non-decreasing (token {token})")]
    Ordering { token: usize },
    #[error("chunk {0} has no conditioning frame")]
    TeacherForcing(usize),
    #[error("invalid noise schedule: {0}")]
    Schedule(String),
    #[error("step {t} outside of [{lo}, {hi}]")]
    Step { t: usize, lo: usize, hi: usize },
    #[error("DDIM target step {t_prev} must precede {t}")]
    StepOrder { t: usize, t_prev: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("layout needs at least {components} tokens per frame, got {tokens}")]
    Layout { tokens: usize, components: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt file: {0}")]
    Corruption(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
