//! Component-routed latent video diffusion with chunk-wise temporal refinement.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`kernels`], [`gradcheck`]: dense `f64` tensors,
//!   reverse-mode differentiation and finite-difference verification.
//! * [`router`]: per-token softmax routing over facial components and the
//!   weighted cross-attention enhancement of latent tokens.
//! * [`temporal`]: chunk-wise autoregressive bias prediction over frames.
//! * [`diffusion`]: noise schedule, denoiser, DDIM sampling with guidance.
//! * [`data`]: deterministic synthetic subjects, videos and dataset files.
//! * [`train`]: AdamW, configuration, checkpoints, the training loop and evaluation.

#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod router;
pub mod tape;
pub mod temporal;
pub mod tensor;
pub mod train;
pub mod video;

pub use error::{Error, Result};
pub use kernels::AttentionMask;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use video::LatentVideo;
