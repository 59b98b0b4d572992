//! Latent video container (`F` frames × `S` tokens per frame × `D'` channels).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    data: Tensor,
}

impl LatentVideo {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Shape {
                shape: data.shape().to_vec(),
                reason: "latent video must be F×S×D'".into(),
            });
        }
        Ok(Self {
            data: data.with_requires_grad(false),
        })
    }

    pub fn zeros(frames: usize, tokens_per_frame: usize, dim: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[frames, tokens_per_frame, dim])?)
    }

    /// Reinterprets an `(F·S)×D'` token matrix as a video.
    pub fn from_tokens(tokens: &Tensor, frames: usize, tokens_per_frame: usize) -> Result<Self> {
        let (rows, dim) = tokens.matrix_dims();
        if rows != frames * tokens_per_frame {
            return Err(Error::Dimension {
                op: "LatentVideo::from_tokens",
                lhs: tokens.shape().to_vec(),
                rhs: vec![frames, tokens_per_frame],
            });
        }
        Self::new(tokens.reshape(&[frames, tokens_per_frame, dim])?)
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn data(&self) -> &[f64] {
        self.data.data()
    }

    /// `(F·S)×D'` view.
    pub fn tokens(&self) -> Tensor {
        self.data
            .reshape(&[self.frames() * self.tokens_per_frame(), self.dim()])
            .expect("same element count")
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.tokens_per_frame() * self.dim();
        &self.data.data()[f * n..(f + 1) * n]
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.data.bit_eq(&other.data)
    }

    /// Mean Euclidean distance between consecutive frames.
    pub fn temporal_deviation(&self) -> f64 {
        let f = self.frames();
        if f < 2 {
            return 0.0;
        }
        let total: f64 = (0..f - 1)
            .map(|i| {
                self.frame(i)
                    .iter()
                    .zip(self.frame(i + 1))
                    .map(|(a, b)| (b - a) * (b - a))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        total / (f - 1) as f64
    }
}
