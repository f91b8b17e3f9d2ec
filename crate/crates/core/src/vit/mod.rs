//! Patch embedding, ViT encoders and the narrow ViT predictor.

mod encoder;
mod layers;
mod predictor;

pub use encoder::{EncodeOutput, Encoder, Visibility};
pub use layers::{Block, LayerNorm, Linear, Module};
pub(crate) use layers::join;
pub use predictor::Predictor;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub predictor_depth: usize,
    pub predictor_dim: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VitConfig {
    /// Default model for CPU-scale runs: an 8x8 patch grid.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            depth: 6,
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            predictor_depth: 3,
            predictor_dim: 32,
        }
    }

    /// Smallest useful model; used by gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            predictor_depth: 1,
            predictor_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if !self.predictor_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "predictor_dim {} is not divisible by heads {}",
                self.predictor_dim, self.heads
            ));
        }
        if self.depth == 0 || self.predictor_depth == 0 || self.channels == 0 {
            return bad("depth, predictor_depth and channels must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) {
            return bad(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        Ok(())
    }

    /// Patches per side (h = w).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden(&self, dim: usize) -> usize {
        ((dim as f64) * self.mlp_ratio).round() as usize
    }
}

/// Where a token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenPos {
    Cls,
    /// Row-major patch index.
    Cell(usize),
}

impl TokenPos {
    /// Row in a `[1 + h*w, D]` positional table (CLS first).
    pub fn table_row(self) -> usize {
        match self {
            TokenPos::Cls => 0,
            TokenPos::Cell(c) => c + 1,
        }
    }
}

/// Tokens plus the grid position each row came from.
#[derive(Debug, Clone)]
pub struct TokenSequence<F: Float> {
    pub tokens: Tensor<F>,
    pub positions: Vec<TokenPos>,
    pub grid: (usize, usize),
}

impl<F: Float> TokenSequence<F> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Patch cells covered, in token order.
    pub fn cells(&self) -> Vec<usize> {
        self.positions
            .iter()
            .filter_map(|p| match p {
                TokenPos::Cell(c) => Some(*c),
                TokenPos::Cls => None,
            })
            .collect()
    }

    pub(crate) fn check(&self) -> Result<()> {
        let (h, w) = self.grid;
        if self.tokens.rank() != 2 || self.tokens.shape()[0] != self.positions.len() {
            return Err(Error::shape(
                "token_sequence",
                format!("{} positions for tokens {:?}", self.positions.len(), self.tokens.shape()),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.positions {
            if let TokenPos::Cell(c) = p {
                if *c >= h * w {
                    return Err(Error::invalid(format!("cell {c} outside {h}x{w} grid")));
                }
            }
            if !seen.insert(*p) {
                return Err(Error::invalid(format!("duplicate token position {p:?}")));
            }
        }
        Ok(())
    }
}

/// Rearrange a `[C, H, W]` image into `[h*w, C*p*p]` row-major patches.
pub fn extract_patches<F: Float>(image: &[F], cfg: &VitConfig) -> Vec<F> {
    let (c, s, p, g) = (cfg.channels, cfg.image_size, cfg.patch_size, cfg.grid());
    let mut out = Vec::with_capacity(g * g * cfg.patch_dim());
    for gr in 0..g {
        for gc in 0..g {
            for ch in 0..c {
                for y in 0..p {
                    let row = ch * s * s + (gr * p + y) * s + gc * p;
                    out.extend_from_slice(&image[row..row + p]);
                }
            }
        }
    }
    out
}
