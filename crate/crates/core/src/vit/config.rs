use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the toy backbone.
///
/// Images are `image_channels × side × side` with
/// `side = patch_grid * patch_size`; the token sequence is one CLS token
/// followed by `patch_grid²` patch tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub patch_grid: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub image_channels: usize,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            num_layers: 8,
            embed_dim: 64,
            num_heads: 4,
            patch_grid: 4,
            patch_size: 4,
            mlp_ratio: 4,
            image_channels: 3,
            ln_eps: 1e-10,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::Config(format!(
                "num_layers must be at least 2, got {}",
                self.num_layers
            )));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.patch_grid == 0 || self.patch_size == 0 || self.image_channels == 0 {
            return Err(Error::Config("patch_grid, patch_size and image_channels must be positive".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    /// Instance sequence length, CLS included.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.image_channels * self.patch_size * self.patch_size
    }

    pub fn image_side(&self) -> usize {
        self.patch_grid * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}
