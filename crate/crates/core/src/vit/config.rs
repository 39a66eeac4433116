use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyViTConfig {
    pub input_res: usize,
    pub patch_size: usize,
    pub dim: usize,
    /// Number of transformer blocks, `N`.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub embed_dim_out: usize,
}

impl Default for TinyViTConfig {
    fn default() -> Self {
        TinyViTConfig {
            input_res: 64,
            patch_size: 8,
            dim: 32,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
            embed_dim_out: 32,
        }
    }
}

impl TinyViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation(m));
        if self.input_res == 0 || self.patch_size == 0 || self.dim == 0 || self.heads == 0 {
            return bad("config sizes must be positive".into());
        }
        if !self.input_res.is_multiple_of(self.patch_size) {
            return bad(format!(
                "input_res {} not divisible by patch_size {}",
                self.input_res, self.patch_size
            ));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio));
        }
        if self.embed_dim_out == 0 {
            return bad("embed_dim_out must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_res / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Token banks: one after patchification plus one per block.
    pub fn num_banks(&self) -> usize {
        self.depth + 1
    }
}
