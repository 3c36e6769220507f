use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of the promptable segmentation transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_chans: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Side length (in tokens) of each attention window; 0 means every
    /// block attends globally.
    pub window_size: usize,
    /// Block `i` (0-based) attends globally when `(i + 1) % global_attn_every == 0`.
    pub global_attn_every: usize,
    pub decoder_dim: usize,
    /// Ratio of image side to low-res mask side.
    pub mask_downscale: usize,
}

impl Default for ModelConfig {
    /// 64×64 input, 16×16 token grid, 8 blocks with global attention at
    /// blocks 2, 4, 6, 8 (1-based) and 4×4 windows elsewhere.
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 4,
            in_chans: 1,
            embed_dim: 64,
            depth: 8,
            num_heads: 4,
            mlp_ratio: 4,
            window_size: 4,
            global_attn_every: 2,
            decoder_dim: 64,
            mask_downscale: 4,
        }
    }
}

impl ModelConfig {
    /// Smaller geometry used by the transfer experiment and the tests: 32×32
    /// input, 8×8 token grid, 4 blocks (global at 2 and 4), 16×16 mask grid.
    pub fn compact() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            in_chans: 1,
            embed_dim: 32,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            window_size: 4,
            global_attn_every: 2,
            decoder_dim: 32,
            mask_downscale: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.in_chans == 0 {
            return bad("image_size, patch_size and in_chans must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !self.decoder_dim.is_multiple_of(self.num_heads) || !self.decoder_dim.is_multiple_of(4) {
            return bad(format!(
                "decoder_dim {} must be divisible by num_heads {} and by 4",
                self.decoder_dim, self.num_heads
            ));
        }
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.global_attn_every == 0 || self.global_attn_every > self.depth {
            return bad(format!(
                "global_attn_every {} outside [1, {}]",
                self.global_attn_every, self.depth
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1".into());
        }
        let side = self.grid_side();
        if self.window_size > 0 && !side.is_multiple_of(self.window_size) {
            return bad(format!(
                "token grid side {side} not divisible by window_size {}",
                self.window_size
            ));
        }
        if self.mask_downscale == 0 || !self.image_size.is_multiple_of(self.mask_downscale) {
            return bad(format!(
                "image_size {} not divisible by mask_downscale {}",
                self.image_size, self.mask_downscale
            ));
        }
        let mask = self.mask_side();
        if mask < side || !mask.is_multiple_of(side) {
            return bad(format!(
                "mask grid side {mask} must be a positive multiple of token grid side {side}"
            ));
        }
        Ok(())
    }

    /// Tokens per side of the encoder grid.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn mask_side(&self) -> usize {
        self.image_size / self.mask_downscale
    }

    /// Upscaling factor from token grid to mask grid.
    pub fn mask_upscale(&self) -> usize {
        self.mask_side() / self.grid_side()
    }

    /// Channels of the per-pixel embeddings the mask token is dotted with.
    pub fn mask_embed_dim(&self) -> usize {
        self.decoder_dim / 4
    }

    pub fn is_global_block(&self, block: usize) -> bool {
        self.window_size == 0 || (block + 1).is_multiple_of(self.global_attn_every)
    }

    /// Effective window side for a block; global blocks use the full grid.
    pub fn block_window(&self, block: usize) -> usize {
        if self.is_global_block(block) {
            self.grid_side()
        } else {
            self.window_size
        }
    }
}
