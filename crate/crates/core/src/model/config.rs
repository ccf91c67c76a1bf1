use serde::{Deserialize, Serialize};

use super::ModelError;

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Total attention blocks; alternates frame-wise / global, starting
    /// frame-wise.
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Fusion channels at full, 1/2, 1/4 and 1/8 resolution.
    pub head_channels: [usize; 4],
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 4,
            head_channels: [16, 16, 32, 32],
            image_height: 64,
            image_width: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0 {
            return bad("patch_size, embed_dim and num_heads must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_blocks == 0 || self.num_blocks % 2 != 0 {
            return bad(format!("num_blocks {} must be even and > 0", self.num_blocks));
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return bad(format!(
                "image {}x{} not divisible by patch {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.image_height % 8 != 0 || self.image_width % 8 != 0 {
            return bad("image extents must be multiples of 8 (four-level pyramid)".into());
        }
        if self.head_channels.iter().any(|&c| c == 0) || self.mlp_ratio == 0 {
            return bad("head_channels and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn tokens_per_view(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Block indices whose outputs feed the dense head, shallow to deep.
    pub fn tap_blocks(&self) -> [usize; 4] {
        let l = self.num_blocks;
        std::array::from_fn(|k| ((k + 1) * l).div_ceil(4) - 1)
    }
}
