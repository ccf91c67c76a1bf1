use serde::{Deserialize, Serialize};

use crate::losses::LossWeights;
use crate::model::ModelConfig;

use super::{AdamHyper, PipelineError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

/// Flat key-value training configuration. Every key is optional in the
/// file; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub seed: u64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub min_views: usize,
    pub max_views: usize,
    /// Fraction of the run during which albedo uses plain MSE.
    pub warmup_frac: f64,
    /// Rescale the joint gradient to at most this L2 norm; 0 disables.
    pub clip_grad_norm: f64,
    pub lambda_anchor: f64,
    pub w_albedo: f64,
    pub w_metallic: f64,
    pub w_roughness: f64,
    pub w_normal: f64,
    pub w_shading: f64,
    /// Keep patch embedding and attention blocks fixed.
    pub freeze_encoder: bool,
    /// Repeat the only view of single-view scenes to fill a batch.
    pub replicate_single_view: bool,
    /// Serial data loading; otherwise the next batch is prepared on a
    /// second thread.
    pub deterministic: bool,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub head_channels: [usize; 4],
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let h = AdamHyper::default();
        Self {
            stage: Stage::Pretrain,
            seed: 0,
            lr: 5e-5,
            lr_schedule: LrSchedule::Constant,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            epochs: 1,
            steps_per_epoch: 300,
            min_views: 2,
            max_views: 12,
            warmup_frac: 0.1,
            clip_grad_norm: 0.0,
            lambda_anchor: 0.1,
            w_albedo: 1.0,
            w_metallic: 1.0,
            w_roughness: 1.0,
            w_normal: 1.0,
            w_shading: 1.0,
            freeze_encoder: false,
            replicate_single_view: false,
            deterministic: false,
            patch_size: m.patch_size,
            embed_dim: m.embed_dim,
            num_blocks: m.num_blocks,
            num_heads: m.num_heads,
            mlp_ratio: m.mlp_ratio,
            head_channels: m.head_channels,
            image_height: m.image_height,
            image_width: m.image_width,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(1..=12).contains(&self.min_views) || !(self.min_views..=12).contains(&self.max_views) {
            return bad(format!(
                "views per batch {}..{} must satisfy 1 <= min <= max <= 12",
                self.min_views, self.max_views
            ));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate {} must be finite and nonnegative", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam needs betas in [0, 1) and eps > 0".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]".into());
        }
        if !(self.clip_grad_norm >= 0.0) || !self.clip_grad_norm.is_finite() {
            return bad("clip_grad_norm must be finite and nonnegative".into());
        }
        if !(self.lambda_anchor >= 0.0) {
            return bad("lambda_anchor must be nonnegative".into());
        }
        self.loss_weights().validate().map_err(PipelineError::Config)?;
        self.model_config().validate()?;
        Ok(())
    }

    /// Learning rate for global step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = step as f64 / self.total_steps().max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Steps that use plain MSE for albedo.
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.total_steps() as f64).ceil() as usize
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            albedo: self.w_albedo,
            metallic: self.w_metallic,
            roughness: self.w_roughness,
            normal: self.w_normal,
            shading: self.w_shading,
            anchor: self.lambda_anchor,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            mlp_ratio: self.mlp_ratio,
            head_channels: self.head_channels,
            image_height: self.image_height,
            image_width: self.image_width,
        }
    }

    pub fn set_model_config(&mut self, m: &ModelConfig) {
        self.patch_size = m.patch_size;
        self.embed_dim = m.embed_dim;
        self.num_blocks = m.num_blocks;
        self.num_heads = m.num_heads;
        self.mlp_ratio = m.mlp_ratio;
        self.head_channels = m.head_channels;
        self.image_height = m.image_height;
        self.image_width = m.image_width;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(TrainConfig::from_toml("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = TrainConfig::default();
        c.stage = Stage::Finetune;
        c.lr = 2e-3;
        c.min_views = 3;
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml("max_views = 13").is_err());
        assert!(TrainConfig::from_toml("min_views = 0").is_err());
        assert!(TrainConfig::from_toml("lr = -1.0").is_err());
        assert!(TrainConfig::from_toml("unknown_key = 1").is_err());
        assert!(TrainConfig::from_toml("num_blocks = 3").is_err());
    }

    #[test]
    fn warmup_is_a_fraction_of_all_steps() {
        let c = TrainConfig {
            epochs: 2,
            steps_per_epoch: 50,
            ..TrainConfig::default()
        };
        assert_eq!(c.warmup_steps(), 10);
    }
}
