use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, KEY_VOCAB, NUM_SLOTS};
use crate::error::ModelError;

/// Architecture settings. Field names follow the usual hyperparameter table
/// layout (backbone block, action-decoder block).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub frame_resolution: usize,
    pub image_tokens: usize,
    /// History length in timesteps for training windows.
    pub history_length: usize,
    pub instruction_vocab: usize,
    pub key_vocab: usize,
    pub mouse_bins_x: usize,
    pub mouse_bins_y: usize,
    pub backbone: BackboneConfig,
    pub action_decoder: DecoderConfig,
    pub encoder_channels: Vec<usize>,
    pub use_qk_norm: bool,
    pub z_loss_coeff: f64,
    pub rope_base: f64,
    /// Replace the image encoder output with a constant (for probes).
    #[serde(default)]
    pub image_blind: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frame_resolution: 64,
            image_tokens: 1,
            history_length: 32,
            instruction_vocab: 8,
            key_vocab: KEY_VOCAB,
            mouse_bins_x: 21,
            mouse_bins_y: 21,
            backbone: BackboneConfig { num_layers: 2, hidden_dim: 128, query_heads: 4, kv_heads: 4, mlp_ratio: 4 },
            action_decoder: DecoderConfig { num_layers: 3, query_heads: 8, kv_heads: 8 },
            encoder_channels: vec![16, 32, 32, 32],
            use_qk_norm: true,
            z_loss_coeff: 1e-4,
            rope_base: 10_000.0,
            image_blind: false,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.backbone.hidden_dim
    }

    /// Class counts of the 8 action slots.
    pub fn slot_vocabs(&self) -> [usize; NUM_SLOTS] {
        let k = self.key_vocab;
        [k, k, k, k, self.mouse_bins_x, self.mouse_bins_y, 2, 2]
    }

    /// `N_i + N_a + 3`.
    pub fn tokens_per_step(&self) -> usize {
        self.image_tokens + NUM_SLOTS + 3
    }

    /// Spatial size after the strided encoder stack.
    pub fn encoder_out_side(&self) -> usize {
        self.encoder_channels.iter().fold(self.frame_resolution, |s, _| (s + 2 - 3) / 2 + 1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        let b = &self.backbone;
        let d = &self.action_decoder;
        if !(1..=4).contains(&self.image_tokens) {
            return err(format!("image_tokens must be in 1..=4, got {}", self.image_tokens));
        }
        if b.num_layers == 0 || d.num_layers == 0 || b.hidden_dim == 0 {
            return err("layer counts and hidden_dim must be positive".into());
        }
        for (what, heads, kv) in [("backbone", b.query_heads, b.kv_heads), ("action decoder", d.query_heads, d.kv_heads)] {
            if heads == 0 || kv == 0 || b.hidden_dim % heads != 0 || heads % kv != 0 {
                return err(format!("{what}: hidden_dim {} / heads {heads} / kv_heads {kv} do not divide", b.hidden_dim));
            }
            if (b.hidden_dim / heads) % 2 != 0 {
                return err(format!("{what}: head dimension must be even for rotary embeddings"));
            }
        }
        if self.frame_resolution == 0 || self.encoder_channels.is_empty() {
            return err("frame_resolution and encoder_channels must be nonempty".into());
        }
        if self.key_vocab < 2 || self.mouse_bins_x == 0 || self.mouse_bins_y == 0 || self.instruction_vocab == 0 {
            return err("vocabulary sizes must be positive".into());
        }
        if self.history_length == 0 || b.mlp_ratio == 0 {
            return err("history_length and mlp_ratio must be positive".into());
        }
        if !(self.z_loss_coeff >= 0.0) || !(self.rope_base > 1.0) {
            return err("z_loss_coeff must be >= 0 and rope_base > 1".into());
        }
        Ok(())
    }
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Training window in timesteps; defaults to the model's history length.
    pub window: Option<usize>,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub eval_windows: usize,
    pub test_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            window: None,
            learning_rate: 1e-4,
            warmup_steps: 0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 1.0,
            eval_every: 100,
            eval_windows: 16,
            test_fraction: 0.1,
            seed: 0,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 || self.eval_every == 0 || self.window == Some(0) {
            return Err(ModelError::Config("batch_size, eval_every and window must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(ModelError::Config("learning rate must be >= 0 and betas in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(self.grad_clip >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(ModelError::Config("test_fraction in [0,1), grad_clip and weight_decay >= 0".into()));
        }
        if let Some(a) = &self.augment {
            a.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        }
        Ok(())
    }
}
