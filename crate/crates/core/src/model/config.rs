use serde::{Deserialize, Serialize};

use crate::data::Channel;
use crate::embedding::PatchConfig;
use crate::error::{config_err, Result};

/// Architecture of the joint encoder / per-signal decoder network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Signals embedded and reconstructed, in [`Channel`] order.
    pub channels: Vec<Channel>,
    pub patch: PatchConfig,
    pub model_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    /// FFN hidden width as a multiple of the block width.
    pub ffn_mult: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub type_embedding: bool,
    /// When false, each decoder's first attention layer attends over its own
    /// merged sequence instead of the joint latent.
    pub cross_attention: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            channels: Channel::ALL.to_vec(),
            patch: PatchConfig::default(),
            model_dim: 64,
            encoder_depth: 2,
            encoder_heads: 4,
            ffn_mult: 4,
            decoder_dim: 32,
            decoder_depth: 2,
            decoder_heads: 2,
            type_embedding: true,
            cross_attention: true,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            model_dim: 256,
            encoder_depth: 12,
            encoder_heads: 8,
            decoder_dim: 128,
            decoder_depth: 12,
            decoder_heads: 4,
            ..Self::desk()
        }
    }

    /// Tiny network over 0.2 s records split into four 5-sample patches.
    pub fn toy() -> Self {
        ModelConfig {
            patch: PatchConfig {
                fs_hz: 100.0,
                patch_seconds: 0.05,
                sample_seconds: 0.2,
            },
            model_dim: 8,
            encoder_depth: 1,
            encoder_heads: 2,
            ffn_mult: 2,
            decoder_dim: 4,
            decoder_depth: 1,
            decoder_heads: 2,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "toy" => Ok(Self::toy()),
            other => Err(config_err!("unknown preset '{other}' (expected desk, paper or toy)")),
        }
    }

    /// One-signal model without type embedding or cross-attention.
    pub fn single_signal(&self, c: Channel) -> Self {
        ModelConfig {
            channels: vec![c],
            type_embedding: false,
            cross_attention: false,
            ..self.clone()
        }
    }

    pub fn num_patches(&self) -> Result<usize> {
        self.patch.num_patches()
    }

    pub fn patch_len(&self) -> Result<usize> {
        self.patch.patch_len()
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.num_patches()?;
        if self.channels.is_empty() {
            return Err(config_err!("model needs at least one signal"));
        }
        let mut sorted = self.channels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.channels {
            return Err(config_err!("model signals must be distinct and in ECG, PPG, ABP order"));
        }
        for (name, dim, heads) in [
            ("model_dim", self.model_dim, self.encoder_heads),
            ("decoder_dim", self.decoder_dim, self.decoder_heads),
        ] {
            if dim == 0 || dim % 2 != 0 {
                return Err(config_err!("{name} must be a positive even number, got {dim}"));
            }
            if heads == 0 || dim % heads != 0 {
                return Err(config_err!("{name} {dim} is not divisible by {heads} heads"));
            }
        }
        if self.decoder_dim > self.model_dim {
            return Err(config_err!(
                "decoder_dim {} exceeds model_dim {}",
                self.decoder_dim,
                self.model_dim
            ));
        }
        if self.ffn_mult == 0 {
            return Err(config_err!("ffn_mult must be positive"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(config_err!("layer_norm_eps must be positive"));
        }
        Ok(())
    }
}
