use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hub::HubDims;
use crate::routing::GatingKind;

/// Sizes of the encoder, decoder and expert plumbing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub pixels: (usize, usize),
    pub grid: (usize, usize),
    pub base_channels: usize,
    pub detail_channels: usize,
    /// Learned absolute position embedding in the encoder.
    pub positional: bool,
    pub conv_channels: usize,
    pub conv_depth: usize,
    pub gating: GatingKind,
    /// See [`HubDims::token_gain`].
    pub expert_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            mlp_ratio: 2,
            enc_blocks: 2,
            dec_blocks: 2,
            vocab: 64,
            max_len: 32,
            pixels: (32, 32),
            grid: (8, 8),
            base_channels: 3,
            detail_channels: 4,
            positional: true,
            conv_channels: 8,
            conv_depth: 2,
            gating: GatingKind::Linear,
            expert_gain: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn patch(&self) -> (usize, usize) {
        (self.pixels.0 / self.grid.0, self.pixels.1 / self.grid.1)
    }

    pub fn channels(&self) -> usize {
        self.base_channels + self.detail_channels
    }

    pub fn patch_dim(&self) -> usize {
        let (ph, pw) = self.patch();
        ph * pw * self.channels()
    }

    pub fn adaptor_width(&self) -> usize {
        (self.d_model / 4).max(1)
    }

    pub fn hub_dims(&self) -> HubDims {
        HubDims {
            d_lang: self.d_model,
            d_hidden: self.d_model,
            conv_channels: self.conv_channels,
            conv_depth: self.conv_depth,
            base_grid: self.grid,
            pixels: self.pixels,
            token_gain: self.expert_gain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 || self.pixels.0 % self.grid.0 != 0 || self.pixels.1 % self.grid.1 != 0 {
            return bad(format!("pixels {:?} must tile into grid {:?}", self.pixels, self.grid));
        }
        if self.vocab < 4 || self.max_len < 2 || self.mlp_ratio == 0 || self.base_channels == 0 {
            return bad("vocabulary, length, mlp ratio and channels must be positive".into());
        }
        if !(self.expert_gain > 0.0 && self.expert_gain.is_finite()) {
            return bad(format!("expert_gain {} must be positive and finite", self.expert_gain));
        }
        Ok(())
    }
}
