use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Operator order of the prompt gate at the end of multi-scale fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GateOrder {
    /// `LN(Linear(ReLU(Linear(P') * P)))`
    #[default]
    ProductThenRelu,
    /// `LN(Linear(ReLU(Linear(P')) * P))`
    ReluThenProduct,
}

/// Architecture hyper-parameters. Everything is width-agnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub queries: usize,
    pub decoder_layers: usize,
    /// Sampling points per scale and head in every deformable attention.
    pub points: usize,
    pub ffn_mult: usize,
    pub visual_prompt_layers: usize,
    pub image_size: usize,
    pub gate_order: GateOrder,
    /// Run the X-MHA fusions of the progressive pyramid.
    pub psf: bool,
    /// Run the full-scale fusion and prompt gate.
    pub mfg: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 32, heads: 2, queries: 20, decoder_layers: 2, points: 4, ffn_mult: 2, visual_prompt_layers: 3, image_size: 64, gate_order: GateOrder::default(), psf: true, mfg: true }
    }
}

impl ModelConfig {
    /// Small widths for finite-difference checks.
    pub fn compact() -> Self {
        Self { dim: 8, queries: 6, decoder_layers: 2, points: 2, ffn_mult: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if self.queries == 0 || self.decoder_layers == 0 || self.points == 0 || self.visual_prompt_layers == 0 {
            return Err(Error::Config("queries, decoder_layers, points and visual_prompt_layers must be positive".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(64) {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of 64", self.image_size)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}
