//! Trainable parameters and the forward pass.

mod checkpoint;
mod forward;
mod params;

use serde::{Deserialize, Serialize};

use crate::dataset::Modality;
use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use forward::{
    forward, forward_on_tape, fuse, lift_to_users, propagate_ii, propagate_ui, purify, score, ForwardOutput,
    ForwardVars, GraphContext, ModalityInput,
};
pub use params::{init_params, AttentionParams, ModalityParams, ModelParams, ParamVars};

/// Architecture and ablation switches of the multimodal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// User-item propagation layers.
    pub ui_layers: usize,
    /// Item-item propagation layers.
    pub ii_layers: usize,
    pub modalities: Vec<Modality>,
    pub use_purifier: bool,
    pub use_item_item: bool,
    pub use_circle: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            ui_layers: 2,
            ii_layers: 1,
            modalities: vec![Modality::Visual, Modality::Textual],
            use_purifier: true,
            use_item_item: true,
            use_circle: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("embedding width must be >= 1".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return Err(Error::Config("duplicate modality".into()));
        }
        Ok(())
    }
}

/// Which model a parameter set belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// The full multimodal graph model.
    Multimodal(ModelConfig),
    /// Plain ID embeddings scored by dot product.
    MatrixFactorization { d: usize },
    /// ID embeddings averaged over `layers` rounds of user-item propagation.
    LightGcn { d: usize, layers: usize },
}

impl Architecture {
    pub fn d(&self) -> usize {
        match self {
            Architecture::Multimodal(c) => c.d,
            Architecture::MatrixFactorization { d } | Architecture::LightGcn { d, .. } => *d,
        }
    }

    pub fn modalities(&self) -> &[Modality] {
        match self {
            Architecture::Multimodal(c) => &c.modalities,
            _ => &[],
        }
    }

    pub fn uses_circle(&self) -> bool {
        matches!(self, Architecture::Multimodal(c) if c.use_circle)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Multimodal(c) => c.validate(),
            _ if self.d() == 0 => Err(Error::Config("embedding width must be >= 1".into())),
            _ => Ok(()),
        }
    }
}
