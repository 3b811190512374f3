use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenGrid, TubeDims};

/// How patch features are weighted when pooling an object token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Weight by the object's per-instance heatmap affinity.
    #[default]
    HeatmapWeighted,
    /// Weight 1 for tokens whose spatial tube center lies in the box, else 0.
    BinaryBlockMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input frames, height and width in pixels.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tube: TubeDims,
    pub depth: usize,
    /// Token width D.
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    /// Blocks with object-aware attention; `None` uses the default schedule.
    pub oam_layers: Option<Vec<usize>>,
    pub aggregation: Aggregation,
    pub use_identity_embedding: bool,
    pub max_tracks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 8,
            height: 32,
            width: 32,
            tube: TubeDims::new(2, 8, 8),
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_hidden: 256,
            num_classes: 4,
            oam_layers: Some(Vec::new()),
            aggregation: Aggregation::HeatmapWeighted,
            use_identity_embedding: true,
            max_tracks: 8,
        }
    }
}

/// `{floor(L/6), floor(L/2), L-1}`, which is `{2, 6, 11}` for 12 blocks.
pub fn default_oam_layers(depth: usize) -> Vec<usize> {
    if depth == 0 {
        return Vec::new();
    }
    let mut v = vec![depth / 6, depth / 2, depth - 1];
    v.dedup();
    v
}

impl ModelConfig {
    pub fn grid(&self) -> Result<TokenGrid> {
        TokenGrid::new(self.frames, self.height, self.width, self.tube)
    }

    /// Sorted, deduplicated object-aware block indices.
    pub fn oam_layer_set(&self) -> Vec<usize> {
        let mut v = self
            .oam_layers
            .clone()
            .unwrap_or_else(|| default_oam_layers(self.depth));
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn is_oam_layer(&self, l: usize) -> bool {
        self.oam_layer_set().contains(&l)
    }

    pub fn uses_objects(&self) -> bool {
        !self.oam_layer_set().is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::InvalidConfig("depth, dim, heads and mlp_hidden must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if let Some(&l) = self.oam_layer_set().iter().find(|&&l| l >= self.depth) {
            return Err(Error::InvalidConfig(format!(
                "oam layer {l} outside depth {}",
                self.depth
            )));
        }
        Ok(())
    }
}
