//! Model hyperparameters and architecture variant switches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a scalar/vector input is lifted into the embedding space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Two-layer fully connected network with bias (the default).
    Fcn,
    /// Single linear layer without bias (ablation; zero inputs embed to zero).
    LinearNobias,
}

/// How position information enters the attention computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Pairwise relative positions (distance, azimuth) fused into scores.
    Srpe,
    /// Absolute (lat, lon) embeddings added to inputs; scores carry no
    /// pairwise term (ablation).
    Sape,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Encoder layer count (T).
    pub layers: usize,
    /// Attention head count (H).
    pub heads: usize,
    /// Embedding width (d_e).
    pub d_embed: usize,
    /// Per-head query/key/value width (d_k). Set equal to `d_embed`; heads
    /// concatenate to `heads * d_head` and project back down.
    pub d_head: usize,
    /// Feed-forward hidden width (d_f).
    pub d_ffn: usize,
    pub emb_input: EmbeddingKind,
    pub emb_pos: EmbeddingKind,
    pub position: PositionMode,
    /// When false, every node attends to every node (ablation).
    pub shield: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 3,
            heads: 2,
            d_embed: 16,
            d_head: 16,
            d_ffn: 256,
            emb_input: EmbeddingKind::Fcn,
            emb_pos: EmbeddingKind::Fcn,
            position: PositionMode::Srpe,
            shield: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_embed", self.d_embed),
            ("d_head", self.d_head),
            ("d_ffn", self.d_ffn),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model dimension `{name}` must be >= 1")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        assert_eq!(
            (c.layers, c.heads, c.d_embed, c.d_head, c.d_ffn),
            (3, 2, 16, 16, 256)
        );
        assert!(c.shield);
        assert_eq!(c.position, PositionMode::Srpe);
        c.validate().unwrap();
    }

    #[test]
    fn zero_dims_rejected() {
        let c = ModelConfig {
            layers: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn serde_round_trip_with_variant_names() {
        let c = ModelConfig {
            emb_input: EmbeddingKind::LinearNobias,
            position: PositionMode::Sape,
            shield: false,
            ..Default::default()
        };
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("linear_nobias"));
        assert!(json.contains("sape"));
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
