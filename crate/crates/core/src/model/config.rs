use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sequence backbone. Only the SASRec-style causal transformer is implemented;
/// other backbones would slot in as further variants with their own block
/// function in `model::layers`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Sasrec,
}

/// Architecture hyperparameters of one client model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    /// Embedding width per item attribute.
    pub d_model: usize,
    pub n_heads: usize,
    /// Transformer blocks.
    pub n_blocks: usize,
    /// Group FFNs per block.
    pub n_groups: usize,
    pub max_seq_len: usize,
    pub ffn_hidden: usize,
    pub gate_hidden: usize,
    /// Hidden widths of the prediction MLP; the output layer is implicit.
    pub pred_hidden: Vec<usize>,
    pub dropout: f64,
    /// Vocabulary per item attribute; entry 0 is the item id itself.
    pub attr_vocab: Vec<usize>,
    pub n_users: usize,
    /// When false the gate and group FFNs are removed, leaving only the
    /// private FFN in each block.
    pub group_ffn: bool,
}

impl ModelConfig {
    pub fn n_attrs(&self) -> usize {
        self.attr_vocab.len()
    }

    /// Width of the concatenated item representation.
    pub fn width(&self) -> usize {
        self.d_model * self.n_attrs()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("n_groups", self.n_groups),
            ("max_seq_len", self.max_seq_len),
            ("ffn_hidden", self.ffn_hidden),
            ("gate_hidden", self.gate_hidden),
            ("n_users", self.n_users),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.attr_vocab.is_empty() {
            return Err(Error::Config("model needs at least one item attribute".into()));
        }
        if let Some(i) = self.attr_vocab.iter().position(|&v| v == 0) {
            return Err(Error::Config(format!("attribute {i} has an empty vocabulary")));
        }
        if self.width() < 2 {
            return Err(Error::Config(
                "d_model * n_attrs must be >= 2 for layer normalization".into(),
            ));
        }
        if self.width() % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model * n_attrs = {} is not divisible by n_heads = {}",
                self.width(),
                self.n_heads
            )));
        }
        if self.pred_hidden.contains(&0) {
            return Err(Error::Config("pred_hidden widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Small model for the synthetic clustered data: 8-wide item id
    /// embeddings and histories of at most 8 items.
    pub fn compact(n_items: usize, n_users: usize) -> Self {
        Self {
            d_model: 8,
            max_seq_len: 8,
            ffn_hidden: 16,
            attr_vocab: vec![n_items],
            n_users,
            ..Self::default()
        }
    }

    /// A KuaiRand-Pure sized client model: 1,500 items with one 50-value
    /// category attribute, two blocks, four groups. 60,649 parameters.
    pub fn kuairand_like() -> Self {
        Self {
            backbone: Backbone::Sasrec,
            d_model: 16,
            n_heads: 2,
            n_blocks: 2,
            n_groups: 4,
            max_seq_len: 20,
            ffn_hidden: 32,
            gate_hidden: 16,
            pred_hidden: vec![32],
            dropout: 0.1,
            attr_vocab: vec![1500, 50],
            n_users: 1000,
            group_ffn: true,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Sasrec,
            d_model: 16,
            n_heads: 2,
            n_blocks: 2,
            n_groups: 4,
            max_seq_len: 10,
            ffn_hidden: 32,
            gate_hidden: 16,
            pred_hidden: vec![16],
            dropout: 0.0,
            attr_vocab: vec![100],
            n_users: 100,
            group_ffn: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::kuairand_like().validate().unwrap();
    }

    #[test]
    fn zero_width_rejected() {
        let cfg = ModelConfig {
            d_model: 0,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            d_model: 5,
            n_heads: 2,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_blocks_or_groups_rejected() {
        for cfg in [
            ModelConfig {
                n_blocks: 0,
                ..ModelConfig::default()
            },
            ModelConfig {
                n_groups: 0,
                ..ModelConfig::default()
            },
            ModelConfig {
                max_seq_len: 0,
                ..ModelConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
