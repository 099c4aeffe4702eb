use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bert,
    Roberta,
}

/// The subset of a Hugging Face `config.json` needed to build the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_type: String,
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub pad_token_id: u32,
}

fn default_type_vocab() -> usize {
    2
}

fn default_eps() -> f64 {
    1e-12
}

impl ModelConfig {
    pub fn load(path: &Path) -> Result<ModelConfig> {
        let text = fs::read_to_string(path).map_err(|e| ModelError::io(path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| ModelError::Format {
            path: path.into(),
            message: e.to_string(),
        })?;
        cfg.family()?;
        Ok(cfg)
    }

    pub fn family(&self) -> Result<Family> {
        match self.model_type.as_str() {
            "bert" => Ok(Family::Bert),
            "roberta" => Ok(Family::Roberta),
            other => Err(ModelError::UnsupportedModel(other.to_string())),
        }
    }

    /// Index of the first real position; RoBERTa reserves the slots up to
    /// and including the padding id.
    pub fn position_offset(&self) -> usize {
        match self.family() {
            Ok(Family::Roberta) => self.pad_token_id as usize + 1,
            _ => 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_attention_heads
    }

    /// A small randomly initialised BERT-style configuration for tests.
    pub fn tiny(vocab_size: usize, hidden: usize, layers: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            model_type: "bert".into(),
            vocab_size,
            hidden_size: hidden,
            num_hidden_layers: layers,
            num_attention_heads: heads,
            intermediate_size: 2 * hidden,
            max_position_embeddings: 64,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            pad_token_id: 0,
        }
    }
}
