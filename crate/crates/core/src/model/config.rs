use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalScheme {
    Rotary,
    LearnedAbsolute,
}

/// Shape and seed of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Hidden width of the MLP block.
    pub d_mlp: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_positional")]
    pub positional: PositionalScheme,
    pub rng_seed: u64,
}

fn default_positional() -> PositionalScheme {
    PositionalScheme::Rotary
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.positional == PositionalScheme::Rotary && !self.d_head().is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "rotary embeddings need an even d_head, got {}",
                self.d_head()
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::InvalidConfig("vocab_size exceeds u32 range".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_mlp: 128,
            max_seq_len: 64,
            positional: PositionalScheme::Rotary,
            rng_seed: 0,
        }
    }
}
