use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            context_len: 32,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 16 {
            return Err(Error::Config(format!("vocab_size {} < 16", self.vocab_size)));
        }
        if self.context_len < 8 {
            return Err(Error::Config(format!("context_len {} < 8", self.context_len)));
        }
        if self.n_layers == 0 || self.d_model == 0 {
            return Err(Error::Config("n_layers and d_model must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        LmConfig {
            seed,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        LmConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = [
            LmConfig {
                vocab_size: 8,
                ..LmConfig::default()
            },
            LmConfig {
                context_len: 4,
                ..LmConfig::default()
            },
            LmConfig {
                n_heads: 3,
                ..LmConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
