use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Shape of the micro-transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { n_layers: 4, n_heads: 4, d_model: 64, d_head: 16, d_mlp: 256, vocab: 128, max_seq: 64, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::Config("need at least 2 layers".into()));
        }
        if self.vocab == 0 || self.max_seq == 0 || self.d_mlp == 0 {
            return Err(Error::Config("vocab, max_seq and d_mlp must be positive".into()));
        }
        Ok(())
    }

    pub fn n_heads_total(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// Equal up to the initialization seed.
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        ModelConfig { seed: other.seed, ..self.clone() } == *other
    }
}

/// Attention head coordinate `(layer, head)`, both 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadIndex {
    pub layer: usize,
    pub head: usize,
}

impl HeadIndex {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadIndex { layer, head }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers || self.head >= cfg.n_heads {
            return Err(Error::Config(format!(
                "head ({}, {}) outside {}x{}",
                self.layer, self.head, cfg.n_layers, cfg.n_heads
            )));
        }
        Ok(())
    }

    /// Every head in layer-major order.
    pub fn all(cfg: &ModelConfig) -> Vec<HeadIndex> {
        (0..cfg.n_layers).flat_map(|l| (0..cfg.n_heads).map(move |k| HeadIndex::new(l, k))).collect()
    }
}

impl std::fmt::Display for HeadIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.layer, self.head)
    }
}
