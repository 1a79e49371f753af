use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape of the backbone and of every adapter attached to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width of the backbone.
    pub d: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Backbone layer indices the adapter layers read from, strictly increasing.
    pub adapter_positions: Vec<usize>,
    /// Transformer layers inside each adapter layer.
    pub adapter_depth: usize,
    /// Adapter bottleneck width.
    pub bottleneck: usize,
    pub agg_out: usize,
    /// Seed of the frozen backbone initialization.
    pub backbone_seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d: 64,
            n_layers: 6,
            heads: 4,
            ffn_dim: 128,
            max_len: 64,
            vocab_size,
            adapter_positions: vec![0, 2, 5],
            adapter_depth: 2,
            bottleneck: 32,
            agg_out: 64,
            backbone_seed: 0,
        }
    }

    /// Smallest useful shape, for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d: 8,
            n_layers: 2,
            heads: 2,
            ffn_dim: 16,
            max_len: 32,
            vocab_size,
            adapter_positions: vec![1],
            adapter_depth: 2,
            bottleneck: 4,
            agg_out: 8,
            backbone_seed: 0,
        }
    }

    /// BERT-base sized backbone with adapters at layers 0, 5 and 11.
    pub fn base_scale(vocab_size: usize) -> Self {
        Self {
            d: 768,
            n_layers: 12,
            heads: 12,
            ffn_dim: 3072,
            max_len: 512,
            vocab_size,
            adapter_positions: vec![0, 5, 11],
            adapter_depth: 2,
            bottleneck: 384,
            agg_out: 768,
            backbone_seed: 0,
        }
    }

    /// Number of adapter layers (K).
    pub fn adapter_layers(&self) -> usize {
        self.adapter_positions.len()
    }

    /// Feed-forward width inside adapter transformer layers, scaled with the
    /// bottleneck the same way `ffn_dim` relates to `d`.
    pub fn adapter_ffn_dim(&self) -> usize {
        (self.ffn_dim * self.bottleneck / self.d).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.ffn_dim == 0 || self.bottleneck == 0 {
            return err("d, heads, ffn_dim and bottleneck must be positive".into());
        }
        if self.agg_out == 0 || self.max_len == 0 {
            return err("agg_out and max_len must be positive".into());
        }
        if self.vocab_size < 4 {
            return err(format!("vocab_size {} leaves no room past reserved ids", self.vocab_size));
        }
        if self.d % self.heads != 0 {
            return err(format!("d = {} not divisible by heads = {}", self.d, self.heads));
        }
        if self.bottleneck % self.heads != 0 {
            return err(format!(
                "bottleneck = {} not divisible by heads = {}",
                self.bottleneck, self.heads
            ));
        }
        if self.adapter_depth == 0 {
            return err("adapter_depth (N) must be >= 1".into());
        }
        if self.adapter_positions.is_empty() {
            return err("at least one adapter position is required".into());
        }
        if self.adapter_positions.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!(
                "adapter positions {:?} must be strictly increasing",
                self.adapter_positions
            ));
        }
        if let Some(&last) = self.adapter_positions.last() {
            if last >= self.n_layers {
                return err(format!(
                    "adapter position {last} outside backbone depth {}",
                    self.n_layers
                ));
            }
        }
        Ok(())
    }

    /// Fields an adapter depends on; two adapters can share a backbone only
    /// when these agree.
    pub fn adapter_signature(&self) -> AdapterSignature {
        AdapterSignature {
            d: self.d,
            heads: self.heads,
            adapter_positions: self.adapter_positions.clone(),
            adapter_depth: self.adapter_depth,
            bottleneck: self.bottleneck,
            adapter_ffn_dim: self.adapter_ffn_dim(),
            agg_out: self.agg_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSignature {
    pub d: usize,
    pub heads: usize,
    pub adapter_positions: Vec<usize>,
    pub adapter_depth: usize,
    pub bottleneck: usize,
    pub adapter_ffn_dim: usize,
    pub agg_out: usize,
}
