use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::attention::{AttentionKind, AttentionVariant};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    LearnedAbsolute,
    Rotary,
}

/// Shape and behaviour of a [`TransformerModel`](super::TransformerModel).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: f64,
    pub max_seq_len: usize,
    pub attention: AttentionVariant,
    /// Activation producing the affine scale.
    pub phi_alpha: ActivationKind,
    /// Activation of the output gate.
    pub phi_gate: ActivationKind,
    pub mlp_activation: ActivationKind,
    /// Momentum of the running mean of the affine scale.
    pub rho: f64,
    pub positional: Positional,
    pub rope_base: f64,
    pub tie_embeddings: bool,
    pub init_std: f64,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            model_dim: 128,
            num_heads: 4,
            num_layers: 4,
            mlp_ratio: 4.0,
            max_seq_len: 128,
            attention: AttentionVariant::baseline(),
            phi_alpha: ActivationKind::LinearClipping,
            phi_gate: ActivationKind::Sigmoid,
            mlp_activation: ActivationKind::Gelu,
            rho: 0.9,
            positional: Positional::LearnedAbsolute,
            rope_base: 10_000.0,
            tie_embeddings: false,
            init_std: 0.02,
            norm_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_attention(mut self, kind: AttentionKind, gated: bool) -> Self {
        self.attention = AttentionVariant::new(kind, gated);
        self
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads.max(1)
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.model_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.model_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return fail("vocab_size, model_dim, num_heads and num_layers must be positive".into());
        }
        if self.model_dim % self.num_heads != 0 {
            return fail(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return fail(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if self.max_seq_len < 2 {
            return fail(format!("max_seq_len must be at least 2, got {}", self.max_seq_len));
        }
        if self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} leaves an empty MLP", self.mlp_ratio));
        }
        if self.positional == Positional::Rotary && self.head_dim() % 2 != 0 {
            return fail(format!("rotary positions need an even head dim, got {}", self.head_dim()));
        }
        if !(self.init_std > 0.0) || !(self.norm_eps > 0.0) {
            return fail("init_std and norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Dimensions of published model families, for parameter-overhead
    /// arithmetic only.
    pub fn reference_scale(name: &str) -> Option<ModelConfig> {
        let (vocab, dim, heads, layers) = match name {
            "qwen1.5-0.5b" => (151_936, 1024, 16, 24),
            "llama3.2-1b" => (128_256, 2048, 32, 16),
            "llama3.2-3b" => (128_256, 3072, 24, 28),
            _ => return None,
        };
        Some(ModelConfig {
            vocab_size: vocab,
            model_dim: dim,
            num_heads: heads,
            num_layers: layers,
            max_seq_len: 2048,
            ..ModelConfig::default()
        })
    }

    pub const REFERENCE_SCALES: [&'static str; 3] = ["qwen1.5-0.5b", "llama3.2-1b", "llama3.2-3b"];
}
