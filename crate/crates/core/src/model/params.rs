use serde::Serialize;

use crate::attention::{AttentionKind, AttentionVariant};
use crate::model::{ModelConfig, Positional};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl ParamSpec {
    fn matrix(name: String, rows: usize, cols: usize, std: f64) -> Self {
        ParamSpec {
            name,
            shape: vec![rows, cols],
            init: Init::Normal(std),
            decay: true,
        }
    }

    fn gain(name: String, dim: usize) -> Self {
        ParamSpec {
            name,
            shape: vec![dim],
            init: Init::Ones,
            decay: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// The full, ordered parameter layout of a model.
pub(crate) fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let d = c.model_dim;
    let std = c.init_std;
    let resid_std = std / (2.0 * c.num_layers as f64).sqrt();
    let mut specs = vec![ParamSpec::matrix("tok_emb".into(), c.vocab_size, d, std)];
    if c.positional == Positional::LearnedAbsolute {
        specs.push(ParamSpec::matrix("pos_emb".into(), c.max_seq_len, d, std));
    }
    for l in 0..c.num_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        specs.push(ParamSpec::gain(p("norm1"), d));
        for n in ["wq", "wk", "wv"] {
            specs.push(ParamSpec::matrix(p(n), d, d, std));
        }
        specs.push(ParamSpec::matrix(p("wo"), d, d, resid_std));
        specs.extend(attention_specs(c, l));
        specs.push(ParamSpec::gain(p("norm2"), d));
        specs.push(ParamSpec::matrix(p("w_up"), d, c.mlp_hidden(), std));
        specs.push(ParamSpec::matrix(p("w_down"), c.mlp_hidden(), d, resid_std));
    }
    specs.push(ParamSpec::gain("norm_f".into(), d));
    if !c.tie_embeddings {
        specs.push(ParamSpec::matrix("lm_head".into(), d, c.vocab_size, std));
    }
    specs
}

/// Parameters that exist only because of the attention variant.
fn attention_specs(c: &ModelConfig, layer: usize) -> Vec<ParamSpec> {
    let d = c.model_dim;
    let mut out = Vec::new();
    match c.attention.kind {
        AttentionKind::Sink => out.push(ParamSpec {
            name: format!("layers.{layer}.sink"),
            shape: vec![c.num_heads],
            init: Init::Zeros,
            decay: false,
        }),
        // W_a: model_dim → num_heads
        AttentionKind::Affine => out.push(ParamSpec::matrix(
            format!("layers.{layer}.w_alpha"),
            d,
            c.num_heads,
            c.init_std,
        )),
        AttentionKind::Baseline | AttentionKind::OffByOne => {}
    }
    if c.attention.gated {
        // W_g: model_dim → model_dim
        out.push(ParamSpec::matrix(format!("layers.{layer}.w_gate"), d, d, c.init_std));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    /// Extra parameters over a baseline model with the same dimensions.
    pub delta_vs_baseline: usize,
}

pub fn count_params(config: &ModelConfig) -> ParamCount {
    let total = param_specs(config).iter().map(ParamSpec::numel).sum();
    let baseline = ModelConfig {
        attention: AttentionVariant::baseline(),
        ..config.clone()
    };
    let base: usize = param_specs(&baseline).iter().map(ParamSpec::numel).sum();
    ParamCount {
        total,
        delta_vs_baseline: total - base,
    }
}
