use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::attention::{AttentionKind, AttentionVariant};
use crate::error::Result;
use crate::model::{check_param_gradients, count_params, ModelConfig, TransformerModel};
use crate::numerics::{GradCheckOptions, GradCheckReport};
use crate::rng::substream;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckRow {
    pub variant: String,
    /// `qkv`, `w_alpha`, `w_gate` or `sink`, pooled over layers.
    pub group: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub passed: bool,
}

const LAYERS: usize = 2;
const SEQ: usize = 8;
const BATCH: usize = 2;

/// Small model with every parameter at a generic (non-initial) point, so
/// no gradient is trivially zero.
fn probe_model(variant: AttentionVariant, seed: u64) -> Result<TransformerModel> {
    let config = ModelConfig {
        vocab_size: 24,
        model_dim: 32,
        num_heads: 2,
        num_layers: LAYERS,
        max_seq_len: SEQ,
        attention: variant,
        init_std: 0.25,
        seed,
        ..ModelConfig::default()
    };
    let mut model = TransformerModel::new(config)?;
    let mut rng = substream(seed, "gradcheck/perturb");
    let jitter = Normal::new(0.0, 0.3).expect("valid std");
    for p in model.params_mut() {
        if p.name.ends_with("norm1") || p.name.ends_with("norm2") || p.name == "norm_f" || p.name.ends_with("sink") {
            p.tensor.data_mut().iter_mut().for_each(|x| *x += jitter.sample(&mut rng));
        }
    }
    for e in model.ema_mut() {
        e.alpha_ma.iter_mut().for_each(|a| *a = rng.random_range(0.2..0.8));
    }
    Ok(model)
}

/// Central-difference check of the attention-relevant parameter gradients
/// of a 2-layer model under a next-token loss.
pub fn gradcheck_variant(variant: AttentionVariant, opts: GradCheckOptions) -> Result<Vec<GradCheckRow>> {
    let seed = 7;
    let model = probe_model(variant, seed)?;
    let vocab = model.config().vocab_size;
    let mut rng = substream(seed, "gradcheck/tokens");
    let ids: Vec<usize> = (0..BATCH * SEQ).map(|_| rng.random_range(0..vocab)).collect();
    let targets: Vec<usize> = (0..BATCH * SEQ).map(|_| rng.random_range(0..vocab)).collect();

    let mut groups: Vec<(&str, Vec<String>)> = vec![(
        "qkv",
        (0..LAYERS)
            .flat_map(|l| ["wq", "wk", "wv"].map(|n| format!("layers.{l}.{n}")))
            .collect(),
    )];
    match variant.kind {
        AttentionKind::Affine => groups.push(("w_alpha", layer_names("w_alpha"))),
        AttentionKind::Sink => groups.push(("sink", layer_names("sink"))),
        AttentionKind::Baseline | AttentionKind::OffByOne => {}
    }
    if variant.gated {
        groups.push(("w_gate", layer_names("w_gate")));
    }

    groups
        .into_iter()
        .map(|(group, names)| {
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let reports = check_param_gradients(&model, &ids, &targets, BATCH, SEQ, &names, opts)?;
            let merged = reports
                .into_iter()
                .map(|(_, r)| r)
                .reduce(GradCheckReport::merge)
                .expect("every group names at least one parameter");
            Ok(GradCheckRow {
                variant: variant.label(),
                group: group.to_string(),
                max_rel_error: merged.max_rel_error,
                max_abs_error: merged.max_abs_error,
                checked: merged.checked,
                passed: merged.passed,
            })
        })
        .collect()
}

fn layer_names(name: &str) -> Vec<String> {
    (0..LAYERS).map(|l| format!("layers.{l}.{name}")).collect()
}

/// Gradient checks for all eight attention variants.
pub fn cmd_gradcheck(opts: GradCheckOptions) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    for v in AttentionVariant::all() {
        rows.extend(gradcheck_variant(v, opts)?);
    }
    Ok(rows)
}

/// Parameter totals and overhead over baseline at the reference scales and
/// the desk-scale default, as CSV.
pub fn params_table() -> String {
    let mut out = String::from("scale,method,total,delta,delta_millions\n");
    let scales = ModelConfig::REFERENCE_SCALES
        .iter()
        .map(|&s| (s.to_string(), ModelConfig::reference_scale(s).expect("known scale")))
        .chain(std::iter::once(("desk".to_string(), ModelConfig::default())));
    for (name, config) in scales {
        for v in AttentionVariant::all() {
            let c = ModelConfig {
                attention: v,
                ..config.clone()
            };
            let count = count_params(&c);
            let _ = writeln!(
                out,
                "{name},{},{},{},{:.1}",
                v.label(),
                count.total,
                count.delta_vs_baseline,
                count.delta_vs_baseline as f64 / 1e6
            );
        }
    }
    out
}
