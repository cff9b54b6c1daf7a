use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionTrace;
use crate::data::Corpus;
use crate::diagnostics::{
    attention_entropy, attention_heatmap, first_token_mass, head_total_weight, matrix_to_csv,
    per_query_mass, qkt_mean, EntropyMode, Histogram, WeightSource,
};
use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, write_json};
use crate::model::checkpoint::Checkpoint;
use crate::model::ForwardOptions;
use crate::numerics::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeOptions {
    pub data_path: PathBuf,
    pub max_bytes: Option<usize>,
    pub holdout_fraction: f64,
    pub out_dir: PathBuf,
    pub n_sequences: usize,
    /// Defaults to the model's maximum sequence length.
    pub seq_len: Option<usize>,
    pub seed: u64,
    /// Restrict every output to these layers.
    pub layers: Option<Vec<usize>>,
    /// Side of the exported top-left heatmap block.
    pub block: usize,
    pub entropy_mode: EntropyMode,
    /// Weights used for the heatmap; effective for affine when unset.
    pub heatmap_source: Option<WeightSource>,
    pub bins: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            data_path: PathBuf::from("data/corpus.txt"),
            max_bytes: None,
            holdout_fraction: 0.05,
            out_dir: PathBuf::from("runs/analysis"),
            n_sequences: 10,
            seq_len: None,
            seed: 0,
            layers: None,
            block: 30,
            entropy_mode: EntropyMode::Distribution,
            heatmap_source: None,
            bins: Histogram::DEFAULT_BINS,
        }
    }
}

/// Contents of the analysis `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub method: String,
    pub checkpoint: PathBuf,
    pub checkpoint_step: usize,
    pub seq_len: usize,
    pub n_sequences: usize,
    pub seed: u64,
    pub layers: Vec<usize>,
    pub entropy_mode: EntropyMode,
    pub heatmap_source: WeightSource,
    pub qkt_mean: f64,
    pub per_query_mass_mean: f64,
    pub per_query_mass_median: f64,
    pub entropy_degenerate_rows: usize,
    pub head_weight_degenerate_rows: usize,
    pub files: Vec<String>,
}

/// Runs every attention diagnostic over seeded held-out sequences.
pub fn cmd_analyze(checkpoint: &Path, opts: &AnalyzeOptions) -> Result<AnalyzeSummary> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut model = ck.to_model()?;
    let config = model.config().clone();
    let seq_len = opts.seq_len.unwrap_or(config.max_seq_len);
    if seq_len < 2 || seq_len > config.max_seq_len {
        return Err(Error::Config(format!(
            "seq_len must lie in 2..={}, got {seq_len}",
            config.max_seq_len
        )));
    }
    if opts.n_sequences == 0 {
        return Err(Error::Config("n_sequences must be positive".into()));
    }
    let layers = match &opts.layers {
        Some(ls) => {
            if let Some(&bad) = ls.iter().find(|&&l| l >= config.num_layers) {
                return Err(Error::Input(format!(
                    "layer {bad} out of range for {} layers",
                    config.num_layers
                )));
            }
            ls.clone()
        }
        None => (0..config.num_layers).collect(),
    };
    if opts.block == 0 || opts.block > seq_len {
        return Err(Error::Config(format!("block must lie in 1..={seq_len}, got {}", opts.block)));
    }

    let corpus = Corpus::load(&opts.data_path, opts.max_bytes)?;
    let (_, holdout) = corpus.split_holdout(opts.holdout_fraction)?;
    let batch = holdout.batch_at(opts.seed, 0, opts.n_sequences, seq_len)?;
    let mut tape = Tape::new();
    let out = model.forward(
        &mut tape,
        &batch.inputs,
        batch.batch_size,
        batch.seq_len,
        ForwardOptions::eval().traced(),
    )?;
    drop(tape);
    let all = out.traces;
    let traces: Vec<AttentionTrace> = layers.iter().map(|&l| all[l].clone()).collect();

    let dir = &opts.out_dir;
    let mut files = Vec::new();
    let mut emit = |name: String, body: String| -> Result<()> {
        write_atomic(&dir.join(&name), body.as_bytes())?;
        files.push(name);
        Ok(())
    };

    let entropy = attention_entropy(&traces, opts.entropy_mode);
    let mut csv = String::from("layer,entropy\n");
    for (l, e) in layers.iter().zip(&entropy.per_layer) {
        let _ = writeln!(csv, "{l},{e}");
    }
    emit("entropy.csv".into(), csv)?;

    let raw = first_token_mass(&traces, WeightSource::Raw)?;
    let eff = first_token_mass(&traces, WeightSource::Effective)?;
    let mut csv = String::from("layer,first_token_raw,first_token_effective\n");
    for ((l, r), e) in layers.iter().zip(&raw).zip(&eff) {
        let _ = writeln!(csv, "{l},{r},{e}");
    }
    emit("first_token.csv".into(), csv)?;

    let hist = per_query_mass(&traces, opts.bins)?;
    emit("per_query_mass.csv".into(), hist.to_csv())?;

    let heads = head_total_weight(&traces)?;
    let mut csv = String::from("layer,head,value,display\n");
    for (i, l) in layers.iter().enumerate() {
        for (h, (v, d)) in heads.values[i].iter().zip(&heads.display[i]).enumerate() {
            let _ = writeln!(csv, "{l},{h},{v},{d}");
        }
    }
    emit("head_weights.csv".into(), csv)?;

    let source = opts
        .heatmap_source
        .unwrap_or_else(|| WeightSource::default_for(config.attention.kind));
    for (i, l) in layers.iter().enumerate() {
        let m = attention_heatmap(&traces, i, opts.block, source)?;
        emit(format!("heatmap_layer{l}.csv"), matrix_to_csv(&m))?;
    }

    files.push("manifest.json".into());
    let summary = AnalyzeSummary {
        method: config.attention.label(),
        checkpoint: checkpoint.to_path_buf(),
        checkpoint_step: ck.header.step,
        seq_len,
        n_sequences: opts.n_sequences,
        seed: opts.seed,
        layers,
        entropy_mode: opts.entropy_mode,
        heatmap_source: source,
        qkt_mean: qkt_mean(&traces),
        per_query_mass_mean: hist.mean,
        per_query_mass_median: hist.median,
        entropy_degenerate_rows: entropy.degenerate_rows,
        head_weight_degenerate_rows: heads.degenerate_rows,
        files,
    };
    write_json(&dir.join("manifest.json"), &summary)?;
    Ok(summary)
}
