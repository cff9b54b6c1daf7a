//! Attention-allocation analyses over per-layer traces.
//!
//! Every function takes the traces of one forward pass (one entry per
//! layer) and is a pure function of them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, AttentionTrace};
use crate::error::{Error, Result};

/// Which weights an analysis reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// The normalized token distribution (softmax, or sink-softmax).
    Raw,
    /// The weights that multiply `V` (differs from raw only for affine).
    Effective,
}

impl WeightSource {
    /// Effective for affine, raw otherwise.
    pub fn default_for(kind: AttentionKind) -> Self {
        if kind == AttentionKind::Affine {
            WeightSource::Effective
        } else {
            WeightSource::Raw
        }
    }

    fn row<'a>(self, t: &'a AttentionTrace, b: usize, h: usize, q: usize) -> &'a [f64] {
        match self {
            WeightSource::Raw => t.softmax_row(b, h, q),
            WeightSource::Effective => t.effective_row(b, h, q),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Entropy of the token distribution over unmasked keys.
    #[default]
    Distribution,
    /// Entropy of effective weights after clipping at zero and renormalizing.
    ClippedEffective,
}

fn valid_sum(t: &AttentionTrace, row: &[f64], q: usize) -> f64 {
    row.iter()
        .enumerate()
        .filter(|&(k, _)| t.is_valid(q, k))
        .map(|(_, w)| w)
        .sum()
}

/// Mean scaled score over every unmasked position of every layer and head.
pub fn qkt_mean(traces: &[AttentionTrace]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for t in traces {
        let (_, _, tq, n) = t.dims();
        for (r, row) in t.qkt_logits.data().chunks(n).enumerate() {
            let q = r % tq;
            for (k, &x) in row.iter().enumerate() {
                if t.is_valid(q, k) {
                    sum += x;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Total token mass of each (layer, sequence, query), averaged over heads.
/// Affine reads effective weights, every other variant its token
/// distribution (which excludes any sink term).
pub fn per_query_mass_samples(traces: &[AttentionTrace]) -> Vec<f64> {
    let mut out = Vec::new();
    for t in traces {
        let (b, heads, tq, _) = t.dims();
        let source = WeightSource::default_for(t.kind);
        for bi in 0..b {
            for q in 0..tq {
                let total: f64 = (0..heads)
                    .map(|h| valid_sum(t, source.row(t, bi, h, q), q))
                    .sum();
                out.push(total / heads as f64);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges; a degenerate range collapses to one bin `[v, v]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub median: f64,
}

impl Histogram {
    pub const DEFAULT_BINS: usize = 50;

    /// Uniform bins over the observed range; the last bin is closed.
    pub fn from_samples(samples: &[f64], bins: usize) -> Result<Self> {
        if samples.is_empty() || bins == 0 {
            return Err(Error::Input("histogram needs samples and at least one bin".into()));
        }
        if let Some(bad) = samples.iter().find(|x| !x.is_finite()) {
            return Err(Error::Input(format!("non-finite sample {bad}")));
        }
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let median = crate::stability::median(samples);
        // Spreads within rounding noise of a single value are one spike.
        if hi - lo <= 1e-12 * hi.abs().max(1.0) {
            return Ok(Histogram {
                edges: vec![lo, hi],
                counts: vec![samples.len()],
                mean,
                median,
            });
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut counts = vec![0; bins];
        for &x in samples {
            let i = (((x - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Ok(Histogram {
            edges,
            counts,
            mean,
            median,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `bin_left,bin_right,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{c}", self.edges[i], self.edges[i + 1]);
        }
        out
    }
}

pub fn per_query_mass(traces: &[AttentionTrace], bins: usize) -> Result<Histogram> {
    Histogram::from_samples(&per_query_mass_samples(traces), bins)
}

/// Per layer: mean weight on key 0 over sequences, heads and queries
/// `q ≥ 1`. Sink terms are never a key, so no renormalization applies.
pub fn first_token_mass(traces: &[AttentionTrace], source: WeightSource) -> Result<Vec<f64>> {
    traces
        .iter()
        .map(|t| {
            let (b, heads, tq, _) = t.dims();
            if tq < 2 {
                return Err(Error::Input("first-token mass needs at least two queries".into()));
            }
            let mut sum = 0.0;
            for bi in 0..b {
                for h in 0..heads {
                    for q in 1..tq {
                        if t.is_valid(q, 0) {
                            sum += source.row(t, bi, h, q)[0];
                        }
                    }
                }
            }
            Ok(sum / (b * heads * (tq - 1)) as f64)
        })
        .collect()
}

/// Head-wise total weight, `[layer][head]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    /// Mean over sequences and queries of the token mass, divided by
    /// `1 − sink_mass` when the variant has a sink.
    pub values: Vec<Vec<f64>>,
    /// `values` clamped to `[0, 1]` for display.
    pub display: Vec<Vec<f64>>,
    /// Rows skipped because the sink held (almost) all the mass.
    pub degenerate_rows: usize,
}

pub const SINK_SATURATION: f64 = 1.0 - 1e-12;

pub fn head_total_weight(traces: &[AttentionTrace]) -> Result<HeadWeights> {
    let mut values = Vec::with_capacity(traces.len());
    let mut degenerate_rows = 0;
    for t in traces {
        let (b, heads, tq, _) = t.dims();
        let source = WeightSource::default_for(t.kind);
        let mut row_vals = Vec::with_capacity(heads);
        for h in 0..heads {
            let (mut sum, mut n) = (0.0, 0usize);
            for bi in 0..b {
                for q in 0..tq {
                    let mass = valid_sum(t, source.row(t, bi, h, q), q);
                    match t.sink_mass_at(bi, h, q) {
                        Some(s) if s >= SINK_SATURATION => degenerate_rows += 1,
                        Some(s) => {
                            sum += mass / (1.0 - s);
                            n += 1;
                        }
                        None => {
                            sum += mass;
                            n += 1;
                        }
                    }
                }
            }
            row_vals.push(if n == 0 { f64::NAN } else { sum / n as f64 });
        }
        values.push(row_vals);
    }
    let display = values
        .iter()
        .map(|r| r.iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect())
        .collect();
    Ok(HeadWeights {
        values,
        display,
        degenerate_rows,
    })
}

/// `−Σ p ln p` with `0 · ln 0 = 0`; `p` must already be normalized.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// Mean entropy over sequences, heads and queries, per layer.
    pub per_layer: Vec<f64>,
    /// Rows with zero total weight, excluded from the means.
    pub degenerate_rows: usize,
}

pub fn attention_entropy(traces: &[AttentionTrace], mode: EntropyMode) -> EntropyReport {
    let mut per_layer = Vec::with_capacity(traces.len());
    let mut degenerate_rows = 0;
    let mut buf = Vec::new();
    for t in traces {
        let (b, heads, tq, _) = t.dims();
        let (mut sum, mut n) = (0.0, 0usize);
        for bi in 0..b {
            for h in 0..heads {
                for q in 0..tq {
                    let row = match mode {
                        EntropyMode::Distribution => t.softmax_row(bi, h, q),
                        EntropyMode::ClippedEffective => t.effective_row(bi, h, q),
                    };
                    buf.clear();
                    buf.extend(
                        row.iter()
                            .enumerate()
                            .filter(|&(k, _)| t.is_valid(q, k))
                            .map(|(_, &w)| w.max(0.0)),
                    );
                    let total: f64 = buf.iter().sum();
                    if !(total > 0.0) {
                        degenerate_rows += 1;
                        continue;
                    }
                    buf.iter_mut().for_each(|w| *w /= total);
                    sum += entropy(&buf);
                    n += 1;
                }
            }
        }
        per_layer.push(if n == 0 { f64::NAN } else { sum / n as f64 });
    }
    EntropyReport {
        per_layer,
        degenerate_rows,
    }
}

/// Top-left `block × block` weights of `layer`, averaged over heads and
/// sequences.
pub fn attention_heatmap(
    traces: &[AttentionTrace],
    layer: usize,
    block: usize,
    source: WeightSource,
) -> Result<Vec<Vec<f64>>> {
    let t = traces.get(layer).ok_or_else(|| {
        Error::Input(format!("layer {layer} out of range for {} layers", traces.len()))
    })?;
    let (b, heads, tq, n) = t.dims();
    if block == 0 || block > tq || block > n {
        return Err(Error::Input(format!(
            "block {block} must lie in 1..={}",
            tq.min(n)
        )));
    }
    let mut out = vec![vec![0.0; block]; block];
    for bi in 0..b {
        for h in 0..heads {
            for (q, out_row) in out.iter_mut().enumerate() {
                let row = source.row(t, bi, h, q);
                for (k, o) in out_row.iter_mut().enumerate() {
                    *o += row[k];
                }
            }
        }
    }
    let scale = 1.0 / (b * heads) as f64;
    out.iter_mut().flatten().for_each(|x| *x *= scale);
    Ok(out)
}

/// Plain numeric CSV, one matrix row per line.
pub fn matrix_to_csv(m: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in m {
        let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// All analyses of one set of traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub entropy: Vec<f64>,
    pub first_token_mass_raw: Vec<f64>,
    pub first_token_mass_effective: Vec<f64>,
    pub qkt_mean: f64,
    pub per_query_mass: Histogram,
    pub head_heatmap: Vec<Vec<f64>>,
}

impl DiagnosticsRecord {
    pub fn compute(traces: &[AttentionTrace], mode: EntropyMode) -> Result<Self> {
        Ok(DiagnosticsRecord {
            entropy: attention_entropy(traces, mode).per_layer,
            first_token_mass_raw: first_token_mass(traces, WeightSource::Raw)?,
            first_token_mass_effective: first_token_mass(traces, WeightSource::Effective)?,
            qkt_mean: qkt_mean(traces),
            per_query_mass: per_query_mass(traces, Histogram::DEFAULT_BINS)?,
            head_heatmap: head_total_weight(traces)?.display,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Mask, Tensor};

    fn trace_from_rows(kind: AttentionKind, rows: Vec<f64>, t: usize) -> AttentionTrace {
        let w = Tensor::new(vec![1, 1, t, t], rows).unwrap();
        AttentionTrace {
            kind,
            softmax_weights: w.clone(),
            effective_weights: w,
            qkt_logits: Tensor::zeros(&[1, 1, t, t]),
            alpha_values: None,
            sink_mass: None,
            alpha_ma: None,
            mask: Mask::Causal,
        }
    }

    fn uniform_causal(t: usize) -> Vec<f64> {
        let mut w = vec![0.0; t * t];
        for q in 0..t {
            for k in 0..=q {
                w[q * t + k] = 1.0 / (q + 1) as f64;
            }
        }
        w
    }

    #[test]
    fn entropy_cases() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.5, 0.25, 0.25]) - 1.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_attention() {
        let tr = vec![trace_from_rows(AttentionKind::Baseline, uniform_causal(4), 4)];
        let ftm = first_token_mass(&tr, WeightSource::Raw).unwrap();
        assert!((ftm[0] - (0.5 + 1.0 / 3.0 + 0.25) / 3.0).abs() < 1e-15);
        assert_eq!(tr[0].softmax_row(0, 0, 3)[0], 0.25);
        let ent = attention_entropy(&tr, EntropyMode::Distribution);
        let expected = (0.0 + 2f64.ln() + 3f64.ln() + 4f64.ln()) / 4.0;
        assert!((ent.per_layer[0] - expected).abs() < 1e-15);
        let hist = per_query_mass(&tr, 50).unwrap();
        assert_eq!(hist.counts, vec![4]);
        assert_eq!(hist.total(), 4);
        let hw = head_total_weight(&tr).unwrap();
        assert!((hw.values[0][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_weight_on_first_token() {
        let mut w = vec![0.0; 9];
        for q in 0..3 {
            w[q * 3] = 1.0;
        }
        let tr = vec![trace_from_rows(AttentionKind::Baseline, w, 3)];
        assert_eq!(first_token_mass(&tr, WeightSource::Raw).unwrap(), vec![1.0]);
        assert_eq!(attention_entropy(&tr, EntropyMode::Distribution).per_layer, vec![0.0]);
    }

    #[test]
    fn sink_normalization_and_saturation() {
        let mut tr = trace_from_rows(AttentionKind::Sink, vec![1.0 / 3.0; 4], 2);
        tr.mask = Mask::All;
        tr.sink_mass = Some(Tensor::new(vec![1, 1, 2], vec![1.0 / 3.0, 1.0]).unwrap());
        let hw = head_total_weight(&[tr]).unwrap();
        assert!((hw.values[0][0] - 1.0).abs() < 1e-15);
        assert_eq!(hw.degenerate_rows, 1);
    }

    #[test]
    fn histogram_binning() {
        let h = Histogram::from_samples(&[0.0, 0.5, 1.0, 0.26], 4).unwrap();
        assert_eq!(h.edges, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(h.counts, vec![1, 1, 1, 1]);
        assert_eq!(h.median, 0.38);
        assert!(h.to_csv().starts_with("bin_left,bin_right,count\n0,0.25,1\n"));
        assert!(Histogram::from_samples(&[], 4).is_err());
    }

    #[test]
    fn heatmap_errors_and_single_cell() {
        let tr = vec![trace_from_rows(AttentionKind::Baseline, uniform_causal(3), 3)];
        assert_eq!(attention_heatmap(&tr, 0, 1, WeightSource::Raw).unwrap(), vec![vec![1.0]]);
        assert!(matches!(attention_heatmap(&tr, 1, 1, WeightSource::Raw), Err(Error::Input(_))));
        assert!(matches!(attention_heatmap(&tr, 0, 4, WeightSource::Raw), Err(Error::Input(_))));
        let m = attention_heatmap(&tr, 0, 3, WeightSource::Raw).unwrap();
        assert_eq!(matrix_to_csv(&m).lines().count(), 3);
        assert_eq!(m[0][1], 0.0);
    }
}
