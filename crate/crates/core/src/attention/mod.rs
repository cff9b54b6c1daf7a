//! Baseline, off-by-one, sink, gated and affine-scaled attention.
//!
//! All functions work on the tape with per-head tensors `[B, H, T, d]`.
//! Scores are `QKᵀ/√d_k`; the causal mask is applied to every weight,
//! including the affine bias, so no future position ever carries weight.

mod ema;
mod variant;

pub use ema::EmaState;
pub use variant::{AttentionKind, AttentionVariant};

use crate::activations::ActivationKind;
use crate::error::{dim_err, Error, Result};
use crate::numerics::softmax::{softmax_row, trailing_matrix};
use crate::numerics::{Mask, Tape, Tensor, Var};

/// Everything the diagnostics need from one attention call.
///
/// Weight tensors are `[B, H, Tq, N]`; per-query tensors are `[B, H, Tq]`.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub kind: AttentionKind,
    /// Softmax (or sink-softmax) token weights.
    pub softmax_weights: Tensor,
    /// Weights that actually multiply `V`.
    pub effective_weights: Tensor,
    /// Scaled pre-softmax scores.
    pub qkt_logits: Tensor,
    pub alpha_values: Option<Tensor>,
    pub sink_mass: Option<Tensor>,
    /// Running mean used for `β` in this call (affine only).
    pub alpha_ma: Option<Vec<f64>>,
    pub mask: Mask,
}

impl AttentionTrace {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.softmax_weights.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn is_valid(&self, q: usize, k: usize) -> bool {
        let (_, _, tq, n) = self.dims();
        self.mask.is_valid(q, k, tq, n)
    }

    /// Offset of the row `(b, h, q)` in the weight tensors.
    pub fn row_offset(&self, b: usize, h: usize, q: usize) -> usize {
        let (_, heads, tq, n) = self.dims();
        ((b * heads + h) * tq + q) * n
    }

    /// Row of `softmax_weights`.
    pub fn softmax_row(&self, b: usize, h: usize, q: usize) -> &[f64] {
        let off = self.row_offset(b, h, q);
        &self.softmax_weights.data()[off..off + self.dims().3]
    }

    /// Row of `effective_weights`.
    pub fn effective_row(&self, b: usize, h: usize, q: usize) -> &[f64] {
        let off = self.row_offset(b, h, q);
        &self.effective_weights.data()[off..off + self.dims().3]
    }

    pub fn sink_mass_at(&self, b: usize, h: usize, q: usize) -> Option<f64> {
        let (_, heads, tq, _) = self.dims();
        self.sink_mass
            .as_ref()
            .map(|s| s.data()[(b * heads + h) * tq + q])
    }
}

/// Cheap per-call statistics, always collected.
#[derive(Clone, Debug, Default)]
pub struct AttentionStats {
    /// Sum and count of scaled scores over unmasked positions.
    pub qkt_sum: f64,
    pub qkt_count: usize,
    /// Per-head sum of `α` over batch × query, and the number of terms.
    pub alpha_sums: Vec<f64>,
    pub alpha_count: usize,
}

impl AttentionStats {
    pub fn qkt_mean(&self) -> f64 {
        if self.qkt_count == 0 {
            0.0
        } else {
            self.qkt_sum / self.qkt_count as f64
        }
    }

    /// Per-head mean of `α`, if this was an affine call.
    pub fn alpha_means(&self) -> Option<Vec<f64>> {
        (self.alpha_count > 0).then(|| {
            self.alpha_sums
                .iter()
                .map(|s| s / self.alpha_count as f64)
                .collect()
        })
    }
}

/// How the scaled scores become weights.
#[derive(Clone, Copy, Debug)]
pub enum Normalization<'a> {
    Softmax,
    /// `sink` holds one logit per head.
    Sink { sink: Var },
    /// `alpha` is `[B, T, H]`; `alpha_ma` is one constant per head.
    Affine { alpha: Var, alpha_ma: &'a [f64] },
}

pub struct AttentionOutput {
    /// `[B, H, T, d_v]`.
    pub output: Var,
    pub stats: AttentionStats,
    pub trace: Option<AttentionTrace>,
}

/// Scaled dot-product attention with the chosen normalisation.
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &Mask,
    norm: Normalization<'_>,
    collect_trace: bool,
) -> Result<AttentionOutput> {
    let sq = tape.shape(q).to_vec();
    let sk = tape.shape(k).to_vec();
    if sq.len() != 4 || sk.len() != 4 {
        return dim_err(format!("attention expects [B,H,T,d] inputs, got {sq:?} and {sk:?}"));
    }
    if sq[3] != sk[3] {
        return dim_err(format!("query width {} differs from key width {}", sq[3], sk[3]));
    }
    let d_k = sq[3];
    let raw = tape.matmul_nt(q, k)?;
    let scores = tape.scale(raw, 1.0 / (d_k as f64).sqrt());
    let (rows, cols) = mask.check(tape.shape(scores))?;

    let mut stats = AttentionStats::default();
    for (r, row) in tape.value(scores).data().chunks(cols).enumerate() {
        let rm = mask.row(r % rows, rows, cols);
        for (j, &x) in row.iter().enumerate() {
            if rm.is_valid(j) {
                stats.qkt_sum += x;
                stats.qkt_count += 1;
            }
        }
    }

    let heads = sq[1];
    let (probs, weights, sink_mass, kind) = match norm {
        Normalization::Softmax => {
            let p = tape.softmax(scores, mask)?;
            (p, p, None, AttentionKind::Baseline)
        }
        Normalization::Sink { sink } => {
            let (w, mass) = tape.softmax_sink(scores, sink, mask)?;
            (w, w, Some(mass), AttentionKind::Sink)
        }
        Normalization::Affine { alpha, alpha_ma } => {
            let p = tape.softmax(scores, mask)?;
            let e = tape.affine_reweight(p, alpha, alpha_ma, mask)?;
            let av = tape.value(alpha).data();
            stats.alpha_sums = vec![0.0; heads];
            for row in av.chunks(heads) {
                for (s, a) in stats.alpha_sums.iter_mut().zip(row) {
                    *s += a;
                }
            }
            stats.alpha_count = av.len() / heads;
            (p, e, None, AttentionKind::Affine)
        }
    };
    let output = tape.matmul(weights, v)?;

    let trace = collect_trace.then(|| {
        let (b, t) = (sq[0], sq[2]);
        let alpha_values = match norm {
            Normalization::Affine { alpha, .. } => {
                let av = tape.value(alpha).data();
                let mut out = vec![0.0; av.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        for h in 0..heads {
                            out[(bi * heads + h) * t + ti] = av[(bi * t + ti) * heads + h];
                        }
                    }
                }
                Some(Tensor::new(vec![b, heads, t], out).expect("alpha shape"))
            }
            _ => None,
        };
        AttentionTrace {
            kind,
            softmax_weights: tape.value(probs).clone(),
            effective_weights: tape.value(weights).clone(),
            qkt_logits: tape.value(scores).clone(),
            alpha_values,
            sink_mass: sink_mass
                .map(|m| Tensor::new(vec![b, heads, t], m).expect("sink mass shape")),
            alpha_ma: match norm {
                Normalization::Affine { alpha_ma, .. } => Some(alpha_ma.to_vec()),
                _ => None,
            },
            mask: mask.clone(),
        }
    });
    Ok(AttentionOutput {
        output,
        stats,
        trace,
    })
}

/// `softmax(QKᵀ/√d_k)·V`.
pub fn sdpa_baseline(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &Mask,
) -> Result<(Var, AttentionTrace)> {
    let out = attend(tape, q, k, v, mask, Normalization::Softmax, true)?;
    Ok((out.output, out.trace.expect("trace requested")))
}

/// Attention with a learnable per-head sink logit `sink` (`[H]`).
pub fn sdpa_sink(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    sink: Var,
    mask: &Mask,
) -> Result<(Var, AttentionTrace)> {
    let out = attend(tape, q, k, v, mask, Normalization::Sink { sink }, true)?;
    Ok((out.output, out.trace.expect("trace requested")))
}

/// Off-by-one attention: a sink frozen at zero.
pub fn sdpa_off_by_one(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &Mask,
) -> Result<(Var, AttentionTrace)> {
    let heads = tape.shape(q).get(1).copied().unwrap_or(1);
    let sink = tape.constant(Tensor::zeros(&[heads]));
    let (out, mut trace) = sdpa_sink(tape, q, k, v, sink, mask)?;
    trace.kind = AttentionKind::OffByOne;
    Ok((out, trace))
}

/// `α = φ(X·W_a)` laid out as `[B, T, H]`.
pub fn affine_scale(tape: &mut Tape, x: Var, w_a: Var, phi: ActivationKind) -> Result<Var> {
    let pre = tape.matmul(x, w_a)?;
    Ok(tape.activation(pre, phi))
}

/// Affine-scaled attention `[α·softmax(QKᵀ/√d_k) + β]·V` with
/// `α = φ(X·W_a)` and `β = (alpha_ma − α)/N`.
///
/// `β` uses the running mean from before this call. In training mode the
/// running mean is then updated from the detached batch × sequence mean of
/// `α` per head.
#[allow(clippy::too_many_arguments)]
pub fn affine_scaled_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    x: Var,
    w_a: Var,
    ema: &mut EmaState,
    phi: ActivationKind,
    mask: &Mask,
    training: bool,
) -> Result<(Var, AttentionTrace)> {
    let heads = tape.shape(q).get(1).copied().unwrap_or(0);
    if ema.heads() != heads {
        return Err(Error::State(format!(
            "running mean has {} heads, attention has {heads}",
            ema.heads()
        )));
    }
    let alpha = affine_scale(tape, x, w_a, phi)?;
    let alpha_ma = ema.alpha_ma.clone();
    let out = attend(
        tape,
        q,
        k,
        v,
        mask,
        Normalization::Affine {
            alpha,
            alpha_ma: &alpha_ma,
        },
        true,
    )?;
    if training {
        let means = out.stats.alpha_means().expect("affine call has alpha");
        ema.update(&means, true)?;
    }
    Ok((out.output, out.trace.expect("trace requested")))
}

/// `attn_out ⊙ φ(X·W_g)`, applied after the heads are merged.
pub fn apply_output_gate(
    tape: &mut Tape,
    attn_out: Var,
    x: Var,
    w_g: Var,
    phi: ActivationKind,
) -> Result<Var> {
    let pre = tape.matmul(x, w_g)?;
    if tape.shape(pre) != tape.shape(attn_out) {
        return dim_err(format!(
            "gate shape {:?} does not match attention output {:?}",
            tape.shape(pre),
            tape.shape(attn_out)
        ));
    }
    let gate = tape.activation(pre, phi);
    tape.mul(attn_out, gate)
}

/// Row-wise `e^{x_i} / (Σ_j e^{x_j} + 1)`, computed as a sink at zero.
pub fn softmax_one_rows(x: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (rows, cols) = mask.check(x.shape())?;
    let mut out = vec![0.0; x.numel()];
    for (r, (xr, or)) in x.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        softmax_row(xr, mask.row(r % rows, rows, cols), Some(0.0), or)?;
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row-wise `e^{x_i} / (Σ_j e^{x_j} + e^{s_h})`. `sink` has one entry per
/// index of axis −3 (one entry for 1-D/2-D input). Returns the weights and
/// the per-row sink mass (shape of `x` without its last axis).
pub fn softmax_sink_rows(x: &Tensor, sink: &[f64], mask: &Mask) -> Result<(Tensor, Tensor)> {
    let shape = x.shape();
    let (rows, cols) = trailing_matrix(shape)?;
    mask.check(shape)?;
    let heads = if shape.len() >= 3 { shape[shape.len() - 3] } else { 1 };
    if sink.len() != heads {
        return dim_err(format!("sink has {} entries for {heads} heads", sink.len()));
    }
    let mut out = vec![0.0; x.numel()];
    let mut mass = Vec::with_capacity(x.numel() / cols.max(1));
    for (r, (xr, or)) in x.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let head = (r / rows) % heads;
        mass.push(softmax_row(xr, mask.row(r % rows, rows, cols), Some(sink[head]), or)?);
    }
    let mass_shape = shape[..shape.len() - 1].to_vec();
    Ok((Tensor::new(shape.to_vec(), out)?, Tensor::new(mass_shape, mass)?))
}
