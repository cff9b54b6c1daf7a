//! Pre-norm decoder-only transformer with a selectable attention variant.

pub mod checkpoint;
mod config;
mod params;

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

pub use config::{ModelConfig, Positional};
pub use params::{count_params, ParamCount};

use crate::attention::{
    affine_scale, apply_output_gate, attend, AttentionKind, AttentionStats, AttentionTrace,
    EmaState, Normalization,
};
use crate::error::{Error, Result};
use crate::numerics::{
    finite_difference_check, GradCheckOptions, GradCheckReport, Gradients, Mask, Tape, Tensor, Var,
};
use crate::rng::substream;
use params::{param_specs, Init};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub decay: bool,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Updates the running means of the affine scale after each layer.
    pub training: bool,
    pub collect_traces: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            training: true,
            collect_traces: false,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions::default()
    }

    pub fn traced(mut self) -> Self {
        self.collect_traces = true;
        self
    }
}

pub struct ForwardOutput {
    /// `[batch, seq, vocab]`.
    pub logits: Var,
    /// One tape variable per model parameter, in model order.
    pub param_vars: Vec<Var>,
    /// Per layer, when requested.
    pub traces: Vec<AttentionTrace>,
    pub stats: Vec<AttentionStats>,
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    config: ModelConfig,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    ema: Vec<EmaState>,
}

impl TransformerModel {
    /// Fresh model; each parameter draws from its own seed substream, so
    /// models that differ only in attention variant share every common
    /// parameter value.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = param_specs(&config)
            .into_iter()
            .map(|spec| {
                let n = spec.numel();
                let data = match spec.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal(std) => {
                        let mut rng = substream(config.seed, &format!("init/{}", spec.name));
                        let normal = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| normal.sample(&mut rng)).collect()
                    }
                };
                Ok(Parameter {
                    tensor: Tensor::new(spec.shape, data)?,
                    name: spec.name,
                    decay: spec.decay,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ema = if config.attention.kind == AttentionKind::Affine {
            (0..config.num_layers)
                .map(|_| EmaState::new(config.num_heads, config.rho))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self::assemble(config, params, ema))
    }

    fn assemble(config: ModelConfig, params: Vec<Parameter>, ema: Vec<EmaState>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        TransformerModel {
            config,
            params,
            index,
            ema,
        }
    }

    /// Rebuilds a model from stored tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_parts(
        config: ModelConfig,
        mut tensors: HashMap<String, Tensor>,
        ema: Vec<EmaState>,
    ) -> Result<Self> {
        config.validate()?;
        let params = param_specs(&config)
            .into_iter()
            .map(|spec| {
                let t = tensors
                    .remove(&spec.name)
                    .ok_or_else(|| Error::Format(format!("missing parameter '{}'", spec.name)))?;
                if t.shape() != spec.shape.as_slice() {
                    return Err(Error::Format(format!(
                        "parameter '{}' has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )));
                }
                Ok(Parameter {
                    name: spec.name,
                    tensor: t,
                    decay: spec.decay,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let want_ema = if config.attention.kind == AttentionKind::Affine {
            config.num_layers
        } else {
            0
        };
        if ema.len() != want_ema || ema.iter().any(|e| e.heads() != config.num_heads) {
            return Err(Error::Format(format!(
                "expected {want_ema} running-mean states with {} heads",
                config.num_heads
            )));
        }
        Ok(Self::assemble(config, params, ema))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].tensor)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Running means of the affine scale, one per layer (empty unless the
    /// variant is affine).
    pub fn ema(&self) -> &[EmaState] {
        &self.ema
    }

    pub fn ema_mut(&mut self) -> &mut [EmaState] {
        &mut self.ema
    }

    /// Next-token logits for `ids` laid out as `[batch, seq]`.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        ids: &[usize],
        batch: usize,
        seq: usize,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let c = self.config.clone();
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::Input(format!(
                "{} token ids do not form a non-empty [{batch} x {seq}] block",
                ids.len()
            )));
        }
        if seq > c.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                c.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocab {}",
                c.vocab_size
            )));
        }

        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let t = Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec());
                tape.param(t.expect("parameter shape"))
            })
            .collect();
        let index = &self.index;
        let p = |name: &str| param_vars[index[name]];

        let mut x = tape.embedding(p("tok_emb"), ids, &[batch, seq])?;
        if c.positional == Positional::LearnedAbsolute {
            let positions: Vec<usize> = (0..seq).collect();
            let pos = tape.embedding(p("pos_emb"), &positions, &[seq])?;
            x = tape.add(x, pos)?;
        }

        let mask = Mask::Causal;
        let heads = c.num_heads;
        let mut traces = Vec::new();
        let mut stats = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let name = |n: &str| format!("layers.{l}.{n}");
            let h = tape.rms_norm(x, p(&name("norm1")), c.norm_eps)?;
            let mut q = tape.matmul(h, p(&name("wq")))?;
            let mut k = tape.matmul(h, p(&name("wk")))?;
            let v = tape.matmul(h, p(&name("wv")))?;
            q = tape.split_heads(q, heads)?;
            k = tape.split_heads(k, heads)?;
            let v = tape.split_heads(v, heads)?;
            if c.positional == Positional::Rotary {
                q = tape.rope(q, c.rope_base)?;
                k = tape.rope(k, c.rope_base)?;
            }

            let alpha_ma = self.ema.get(l).map(|e| e.alpha_ma.clone());
            let norm = match c.attention.kind {
                AttentionKind::Baseline => Normalization::Softmax,
                AttentionKind::OffByOne => Normalization::Sink {
                    sink: tape.constant(Tensor::zeros(&[heads])),
                },
                AttentionKind::Sink => Normalization::Sink {
                    sink: p(&name("sink")),
                },
                AttentionKind::Affine => Normalization::Affine {
                    alpha: affine_scale(tape, h, p(&name("w_alpha")), c.phi_alpha)?,
                    alpha_ma: alpha_ma.as_deref().expect("affine model has running means"),
                },
            };
            let out = attend(tape, q, k, v, &mask, norm, opts.collect_traces)?;
            if opts.training && c.attention.kind == AttentionKind::Affine {
                let means = out.stats.alpha_means().expect("affine stats");
                self.ema[l].update(&means, true)?;
            }

            let mut o = tape.merge_heads(out.output)?;
            if c.attention.gated {
                o = apply_output_gate(tape, o, h, p(&name("w_gate")), c.phi_gate)?;
            }
            let o = tape.matmul(o, p(&name("wo")))?;
            x = tape.add(x, o)?;

            let h2 = tape.rms_norm(x, p(&name("norm2")), c.norm_eps)?;
            let u = tape.matmul(h2, p(&name("w_up")))?;
            let u = tape.activation(u, c.mlp_activation);
            let u = tape.matmul(u, p(&name("w_down")))?;
            x = tape.add(x, u)?;

            if let Some(mut t) = out.trace {
                t.kind = c.attention.kind;
                traces.push(t);
            }
            stats.push(out.stats);
        }
        let xf = tape.rms_norm(x, p("norm_f"), c.norm_eps)?;
        let logits = if c.tie_embeddings {
            tape.matmul_nt(xf, p("tok_emb"))?
        } else {
            tape.matmul(xf, p("lm_head"))?
        };
        Ok(ForwardOutput {
            logits,
            param_vars,
            traces,
            stats,
        })
    }

    /// Moves gradients from a backward pass into each parameter's grad slot.
    pub fn store_grads(&mut self, grads: &mut Gradients, param_vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(param_vars) {
            grads.write_to(v, &mut p.tensor)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Global L2 norm over all parameter gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Finite-difference check of the gradient of the mean next-token
/// cross-entropy with respect to each named parameter. Runs in eval mode
/// so the running means stay fixed while parameters are perturbed.
pub fn check_param_gradients(
    model: &TransformerModel,
    ids: &[usize],
    targets: &[usize],
    batch: usize,
    seq: usize,
    names: &[&str],
    opts: GradCheckOptions,
) -> Result<Vec<(String, GradCheckReport)>> {
    let mut m = model.clone();
    let loss = |m: &mut TransformerModel| -> Result<f64> {
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, ids, batch, seq, ForwardOptions::eval())?;
        let l = tape.cross_entropy(out.logits, targets)?;
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, ids, batch, seq, ForwardOptions::eval())?;
    let l = tape.cross_entropy(out.logits, targets)?;
    let mut grads = tape.backward(l)?;
    names
        .iter()
        .map(|&name| {
            let idx = m
                .param_index(name)
                .ok_or_else(|| Error::Input(format!("no parameter named '{name}'")))?;
            let analytic = grads
                .take(out.param_vars[idx])
                .unwrap_or_else(|| vec![0.0; m.params[idx].tensor.numel()]);
            let report = finite_difference_check(&analytic, opts, |i, delta| {
                let original = m.params[idx].tensor.data()[i];
                m.params[idx].tensor.data_mut()[i] = original + delta;
                let value = loss(&mut m);
                m.params[idx].tensor.data_mut()[i] = original;
                value
            })?;
            Ok((name.to_string(), report))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: AttentionKind, gated: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 17,
            model_dim: 8,
            num_heads: 2,
            num_layers: 2,
            max_seq_len: 6,
            seed: 3,
            ..ModelConfig::default()
        }
        .with_attention(kind, gated)
    }

    fn logits(model: &mut TransformerModel, ids: &[usize], seq: usize) -> Tensor {
        let mut tape = Tape::new();
        let out = model
            .forward(&mut tape, ids, ids.len() / seq, seq, ForwardOptions::eval())
            .unwrap();
        tape.value(out.logits).clone()
    }

    #[test]
    fn single_token_shape() {
        let mut m = TransformerModel::new(tiny(AttentionKind::Affine, true)).unwrap();
        let l = logits(&mut m, &[5], 1);
        assert_eq!(l.shape(), &[1, 1, 17]);
        assert!(l.is_finite());
    }

    #[test]
    fn same_seed_same_logits() {
        let ids = [1, 2, 3, 4, 5, 6];
        let a = logits(&mut TransformerModel::new(tiny(AttentionKind::Sink, false)).unwrap(), &ids, 3);
        let b = logits(&mut TransformerModel::new(tiny(AttentionKind::Sink, false)).unwrap(), &ids, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn bad_inputs() {
        let mut m = TransformerModel::new(tiny(AttentionKind::Baseline, false)).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            m.forward(&mut tape, &[17], 1, 1, ForwardOptions::eval()),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            m.forward(&mut tape, &[0; 7], 1, 7, ForwardOptions::eval()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn training_forward_updates_ema_once_per_layer() {
        let mut m = TransformerModel::new(tiny(AttentionKind::Affine, false)).unwrap();
        let mut tape = Tape::new();
        m.forward(&mut tape, &[1, 2, 3], 1, 3, ForwardOptions::train())
            .unwrap();
        for e in m.ema() {
            assert_eq!(e.step_count, 1);
            // α ≈ φ(0) = 0.5 at init, so alpha_ma ≈ 0.1·0.5
            for &v in &e.alpha_ma {
                assert!((0.0..=0.1).contains(&v));
            }
        }
        let mut tape = Tape::new();
        m.forward(&mut tape, &[1, 2, 3], 1, 3, ForwardOptions::eval())
            .unwrap();
        assert!(m.ema().iter().all(|e| e.step_count == 1));
    }

    #[test]
    fn rotary_model_runs() {
        let mut c = tiny(AttentionKind::Affine, false);
        c.positional = Positional::Rotary;
        let mut m = TransformerModel::new(c).unwrap();
        assert!(m.param("pos_emb").is_none());
        assert!(logits(&mut m, &[1, 2, 3, 4], 4).is_finite());
    }
}
