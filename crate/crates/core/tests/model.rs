//! Whole-model behaviour: shared weights across variants, reductions
//! between variants, causality and full-parameter gradients.

use affattn::activations::ActivationKind;
use affattn::attention::{AttentionKind, AttentionVariant};
use affattn::model::{check_param_gradients, ForwardOptions, ModelConfig, Positional, TransformerModel};
use affattn::numerics::{GradCheckOptions, Tape, Tensor};

fn config(variant: AttentionVariant) -> ModelConfig {
    ModelConfig {
        vocab_size: 29,
        model_dim: 16,
        num_heads: 4,
        num_layers: 2,
        max_seq_len: 10,
        attention: variant,
        init_std: 0.2,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn ids(n: usize, vocab: usize, salt: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 7 + salt * 13 + 3) % vocab).collect()
}

fn logits(model: &mut TransformerModel, ids: &[usize], batch: usize, seq: usize) -> Tensor {
    let mut tape = Tape::new();
    let out = model
        .forward(&mut tape, ids, batch, seq, ForwardOptions::eval())
        .unwrap();
    tape.value(out.logits).clone()
}

#[test]
fn variants_share_every_common_parameter() {
    let base = TransformerModel::new(config(AttentionVariant::baseline())).unwrap();
    for v in AttentionVariant::all() {
        let m = TransformerModel::new(config(v)).unwrap();
        for p in base.params() {
            assert_eq!(m.param(&p.name).unwrap().data(), p.tensor.data(), "{v}: {}", p.name);
        }
        let extra: Vec<&str> = m
            .params()
            .iter()
            .filter(|p| base.param(&p.name).is_none())
            .map(|p| p.name.rsplit('.').next().unwrap())
            .collect();
        for name in extra {
            assert!(["sink", "w_alpha", "w_gate"].contains(&name), "{v}: unexpected {name}");
        }
    }
}

#[test]
fn affine_with_constant_half_scale_is_half_strength_baseline() {
    // Sigmoid with W_a = 0 gives α ≡ 0.5; with alpha_ma = 0.5 the bias
    // vanishes, so attention is exactly half the softmax output.
    let mut affine_cfg = config(AttentionVariant::new(AttentionKind::Affine, false));
    affine_cfg.phi_alpha = ActivationKind::Sigmoid;
    let mut affine = TransformerModel::new(affine_cfg).unwrap();
    for l in 0..2 {
        affine
            .param_mut(&format!("layers.{l}.w_alpha"))
            .unwrap()
            .data_mut()
            .fill(0.0);
    }
    for e in affine.ema_mut() {
        e.alpha_ma.fill(0.5);
    }
    let mut base = TransformerModel::new(config(AttentionVariant::baseline())).unwrap();
    for l in 0..2 {
        base.param_mut(&format!("layers.{l}.wo"))
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|w| *w *= 0.5);
    }
    let x = ids(20, 29, 1);
    let a = logits(&mut affine, &x, 2, 10);
    let b = logits(&mut base, &x, 2, 10);
    assert!(a.max_abs_diff(&b) < 1e-12, "{}", a.max_abs_diff(&b));
}

#[test]
fn sink_far_below_every_score_matches_baseline() {
    let mut sink = TransformerModel::new(config(AttentionVariant::new(AttentionKind::Sink, false))).unwrap();
    for l in 0..2 {
        sink.param_mut(&format!("layers.{l}.sink"))
            .unwrap()
            .data_mut()
            .fill(-60.0);
    }
    let mut base = TransformerModel::new(config(AttentionVariant::baseline())).unwrap();
    let x = ids(30, 29, 2);
    let a = logits(&mut sink, &x, 3, 10);
    let b = logits(&mut base, &x, 3, 10);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn no_variant_leaks_future_tokens() {
    for positional in [Positional::LearnedAbsolute, Positional::Rotary] {
        for v in AttentionVariant::all() {
            let mut m = TransformerModel::new(ModelConfig {
                positional,
                ..config(v)
            })
            .unwrap();
            for e in m.ema_mut() {
                e.alpha_ma.fill(0.7);
            }
            let seq = 10;
            let x = ids(seq, 29, 3);
            let before = logits(&mut m, &x, 1, seq);
            for j in [0, 4, 9] {
                let mut y = x.clone();
                y[j] = (y[j] + 5) % 29;
                let after = logits(&mut m, &y, 1, seq);
                let vocab = 29;
                for pos in 0..seq {
                    let row = |t: &Tensor| t.data()[pos * vocab..(pos + 1) * vocab].to_vec();
                    let changed = row(&before) != row(&after);
                    if pos < j {
                        assert!(!changed, "{v} {positional:?}: position {pos} saw token {j}");
                    } else if pos == j {
                        assert!(changed, "{v}: position {pos} ignores its own token");
                    }
                }
            }
        }
    }
}

#[test]
fn training_forward_updates_each_running_mean_once() {
    let mut m = TransformerModel::new(config(AttentionVariant::new(AttentionKind::Affine, true))).unwrap();
    let x = ids(20, 29, 4);
    for step in 1..=3u64 {
        let mut tape = Tape::new();
        m.forward(&mut tape, &x, 2, 10, ForwardOptions::train()).unwrap();
        assert!(m.ema().iter().all(|e| e.step_count == step));
    }
    let frozen = m.ema().to_vec();
    let mut tape = Tape::new();
    m.forward(&mut tape, &x, 2, 10, ForwardOptions::eval()).unwrap();
    assert_eq!(m.ema(), frozen.as_slice());
}

#[test]
fn every_parameter_gradient_matches_finite_differences() {
    for v in [
        AttentionVariant::new(AttentionKind::Affine, true),
        AttentionVariant::new(AttentionKind::Sink, true),
    ] {
        let mut m = TransformerModel::new(ModelConfig {
            vocab_size: 11,
            model_dim: 8,
            num_heads: 2,
            max_seq_len: 5,
            init_std: 0.3,
            ..config(v)
        })
        .unwrap();
        for p in m.params_mut() {
            if p.name.contains("norm") || p.name.ends_with("sink") {
                let n = p.tensor.numel();
                for (i, x) in p.tensor.data_mut().iter_mut().enumerate() {
                    *x += 0.3 * ((i as f64 + 1.0) / n as f64 - 0.5);
                }
            }
        }
        for e in m.ema_mut() {
            e.alpha_ma = vec![0.3, 0.6];
        }
        let x = ids(10, 11, 5);
        let y = ids(10, 11, 6);
        let names: Vec<String> = m.params().iter().map(|p| p.name.clone()).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let reports = check_param_gradients(&m, &x, &y, 2, 5, &names, GradCheckOptions::default()).unwrap();
        assert_eq!(reports.len(), names.len());
        for (name, r) in reports {
            assert!(r.passed, "{v} {name}: rel err {:.3e}", r.max_rel_error);
        }
    }
}
