//! Property tests for the invariants that hold for every input.

use affattn::activations::{linear_clipping, sigmoid};
use affattn::attention::{softmax_sink_rows, AttentionTrace, AttentionKind};
use affattn::data::Corpus;
use affattn::diagnostics::{attention_entropy, entropy, EntropyMode, Histogram};
use affattn::model::checkpoint::Checkpoint;
use affattn::model::{ModelConfig, TransformerModel};
use affattn::numerics::{softmax_rows, Mask, Tensor};
use affattn::stability::{count_spikes, grad_norm_stats, stability_report, Window};
use affattn::training::{lr_at, TrainConfig};
use proptest::prelude::*;

fn rows_and_logits() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..9).prop_flat_map(|n| (Just(n), prop::collection::vec(-30.0f64..30.0, n * n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn causal_softmax_rows_are_distributions((n, xs) in rows_and_logits()) {
        let t = Tensor::new(vec![n, n], xs).unwrap();
        let p = softmax_rows(&t, &Mask::Causal).unwrap();
        for (q, row) in p.data().chunks(n).enumerate() {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row[q + 1..].iter().all(|&w| w == 0.0));
            prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn sink_rows_and_sink_mass_sum_to_one((n, xs) in rows_and_logits(), sink in -40.0f64..40.0) {
        let t = Tensor::new(vec![n, n], xs).unwrap();
        let (w, mass) = softmax_sink_rows(&t, &[sink], &Mask::Causal).unwrap();
        for (q, row) in w.data().chunks(n).enumerate() {
            let s: f64 = row.iter().sum();
            prop_assert!((s + mass.data()[q] - 1.0).abs() < 1e-12);
            prop_assert!(s < 1.0 + 1e-15);
        }
    }

    #[test]
    fn linear_clipping_is_monotone_lipschitz_and_symmetric(a in -20.0f64..20.0, b in -20.0f64..20.0) {
        let (fa, fb) = (linear_clipping(a), linear_clipping(b));
        if a <= b {
            prop_assert!(fa <= fb);
        }
        prop_assert!((fa - fb).abs() <= 0.1 * (a - b).abs() + 1e-15);
        prop_assert!((linear_clipping(-a) - (1.0 - fa)).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&sigmoid(a)));
    }

    #[test]
    fn entropy_lies_between_zero_and_log_support(ws in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let total: f64 = ws.iter().sum();
        prop_assume!(total > 0.0);
        let p: Vec<f64> = ws.iter().map(|w| w / total).collect();
        let h = entropy(&p);
        let support = p.iter().filter(|&&x| x > 0.0).count() as f64;
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= support.ln() + 1e-12);
    }

    #[test]
    fn trace_entropy_is_bounded_by_log_context(ws in prop::collection::vec(0.01f64..1.0, 36)) {
        // 6 × 6 causal rows, normalized in place.
        let mut w = ws.clone();
        for (q, row) in w.chunks_mut(6).enumerate() {
            row[q + 1..].iter_mut().for_each(|x| *x = 0.0);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let t = Tensor::new(vec![1, 1, 6, 6], w).unwrap();
        let trace = AttentionTrace {
            kind: AttentionKind::Baseline,
            softmax_weights: t.clone(),
            effective_weights: t,
            qkt_logits: Tensor::zeros(&[1, 1, 6, 6]),
            alpha_values: None,
            sink_mass: None,
            alpha_ma: None,
            mask: Mask::Causal,
        };
        let e = attention_entropy(&[trace], EntropyMode::Distribution).per_layer[0];
        let bound = (1..=6).map(|n| (n as f64).ln()).sum::<f64>() / 6.0;
        prop_assert!(e >= 0.0 && e <= bound + 1e-12);
    }

    #[test]
    fn spike_thresholds_are_affine_equivariant(
        xs in prop::collection::vec(0.0f64..5.0, 3..200),
        a in 0.1f64..20.0,
        b in -10.0f64..10.0,
    ) {
        let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        for k in [6.0, 9.0] {
            let (r, s) = (count_spikes(&xs, k).unwrap(), count_spikes(&ys, k).unwrap());
            let tol = 1e-9 * (a * r.tau.abs() + b.abs() + 1.0);
            prop_assert!((s.median - (a * r.median + b)).abs() <= tol);
            prop_assert!((s.mad - a * r.mad).abs() <= tol);
            prop_assert!((s.tau - (a * r.tau + b)).abs() <= tol);
        }
        let (k6, k9) = (count_spikes(&xs, 6.0).unwrap(), count_spikes(&xs, 9.0).unwrap());
        prop_assert!(k9.count <= k6.count);
        prop_assert!(k9.spike_steps.iter().all(|s| k6.spike_steps.contains(s)));
    }

    #[test]
    fn window_stats_scale_with_the_series(xs in prop::collection::vec(0.1f64..5.0, 2..100), a in 0.5f64..4.0) {
        let ys: Vec<f64> = xs.iter().map(|x| a * x).collect();
        let w = Window::new(0, xs.len());
        let (sx, sy) = (grad_norm_stats(&xs, w).unwrap(), grad_norm_stats(&ys, w).unwrap());
        prop_assert!((sy.mean - a * sx.mean).abs() < 1e-9);
        prop_assert!((sy.std - a * sx.std).abs() < 1e-9);
        // The coefficient of variation is scale-free.
        prop_assert!((sy.cv.unwrap() - sx.cv.unwrap()).abs() < 1e-9);
        let rep = stability_report(&xs, Window::EARLY).unwrap();
        prop_assert_eq!(rep.window.end, xs.len().min(500));
    }

    #[test]
    fn histograms_count_every_sample(xs in prop::collection::vec(-3.0f64..3.0, 1..300), bins in 1usize..60) {
        let h = Histogram::from_samples(&xs, bins).unwrap();
        prop_assert_eq!(h.total(), xs.len());
        prop_assert_eq!(h.edges.len(), h.counts.len() + 1);
        prop_assert!(h.edges.windows(2).all(|e| e[0] <= e[1]));
    }

    #[test]
    fn batches_are_shifted_windows_of_the_corpus(
        seed in any::<u64>(),
        index in 0u64..10_000,
        batch in 1usize..5,
        seq in 1usize..40,
    ) {
        let text: Vec<u8> = (0..500u32).map(|i| (i * 31 % 251) as u8).collect();
        let corpus = Corpus::from_bytes(text.clone()).unwrap();
        let b = corpus.batch_at(seed, index, batch, seq).unwrap();
        prop_assert_eq!(&b, &corpus.batch_at(seed, index, batch, seq).unwrap());
        for (i, &off) in b.offsets.iter().enumerate() {
            prop_assert!(off + seq < text.len());
            for j in 0..seq {
                prop_assert_eq!(b.inputs[i * seq + j], usize::from(text[off + j]));
                prop_assert_eq!(b.targets[i * seq + j], usize::from(text[off + j + 1]));
            }
        }
    }

    #[test]
    fn learning_rate_stays_within_its_peak(
        warmup in 1usize..50,
        total in 50usize..400,
        frac in 0.0f64..1.0,
        step in 0usize..500,
    ) {
        let c = TrainConfig {
            lr: 3e-3,
            warmup_steps: warmup,
            total_steps: total,
            decay_fraction: frac,
            ..TrainConfig::default()
        };
        let lr = lr_at(step, &c);
        prop_assert!((0.0..=c.lr).contains(&lr));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), kind in 0usize..4, gated in any::<bool>()) {
        let config = ModelConfig {
            vocab_size: 13,
            model_dim: 8,
            num_heads: 2,
            num_layers: 2,
            max_seq_len: 6,
            seed,
            ..ModelConfig::default()
        }
        .with_attention(AttentionKind::ALL[kind], gated);
        let mut model = TransformerModel::new(config).unwrap();
        for (i, e) in model.ema_mut().iter_mut().enumerate() {
            e.alpha_ma = vec![0.1 * i as f64 + 0.3, 1.0 / 3.0];
            e.step_count = 17;
        }
        let ck = Checkpoint::from_model(&model, 42);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let restored = back.to_model().unwrap();
        prop_assert_eq!(restored.config(), model.config());
        prop_assert_eq!(restored.ema(), model.ema());
        for p in model.params() {
            prop_assert_eq!(restored.param(&p.name).unwrap().data(), p.tensor.data());
        }
    }
}
