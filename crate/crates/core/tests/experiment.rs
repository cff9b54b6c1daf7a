//! End-to-end train / analyze / compare runs on a small generated corpus.

use std::fs;
use std::path::{Path, PathBuf};

use affattn::attention::{AttentionKind, AttentionVariant};
use affattn::data::synth::generate_text;
use affattn::experiment::{cmd_analyze, cmd_compare, cmd_train, AnalyzeOptions, AnalyzeSummary, ExperimentConfig};
use affattn::training::LossKind;
use affattn::Error;

fn write_corpus(dir: &Path) -> PathBuf {
    let path = dir.join("corpus.txt");
    fs::write(&path, generate_text(2, 60_000)).unwrap();
    path
}

fn config(kind: AttentionKind, corpus: &Path, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_json(
        r#"{
            "name": "tiny",
            "seed": 4,
            "model": {"model_dim": 16, "num_heads": 2, "num_layers": 2, "max_seq_len": 32},
            "train": {"total_steps": 20, "warmup_steps": 4, "batch_size": 2, "seq_len": 32, "lr": 0.01},
            "diagnostics_every": 5,
            "checkpoint_every": 10
        }"#,
    )
    .unwrap();
    c.model.attention = AttentionVariant::new(kind, false);
    c.data.path = corpus.to_path_buf();
    c.output_dir = out.to_path_buf();
    c
}

fn analyze_opts(corpus: &Path, out: &Path) -> AnalyzeOptions {
    AnalyzeOptions {
        data_path: corpus.to_path_buf(),
        out_dir: out.to_path_buf(),
        n_sequences: 3,
        ..AnalyzeOptions::default()
    }
}

#[test]
fn train_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path());
    let out = tmp.path().join("run");
    let outcome = cmd_train(&config(AttentionKind::Affine, &corpus, &out), None).unwrap();
    assert_eq!(outcome.records.len(), 20);
    for f in ["steps.csv", "steps.jsonl", "config.json", "diagnostics.csv", "stability.json", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    for step in [10, 20] {
        assert!(out.join(format!("checkpoints/step_{step:06}.ckpt")).is_file());
    }
    let steps = fs::read_to_string(out.join("steps.csv")).unwrap();
    assert!(steps.starts_with("step,loss,grad_norm,lr,qkt_mean,alpha_mean_l0,alpha_mean_l1\n"));
    assert_eq!(steps.lines().count(), 21);
    // Four probes of two layers each.
    let diag = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert_eq!(diag.lines().count(), 1 + 4 * 2);
    let saved: ExperimentConfig = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved.model.attention.kind, AttentionKind::Affine);
}

#[test]
fn resuming_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    cmd_train(&config(AttentionKind::Sink, &corpus, &a), None).unwrap();
    fs::create_dir_all(b.join("checkpoints")).unwrap();
    for f in ["steps.jsonl", "diagnostics.csv", "checkpoints/step_000010.ckpt"] {
        fs::copy(a.join(f), b.join(f)).unwrap();
    }
    let resumed = cmd_train(
        &config(AttentionKind::Sink, &corpus, &b),
        Some(&b.join("checkpoints/step_000010.ckpt")),
    )
    .unwrap();
    assert_eq!(resumed.records.len(), 20);
    for f in ["steps.csv", "diagnostics.csv", "stability.json", "checkpoints/step_000020.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    // A checkpoint from a different configuration is refused.
    let mut other = config(AttentionKind::Sink, &corpus, &b);
    other.train.lr = 0.02;
    assert!(matches!(
        cmd_train(&other, Some(&b.join("checkpoints/step_000010.ckpt"))),
        Err(Error::Config(_))
    ));
}

#[test]
fn analysis_of_baseline_puts_all_query_mass_at_one() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path());
    let run = tmp.path().join("run");
    let outcome = cmd_train(&config(AttentionKind::Baseline, &corpus, &run), None).unwrap();
    let out = tmp.path().join("analysis");
    let summary = cmd_analyze(&outcome.final_checkpoint, &analyze_opts(&corpus, &out)).unwrap();
    assert_eq!(summary.checkpoint_step, 20);
    assert_eq!(summary.layers, vec![0, 1]);
    assert!((summary.per_query_mass_mean - 1.0).abs() < 1e-12);

    let hist = fs::read_to_string(out.join("per_query_mass.csv")).unwrap();
    let rows: Vec<&str> = hist.lines().skip(1).collect();
    assert_eq!(rows.len(), 1, "{hist}");
    let fields: Vec<f64> = rows[0].split(',').map(|x| x.parse().unwrap()).collect();
    assert!((fields[0] - 1.0).abs() < 1e-12 && (fields[1] - 1.0).abs() < 1e-12);
    assert_eq!(fields[2] as usize, 2 * 3 * 32);

    let heat = fs::read_to_string(out.join("heatmap_layer0.csv")).unwrap();
    assert_eq!(heat.lines().count(), 30);
    assert!(heat.lines().all(|l| l.split(',').count() == 30));
    let heads = fs::read_to_string(out.join("head_weights.csv")).unwrap();
    assert_eq!(heads.lines().count(), 1 + 2 * 2);
    for f in &summary.files {
        assert!(out.join(f).is_file(), "{f}");
    }
    let manifest: AnalyzeSummary = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest, summary);
}

#[test]
fn analysis_honours_layer_filter_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path());
    let run = tmp.path().join("run");
    let outcome = cmd_train(&config(AttentionKind::Affine, &corpus, &run), None).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let opts = |out: &Path| AnalyzeOptions {
        layers: Some(vec![1]),
        block: 8,
        ..analyze_opts(&corpus, out)
    };
    cmd_analyze(&outcome.final_checkpoint, &opts(&a)).unwrap();
    cmd_analyze(&outcome.final_checkpoint, &opts(&b)).unwrap();
    assert!(a.join("heatmap_layer1.csv").is_file());
    assert!(!a.join("heatmap_layer0.csv").exists());
    let entropy = fs::read_to_string(a.join("entropy.csv")).unwrap();
    assert_eq!(entropy.lines().skip(1).map(|l| &l[..2]).collect::<Vec<_>>(), vec!["1,"]);
    for f in ["entropy.csv", "first_token.csv", "per_query_mass.csv", "head_weights.csv", "heatmap_layer1.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let bad = AnalyzeOptions {
        layers: Some(vec![2]),
        ..analyze_opts(&corpus, &tmp.path().join("c"))
    };
    assert!(cmd_analyze(&outcome.final_checkpoint, &bad).is_err());
}

#[test]
fn distillation_run_reads_its_teacher() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path());
    let teacher = cmd_train(&config(AttentionKind::Baseline, &corpus, &tmp.path().join("t")), None).unwrap();
    let mut student = config(AttentionKind::Affine, &corpus, &tmp.path().join("s"));
    student.train.loss_kind = LossKind::ForwardKl;
    assert!(matches!(cmd_train(&student, None), Err(Error::Config(_))));
    student.teacher_checkpoint = Some(teacher.final_checkpoint);
    let run = cmd_train(&student, None).unwrap();
    assert!(run.records.iter().all(|r| r.loss.is_finite() && r.loss >= -1e-12));
}

#[test]
fn compare_merges_series_by_method() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path());
    let configs: Vec<ExperimentConfig> = [AttentionKind::Baseline, AttentionKind::OffByOne]
        .into_iter()
        .map(|k| config(k, &corpus, Path::new("ignored")))
        .collect();
    let out = tmp.path().join("cmp");
    let summary = cmd_compare(&configs, &out).unwrap();
    assert_eq!(summary.steps, 20);
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,baseline,off_by_one\n"));
    assert!(out.join("baseline/steps.csv").is_file());
    assert!(out.join("off_by_one/steps.csv").is_file());
    assert!(["baseline", "off_by_one"].contains(&summary.lowest_final_loss.as_str()));
}
