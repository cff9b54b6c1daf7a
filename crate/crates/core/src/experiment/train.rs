use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{Batch, Corpus};
use crate::diagnostics::{attention_entropy, first_token_mass, qkt_mean, EntropyMode, WeightSource};
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::fsutil::{write_atomic, write_json};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ForwardOptions, TransformerModel};
use crate::numerics::Tape;
use crate::stability::{stability_report, StabilityReport, Window};
use crate::training::{records_to_csv, records_to_jsonl, CheckpointPolicy, LossKind, StepRecord, Trainer};

/// Sequences in the fixed held-out probe used by periodic diagnostics.
const PROBE_SEQUENCES: usize = 4;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Every step of the run, including steps before a resume point.
    pub records: Vec<StepRecord>,
    pub output_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub stability: Option<StabilityReport>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    method: String,
    seed: u64,
    steps_completed: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    final_checkpoint: &'a Path,
    resumed_from: Option<&'a Path>,
    files: Vec<&'static str>,
}

/// Trains per `config` into its (possibly overridden) output directory.
pub fn cmd_train(config: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    run_in(config, &config.resolved_output_dir(), resume)
}

pub(crate) fn run_in(config: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let corpus = Corpus::load(&config.data.path, config.data.max_bytes)?;
    let (train_data, holdout) = corpus.split_holdout(config.data.holdout_fraction)?;
    let model_config = config.model_config();
    let train_config = config.train_config();

    let mut trainer = match resume {
        Some(path) => {
            let trainer = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            if trainer.model.config() != &model_config || trainer.config != train_config {
                return Err(Error::Config(format!(
                    "checkpoint {} was written by a different configuration",
                    path.display()
                )));
            }
            trainer
        }
        None => Trainer::new(TransformerModel::new(model_config)?, train_config)?,
    };
    if config.train.loss_kind == LossKind::ForwardKl {
        let path = config.teacher_checkpoint.as_ref().ok_or_else(|| {
            Error::Config("forward_kl training needs teacher_checkpoint".into())
        })?;
        let teacher = Checkpoint::load(path)?.to_model()?;
        trainer = trainer.with_teacher(teacher)?;
    }
    let probe = match config.diagnostics_every {
        Some(_) => Some(holdout.batch_at(config.seed, 0, PROBE_SEQUENCES, config.train.seq_len)?),
        None => None,
    };

    let mut records = Vec::new();
    if resume.is_some() {
        if let Ok(text) = std::fs::read_to_string(out.join("steps.jsonl")) {
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let r: StepRecord = serde_json::from_str(line)?;
                if r.step <= trainer.step() {
                    records.push(r);
                }
            }
        }
    }

    let policy = CheckpointPolicy {
        dir: out.join("checkpoints"),
        every: config.checkpoint_every,
    };
    let mut diag_csv = String::from("step,layer,entropy,first_token_raw,first_token_effective,qkt_mean\n");
    let mut diag_rows = 0usize;
    if resume.is_some() {
        if let Ok(text) = std::fs::read_to_string(out.join("diagnostics.csv")) {
            for line in text.lines().skip(1) {
                let step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
                if step.is_some_and(|s| s <= trainer.step()) {
                    diag_csv.push_str(line);
                    diag_csv.push('\n');
                    diag_rows += 1;
                }
            }
        }
    }
    let total = config.train.total_steps;
    let result = trainer.run(&train_data, total, Some(&policy), |record, model| {
        records.push(record.clone());
        if let (Some(every), Some(probe)) = (config.diagnostics_every, probe.as_ref()) {
            if record.step % every == 0 {
                probe_diagnostics(model, probe, record.step, &mut diag_csv)?;
                diag_rows += 1;
            }
        }
        Ok(())
    });

    let write_records = |records: &[StepRecord]| -> Result<()> {
        write_atomic(&out.join("steps.csv"), records_to_csv(records).as_bytes())?;
        write_atomic(&out.join("steps.jsonl"), records_to_jsonl(records)?.as_bytes())
    };
    if let Err(e) = result {
        write_records(&records)?;
        return Err(e);
    }
    write_records(&records)?;
    write_json(&out.join("config.json"), config)?;
    let mut files = vec!["steps.csv", "steps.jsonl", "config.json", "manifest.json"];
    if diag_rows > 0 {
        write_atomic(&out.join("diagnostics.csv"), diag_csv.as_bytes())?;
        files.push("diagnostics.csv");
    }
    let series: Vec<f64> = records.iter().map(|r| r.grad_norm).collect();
    let stability = if series.is_empty() {
        None
    } else {
        let report = stability_report(&series, Window::EARLY)?;
        write_json(&out.join("stability.json"), &report)?;
        files.push("stability.json");
        Some(report)
    };
    let final_checkpoint = match trainer.last_checkpoint() {
        Some(p) => p.to_path_buf(),
        None => {
            let p = policy.path_for(trainer.step());
            trainer.save_checkpoint(&p)?;
            p
        }
    };
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            name: &config.name,
            method: config.model.attention.label(),
            seed: config.seed,
            steps_completed: trainer.step(),
            initial_loss: records.first().map(|r| r.loss),
            final_loss: records.last().map(|r| r.loss),
            final_checkpoint: &final_checkpoint,
            resumed_from: resume,
            files,
        },
    )?;
    Ok(TrainOutcome {
        records,
        output_dir: out.to_path_buf(),
        final_checkpoint,
        stability,
    })
}

fn probe_diagnostics(model: &TransformerModel, probe: &Batch, step: usize, csv: &mut String) -> Result<()> {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let out = m.forward(
        &mut tape,
        &probe.inputs,
        probe.batch_size,
        probe.seq_len,
        ForwardOptions::eval().traced(),
    )?;
    let traces = &out.traces;
    let entropy = attention_entropy(traces, EntropyMode::Distribution).per_layer;
    let raw = first_token_mass(traces, WeightSource::Raw)?;
    let eff = first_token_mass(traces, WeightSource::Effective)?;
    let qkt = qkt_mean(traces);
    for l in 0..traces.len() {
        let _ = writeln!(csv, "{step},{l},{},{},{},{qkt}", entropy[l], raw[l], eff[l]);
    }
    Ok(())
}
