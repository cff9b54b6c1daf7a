use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionVariant;
use crate::error::{Error, Result};
use crate::experiment::train::run_in;
use crate::experiment::ExperimentConfig;
use crate::fsutil::{write_atomic, write_json};
use crate::stability::StabilityReport;
use crate::training::StepRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub stability: StabilityReport,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub steps: usize,
    pub methods: Vec<MethodSummary>,
    /// Method with the lowest final loss (first on ties).
    pub lowest_final_loss: String,
}

/// The config with everything attention-internal reset, for comparison.
fn outside_attention(c: &ExperimentConfig) -> ExperimentConfig {
    let defaults = crate::model::ModelConfig::default();
    let mut c = c.clone();
    c.name = String::new();
    c.output_dir = PathBuf::new();
    c.model.attention = AttentionVariant::baseline();
    c.model.phi_alpha = defaults.phi_alpha;
    c.model.phi_gate = defaults.phi_gate;
    c.model.rho = defaults.rho;
    c
}

fn method_labels(configs: &[ExperimentConfig]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    configs
        .iter()
        .map(|c| {
            let base = c.model.attention.label();
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                base
            } else {
                format!("{base}_{n}")
            }
        })
        .collect()
}

/// Trains every config (which must differ only inside the attention block)
/// and writes merged per-step series plus a stability summary.
pub fn cmd_compare(configs: &[ExperimentConfig], out: &Path) -> Result<CompareSummary> {
    if configs.len() < 2 {
        return Err(Error::Config("compare needs at least two configs".into()));
    }
    for c in configs {
        c.validate()?;
    }
    let reference = outside_attention(&configs[0]);
    for (i, c) in configs.iter().enumerate().skip(1) {
        if outside_attention(c) != reference {
            return Err(Error::Config(format!(
                "config {} differs from config 0 outside the attention settings",
                i
            )));
        }
    }

    let labels = method_labels(configs);
    let mut runs: Vec<Vec<StepRecord>> = Vec::with_capacity(configs.len());
    let mut methods = Vec::with_capacity(configs.len());
    for (c, label) in configs.iter().zip(&labels) {
        let dir = out.join(label);
        let outcome = run_in(c, &dir, None)?;
        let (first, last) = match (outcome.records.first(), outcome.records.last()) {
            (Some(f), Some(l)) => (f.loss, l.loss),
            _ => return Err(Error::State(format!("run '{label}' produced no steps"))),
        };
        methods.push(MethodSummary {
            method: label.clone(),
            initial_loss: first,
            final_loss: last,
            stability: outcome.stability.expect("non-empty run has a stability report"),
            output_dir: dir,
        });
        runs.push(outcome.records);
    }

    type Field = fn(&StepRecord) -> f64;
    let series: [(&str, Field); 3] = [
        ("loss.csv", |r| r.loss),
        ("grad_norm.csv", |r| r.grad_norm),
        ("qkt_mean.csv", |r| r.qkt_mean),
    ];
    let steps = runs.iter().map(Vec::len).max().unwrap_or(0);
    for (file, field) in series {
        let mut csv = String::from("step");
        for l in &labels {
            let _ = write!(csv, ",{l}");
        }
        csv.push('\n');
        for i in 0..steps {
            let _ = write!(csv, "{}", i + 1);
            for run in &runs {
                match run.get(i) {
                    Some(r) => {
                        let _ = write!(csv, ",{}", field(r));
                    }
                    None => csv.push(','),
                }
            }
            csv.push('\n');
        }
        write_atomic(&out.join(file), csv.as_bytes())?;
    }

    let lowest = methods
        .iter()
        .fold(None::<&MethodSummary>, |best, m| match best {
            Some(b) if b.final_loss <= m.final_loss => Some(b),
            _ => Some(m),
        })
        .map(|m| m.method.clone())
        .unwrap_or_default();
    let summary = CompareSummary {
        steps,
        methods,
        lowest_final_loss: lowest,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;

    #[test]
    fn labels_are_unique() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.model = b.model.with_attention(AttentionKind::Affine, true);
        assert_eq!(
            method_labels(&[a.clone(), b, a]),
            vec!["baseline", "affine+gated", "baseline_2"]
        );
    }

    #[test]
    fn rejects_non_attention_differences() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.train.lr *= 2.0;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(cmd_compare(&[a.clone(), b], dir.path()), Err(Error::Config(_))));
        assert!(matches!(cmd_compare(&[a], dir.path()), Err(Error::Config(_))));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
