//! Losses, optimizer, learning-rate schedule and the training loop.

mod losses;
mod optim;
mod schedule;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use losses::{cross_entropy_loss, forward_kl_loss};
pub use optim::AdamW;
pub use schedule::lr_at;

use crate::data::{Batch, Corpus};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ForwardOptions, TransformerModel};
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// Distillation towards a teacher model's next-token distribution.
    ForwardKl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub decay_fraction: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub loss_kind: LossKind,
    pub kd_temperature: f64,
    /// Global gradient-norm clipping threshold.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            weight_decay: 0.1,
            warmup_steps: 100,
            total_steps: 300,
            decay_fraction: 0.1,
            batch_size: 8,
            seq_len: 128,
            loss_kind: LossKind::CrossEntropy,
            kd_temperature: 1.0,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return fail(format!(
                "need 0 <= warmup_steps < total_steps, got {} and {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(0.0..1.0).contains(&self.decay_fraction) {
            return fail(format!("decay_fraction must lie in [0, 1), got {}", self.decay_fraction));
        }
        if !(self.kd_temperature > 0.0) {
            return fail(format!("kd_temperature must be positive, got {}", self.kd_temperature));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("lr and weight_decay must be non-negative".into());
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return fail("batch_size and seq_len must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Metrics of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Global L2 gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Mean scaled pre-normalization score over all layers.
    pub qkt_mean: f64,
    /// Per-layer mean affine scale; empty for other variants.
    #[serde(default)]
    pub alpha_mean: Vec<f64>,
}

/// `step,loss,grad_norm,lr,qkt_mean,alpha_mean_l0,...` with one row per record.
pub fn records_to_csv(records: &[StepRecord]) -> String {
    let layers = records.iter().map(|r| r.alpha_mean.len()).max().unwrap_or(0);
    let mut out = String::from("step,loss,grad_norm,lr,qkt_mean");
    for l in 0..layers {
        let _ = write!(out, ",alpha_mean_l{l}");
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{},{},{},{},{}", r.step, r.loss, r.grad_norm, r.lr, r.qkt_mean);
        for l in 0..layers {
            match r.alpha_mean.get(l) {
                Some(a) => {
                    let _ = write!(out, ",{a}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub fn records_to_jsonl(records: &[StepRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before rescaling.
pub fn clip_gradients(model: &mut TransformerModel, max_norm: f64) -> Result<f64> {
    let norm = model.grad_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in model.params_mut() {
            if let Some(g) = p.tensor.grad() {
                let g = g.iter().map(|g| g * scale).collect();
                p.tensor.set_grad(g)?;
            }
        }
    }
    Ok(norm)
}

/// Where and how often the loop writes checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    /// Save after every `every` steps (and always after the last one).
    pub every: Option<usize>,
}

impl CheckpointPolicy {
    pub fn path_for(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step_{step:06}.ckpt"))
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    optimizer_t: u64,
    train: TrainConfig,
}

/// Owns the model, optimizer state and step counter of one run.
pub struct Trainer {
    pub model: TransformerModel,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    step: usize,
    teacher: Option<TransformerModel>,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: TransformerModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.seq_len > model.config().max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds the model's max_seq_len {}",
                config.seq_len,
                model.config().max_seq_len
            )));
        }
        Ok(Trainer {
            optimizer: AdamW::new(model.params()),
            model,
            config,
            step: 0,
            teacher: None,
            last_checkpoint: None,
        })
    }

    /// Teacher for [`LossKind::ForwardKl`]; it is only ever run in eval mode.
    pub fn with_teacher(mut self, teacher: TransformerModel) -> Result<Self> {
        let (s, t) = (self.model.config(), teacher.config());
        if s.vocab_size != t.vocab_size || t.max_seq_len < self.config.seq_len {
            return Err(Error::Config(
                "teacher must share the vocabulary and cover the training sequence length".into(),
            ));
        }
        self.teacher = Some(teacher);
        Ok(self)
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let state: TrainerState = serde_json::from_value(ck.header.extra.clone())
            .map_err(|e| Error::Format(format!("checkpoint lacks trainer state: {e}")))?;
        let model = ck.to_model()?;
        let mut trainer = Trainer::new(model, state.train)?;
        let moments = |kind: &str| {
            trainer
                .model
                .params()
                .iter()
                .map(|p| {
                    let name = format!("adam.{kind}.{}", p.name);
                    ck.tensor(&name)
                        .map(|t| t.data().to_vec())
                        .ok_or_else(|| Error::Format(format!("missing {name}")))
                })
                .collect::<Result<Vec<_>>>()
        };
        let (m, v) = (moments("m")?, moments("v")?);
        trainer.optimizer.set_state(state.optimizer_t, m, v)?;
        trainer.step = ck.header.step;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model, self.step);
        ck.header.extra = serde_json::to_value(TrainerState {
            optimizer_t: self.optimizer.t,
            train: self.config.clone(),
        })?;
        let params = self.model.params();
        for (kind, moments) in [
            ("m", self.optimizer.first_moments()),
            ("v", self.optimizer.second_moments()),
        ] {
            for (p, data) in params.iter().zip(moments) {
                ck.push(
                    format!("adam.{kind}.{}", p.name),
                    Tensor::new(p.tensor.shape().to_vec(), data.clone())?,
                );
            }
        }
        Ok(ck)
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    fn abort(&self, step: usize, reason: String) -> Error {
        Error::TrainingAborted {
            step,
            reason,
            last_good: self.last_checkpoint.clone(),
        }
    }

    /// Forward/backward on `batch` without updating anything but gradients
    /// (and, in training mode, the running means).
    fn loss_and_grads(&mut self, batch: &Batch) -> Result<(f64, Vec<crate::attention::AttentionStats>)> {
        let mut tape = Tape::new();
        let out = self.model.forward(
            &mut tape,
            &batch.inputs,
            batch.batch_size,
            batch.seq_len,
            ForwardOptions::train(),
        )?;
        let loss = match self.config.loss_kind {
            LossKind::CrossEntropy => tape.cross_entropy(out.logits, &batch.targets)?,
            LossKind::ForwardKl => {
                let teacher = self
                    .teacher
                    .as_mut()
                    .ok_or_else(|| Error::Config("forward_kl loss needs a teacher model".into()))?;
                let mut t_tape = Tape::new();
                let t_out = teacher.forward(
                    &mut t_tape,
                    &batch.inputs,
                    batch.batch_size,
                    batch.seq_len,
                    ForwardOptions::eval(),
                )?;
                let teacher_logits = t_tape.value(t_out.logits).clone();
                tape.forward_kl(out.logits, &teacher_logits, self.config.kd_temperature)?
            }
        };
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Ok((loss_value, out.stats));
        }
        let mut grads = tape.backward(loss)?;
        self.model.store_grads(&mut grads, &out.param_vars)?;
        Ok((loss_value, out.stats))
    }

    /// Runs one optimizer step on the batch the data stream assigns to it.
    pub fn train_step(&mut self, data: &Corpus) -> Result<StepRecord> {
        let step = self.step + 1;
        let batch = data.batch_at(self.config.seed, step as u64, self.config.batch_size, self.config.seq_len)?;
        let lr = lr_at(step, &self.config);
        let (loss, stats) = self.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(self.abort(step, format!("non-finite loss {loss}")));
        }
        let grad_norm = self.model.grad_norm();
        if !grad_norm.is_finite() {
            return Err(self.abort(step, "non-finite gradient norm".into()));
        }
        if let Some(clip) = self.config.grad_clip {
            clip_gradients(&mut self.model, clip)?;
        }
        self.optimizer
            .step(self.model.params_mut(), lr, self.config.weight_decay)
            .map_err(|e| self.abort(step, e.to_string()))?;
        self.model.zero_grads();
        self.step = step;

        let (qkt_sum, qkt_count) = stats
            .iter()
            .fold((0.0, 0usize), |(s, n), st| (s + st.qkt_sum, n + st.qkt_count));
        let alpha_mean = stats
            .iter()
            .filter_map(|st| {
                let n = st.alpha_count * st.alpha_sums.len();
                (n > 0).then(|| st.alpha_sums.iter().sum::<f64>() / n as f64)
            })
            .collect();
        Ok(StepRecord {
            step,
            loss,
            grad_norm,
            lr,
            qkt_mean: if qkt_count > 0 { qkt_sum / qkt_count as f64 } else { 0.0 },
            alpha_mean,
        })
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    /// Trains until `until` steps are complete (capped at `total_steps`),
    /// calling `on_step` after every step.
    pub fn run(
        &mut self,
        data: &Corpus,
        until: usize,
        checkpoints: Option<&CheckpointPolicy>,
        mut on_step: impl FnMut(&StepRecord, &TransformerModel) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let until = until.min(self.config.total_steps);
        let mut records = Vec::with_capacity(until.saturating_sub(self.step));
        while self.step < until {
            let record = self.train_step(data)?;
            on_step(&record, &self.model)?;
            records.push(record);
            if let Some(policy) = checkpoints {
                let due = policy.every.is_some_and(|n| n > 0 && self.step % n == 0);
                if due || self.step == until {
                    self.save_checkpoint(&policy.path_for(self.step))?;
                }
            }
        }
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::model::ModelConfig;

    fn tiny_model(kind: AttentionKind) -> TransformerModel {
        TransformerModel::new(
            ModelConfig {
                vocab_size: 256,
                model_dim: 16,
                num_heads: 2,
                num_layers: 1,
                max_seq_len: 16,
                ..ModelConfig::default()
            }
            .with_attention(kind, false),
        )
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            warmup_steps: 2,
            total_steps: 10,
            batch_size: 2,
            seq_len: 16,
            ..TrainConfig::default()
        }
    }

    fn corpus() -> Corpus {
        Corpus::from_bytes("the cat sat on the mat. ".repeat(20).into_bytes()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_steps: 300,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            decay_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            kd_temperature: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn records_are_numbered_and_csv_has_alpha_columns() {
        let mut t = Trainer::new(tiny_model(AttentionKind::Affine), tiny_config()).unwrap();
        let recs = t.run(&corpus(), 5, None, |_, _| Ok(())).unwrap();
        assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
        assert!(recs.iter().all(|r| r.alpha_mean.len() == 1));
        assert!(recs.iter().all(|r| (0.0..=1.0).contains(&r.alpha_mean[0])));
        let csv = records_to_csv(&recs);
        assert!(csv.starts_with("step,loss,grad_norm,lr,qkt_mean,alpha_mean_l0\n"));
        assert_eq!(csv.lines().count(), 6);
        assert_eq!(records_to_jsonl(&recs).unwrap().lines().count(), 5);
        assert_eq!(t.model.ema()[0].step_count, 5);
    }

    #[test]
    fn clipping_bounds_applied_norm() {
        let config = TrainConfig {
            grad_clip: Some(1e-3),
            ..tiny_config()
        };
        let mut t = Trainer::new(tiny_model(AttentionKind::Baseline), config).unwrap();
        let batch = corpus().batch_at(0, 1, 2, 16).unwrap();
        t.loss_and_grads(&batch).unwrap();
        let direct: f64 = t
            .model
            .params()
            .iter()
            .flat_map(|p| p.tensor.grad().unwrap().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let pre = clip_gradients(&mut t.model, 1e-3).unwrap();
        assert!((pre - direct).abs() <= 1e-10 * direct);
        assert!(pre > 1e-3);
        assert!(t.model.grad_norm() <= 1e-3 + 1e-12);
        t.model.zero_grads();
        let r = t.train_step(&corpus()).unwrap();
        assert!(r.grad_norm > 1e-3);
    }

    #[test]
    fn kd_needs_teacher() {
        let config = TrainConfig {
            loss_kind: LossKind::ForwardKl,
            ..tiny_config()
        };
        let mut t = Trainer::new(tiny_model(AttentionKind::Baseline), config.clone()).unwrap();
        assert!(matches!(t.train_step(&corpus()), Err(Error::Config(_))));
        let mut t = Trainer::new(tiny_model(AttentionKind::Sink), config)
            .unwrap()
            .with_teacher(tiny_model(AttentionKind::Baseline))
            .unwrap();
        let r = t.train_step(&corpus()).unwrap();
        assert!(r.loss >= 0.0 && r.loss.is_finite());
    }

    #[test]
    fn non_finite_loss_aborts_with_last_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let policy = CheckpointPolicy {
            dir: dir.path().to_path_buf(),
            every: Some(2),
        };
        let mut t = Trainer::new(tiny_model(AttentionKind::Baseline), tiny_config()).unwrap();
        t.run(&corpus(), 2, Some(&policy), |_, _| Ok(())).unwrap();
        t.model.param_mut("lm_head").unwrap().data_mut()[0] = f64::NAN;
        let before = t.model.params().to_vec();
        match t.train_step(&corpus()) {
            Err(Error::TrainingAborted { step, last_good, .. }) => {
                assert_eq!(step, 3);
                assert_eq!(last_good, Some(policy.path_for(2)));
            }
            other => panic!("expected abort, got {:?}", other.map(|r| r.step)),
        }
        assert_eq!(t.step(), 2);
        let after: Vec<_> = t.model.params().iter().map(|p| p.tensor.data().to_vec()).collect();
        let before: Vec<_> = before.iter().map(|p| p.tensor.data().to_vec()).collect();
        assert_eq!(format!("{after:?}"), format!("{before:?}"));
    }
}
