//! Value-level loss functions over logit tensors.
//!
//! The differentiable versions live on the tape; these wrappers evaluate
//! them without recording a graph the caller has to manage.

use crate::error::Result;
use crate::numerics::{Tape, Tensor};

/// Mean next-token cross-entropy of `logits` (`[..., V]`) against `targets`.
pub fn cross_entropy_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, targets)?;
    Ok(tape.value(loss).item())
}

/// `T² · mean KL(softmax(teacher/T) ‖ softmax(student/T))` over rows.
pub fn forward_kl_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student.clone());
    let loss = tape.forward_kl(s, teacher, temperature)?;
    Ok(tape.value(loss).item())
}
