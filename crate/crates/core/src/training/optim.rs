//! AdamW with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::Parameter;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Parameter]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Restores saved moments; lengths must match the parameter layout.
    pub fn set_state(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let lens = |x: &[Vec<f64>]| x.iter().map(Vec::len).collect::<Vec<_>>();
        if lens(&m) != lens(&self.m) || lens(&v) != lens(&self.v) {
            return Err(Error::Format("optimizer moments do not match parameters".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update using each parameter's stored gradient. Parameters are
    /// left untouched if any gradient is missing or non-finite.
    pub fn step(&mut self, params: &mut [Parameter], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Optimizer(format!(
                "{} parameters but optimizer tracks {}",
                params.len(),
                self.m.len()
            )));
        }
        for p in params.iter() {
            let g = p
                .tensor
                .grad()
                .ok_or_else(|| Error::Optimizer(format!("no gradient for '{}'", p.name)))?;
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Optimizer(format!("non-finite gradient for '{}'", p.name)));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { lr * weight_decay } else { 0.0 };
            let g = p.tensor.grad().expect("checked above").to_vec();
            for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *w -= lr * update + decay * *w;
            }
        }
        Ok(())
    }
}
