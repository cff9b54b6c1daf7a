use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-head exponential running mean of the affine scale `α`.
///
/// Starts at zero; each training step applies
/// `alpha_ma ← ρ·alpha_ma + (1 − ρ)·mean(α)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub alpha_ma: Vec<f64>,
    pub rho: f64,
    pub step_count: u64,
}

impl EmaState {
    pub fn new(heads: usize, rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {rho}")));
        }
        Ok(EmaState {
            alpha_ma: vec![0.0; heads],
            rho,
            step_count: 0,
        })
    }

    pub fn heads(&self) -> usize {
        self.alpha_ma.len()
    }

    /// One update from the detached batch mean of `α` per head. Only valid
    /// in training mode.
    pub fn update(&mut self, batch_mean_alpha: &[f64], training: bool) -> Result<()> {
        if !training {
            return Err(Error::State(
                "running mean of alpha is frozen in evaluation mode".into(),
            ));
        }
        if batch_mean_alpha.len() != self.alpha_ma.len() {
            return Err(Error::State(format!(
                "batch mean has {} heads, running mean has {}",
                batch_mean_alpha.len(),
                self.alpha_ma.len()
            )));
        }
        if let Some(bad) = batch_mean_alpha.iter().find(|v| !v.is_finite()) {
            return Err(Error::State(format!("non-finite batch mean of alpha: {bad}")));
        }
        for (ma, &m) in self.alpha_ma.iter_mut().zip(batch_mean_alpha) {
            *ma = self.rho * *ma + (1.0 - self.rho) * m;
        }
        self.step_count += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_update_from_zero() {
        let mut ema = EmaState::new(1, 0.9).unwrap();
        ema.update(&[1.0], true).unwrap();
        assert!((ema.alpha_ma[0] - 0.1).abs() < 1e-15);
        assert_eq!(ema.step_count, 1);
    }

    #[test]
    fn constant_input_follows_geometric_series() {
        for rho in [0.0, 0.5, 0.9] {
            let mut ema = EmaState::new(2, rho).unwrap();
            let c = 0.37;
            for t in 1..=40 {
                ema.update(&[c, c], true).unwrap();
                let want = c * (1.0 - f64::powi(rho, t));
                for v in &ema.alpha_ma {
                    assert!((v - want).abs() < 1e-12, "rho {rho} t {t}");
                }
            }
        }
    }

    #[test]
    fn zero_momentum_tracks_latest() {
        let mut ema = EmaState::new(1, 0.0).unwrap();
        ema.update(&[0.3], true).unwrap();
        ema.update(&[0.8], true).unwrap();
        assert_eq!(ema.alpha_ma[0], 0.8);
    }

    #[test]
    fn eval_mode_and_bad_shapes_are_rejected() {
        let mut ema = EmaState::new(2, 0.9).unwrap();
        assert!(matches!(ema.update(&[1.0, 1.0], false), Err(Error::State(_))));
        assert!(matches!(ema.update(&[1.0], true), Err(Error::State(_))));
        assert_eq!(ema.step_count, 0);
        assert!(EmaState::new(2, 1.5).is_err());
    }
}
