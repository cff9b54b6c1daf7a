//! Scalar nonlinearities for the output gate, the affine scale and the MLP.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Half-width of the linear region of [`linear_clipping`].
pub const CLIP_EDGE: f64 = 5.0;
const CLIP_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Sigmoid,
    LinearClipping,
    Gelu,
}

impl ActivationKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::LinearClipping => linear_clipping(x),
            ActivationKind::Gelu => gelu(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => sigmoid_derivative(x),
            ActivationKind::LinearClipping => linear_clipping_derivative(x),
            ActivationKind::Gelu => gelu_derivative(x),
        }
    }

    /// Whether every output lies in `[0, 1]`.
    pub fn is_unit_bounded(self) -> bool {
        !matches!(self, ActivationKind::Gelu)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::LinearClipping => "linear_clipping",
            ActivationKind::Gelu => "gelu",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "linear_clipping" => Ok(ActivationKind::LinearClipping),
            "gelu" => Ok(ActivationKind::Gelu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// 0 for `x ≤ −5`, `0.1·x + 0.5` on `(−5, 5)`, 1 for `x ≥ 5`.
pub fn linear_clipping(x: f64) -> f64 {
    if x <= -CLIP_EDGE {
        0.0
    } else if x >= CLIP_EDGE {
        1.0
    } else {
        CLIP_SLOPE * x + 0.5
    }
}

/// Slope 0.1 strictly inside the linear region; the clip points belong to
/// the flat side.
pub fn linear_clipping_derivative(x: f64) -> f64 {
    if x > -CLIP_EDGE && x < CLIP_EDGE {
        CLIP_SLOPE
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
