use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// How attention scores are normalised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Plain softmax.
    Baseline,
    /// Softmax with `+1` in the denominator (a sink frozen at `s = 0`).
    OffByOne,
    /// Softmax with a learnable per-head `e^s` in the denominator.
    Sink,
    /// Input-dependent scale `α` and compensating bias `β` on top of softmax.
    Affine,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [
        AttentionKind::Baseline,
        AttentionKind::OffByOne,
        AttentionKind::Sink,
        AttentionKind::Affine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Baseline => "baseline",
            AttentionKind::OffByOne => "off_by_one",
            AttentionKind::Sink => "sink",
            AttentionKind::Affine => "affine",
        }
    }

    /// Whether token weights may sum to less than one because of a sink term.
    pub fn has_sink(self) -> bool {
        matches!(self, AttentionKind::OffByOne | AttentionKind::Sink)
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttentionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention variant '{s}'")))
    }
}

/// Normalisation kind plus an optional output gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionVariant {
    pub kind: AttentionKind,
    #[serde(default)]
    pub gated: bool,
}

impl AttentionVariant {
    pub fn new(kind: AttentionKind, gated: bool) -> Self {
        AttentionVariant { kind, gated }
    }

    pub fn baseline() -> Self {
        Self::new(AttentionKind::Baseline, false)
    }

    /// All eight kind × gate combinations.
    pub fn all() -> Vec<AttentionVariant> {
        AttentionKind::ALL
            .into_iter()
            .flat_map(|k| [Self::new(k, false), Self::new(k, true)])
            .collect()
    }

    /// Short label such as `affine` or `sink+gated`.
    pub fn label(&self) -> String {
        if self.gated {
            format!("{}+gated", self.kind)
        } else {
            self.kind.to_string()
        }
    }
}

impl Default for AttentionVariant {
    fn default() -> Self {
        Self::baseline()
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}
