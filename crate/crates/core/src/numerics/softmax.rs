//! Masked, max-subtracted row softmax kernels shared by the pure functions
//! and the tape ops.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Which entries of the trailing `[rows × cols]` matrix take part in a row.
/// Leading dimensions broadcast.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    /// Every entry is valid.
    All,
    /// Query `r` may see keys `0..=r + (cols - rows)`.
    Causal,
    /// Explicit keep-flags of shape `[rows × cols]`.
    Keep {
        rows: usize,
        cols: usize,
        keep: Vec<bool>,
    },
}

/// Valid entries of one row.
#[derive(Clone, Copy, Debug)]
pub(crate) enum RowMask<'a> {
    Prefix(usize),
    Keep(&'a [bool]),
}

impl RowMask<'_> {
    #[inline]
    pub(crate) fn is_valid(&self, col: usize) -> bool {
        match self {
            RowMask::Prefix(n) => col < *n,
            RowMask::Keep(k) => k[col],
        }
    }
}

impl Mask {
    pub fn causal() -> Self {
        Mask::Causal
    }

    pub fn from_bools(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "mask has {} entries, expected {rows}x{cols}",
                keep.len()
            )));
        }
        Ok(Mask::Keep { rows, cols, keep })
    }

    /// Row mask for row `r` of a trailing matrix with `rows × cols` entries.
    pub(crate) fn row(&self, r: usize, rows: usize, cols: usize) -> RowMask<'_> {
        match self {
            Mask::All => RowMask::Prefix(cols),
            Mask::Causal => RowMask::Prefix((r + 1 + cols.saturating_sub(rows)).min(cols)),
            Mask::Keep { cols: c, keep, .. } => RowMask::Keep(&keep[r * c..(r + 1) * c]),
        }
    }

    pub fn is_valid(&self, r: usize, col: usize, rows: usize, cols: usize) -> bool {
        self.row(r, rows, cols).is_valid(col)
    }

    pub(crate) fn check(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let (rows, cols) = trailing_matrix(shape)?;
        if let Mask::Keep { rows: mr, cols: mc, .. } = self {
            if *mr != rows || *mc != cols {
                return Err(Error::Dimension(format!(
                    "mask is {mr}x{mc} but input trailing shape is {rows}x{cols}"
                )));
            }
        }
        Ok((rows, cols))
    }
}

pub(crate) fn trailing_matrix(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        0 => Err(Error::Dimension("softmax needs at least one axis".into())),
        1 => Ok((1, shape[0])),
        n => Ok((shape[n - 2], shape[n - 1])),
    }
}

/// Writes the (optionally sink-augmented) softmax of one row into `out`
/// and returns the sink mass. Masked entries are set to exactly zero.
///
/// With `sink = Some(s)` the denominator gains `e^s`; the max is taken over
/// the valid entries and `s` together.
pub(crate) fn softmax_row(
    x: &[f64],
    mask: RowMask<'_>,
    sink: Option<f64>,
    out: &mut [f64],
) -> Result<f64> {
    let mut m = f64::NEG_INFINITY;
    let mut any = false;
    for (j, &v) in x.iter().enumerate() {
        if mask.is_valid(j) {
            any = true;
            if v > m {
                m = v;
            }
        }
    }
    if let Some(s) = sink {
        if s > m {
            m = s;
        }
    } else if !any {
        return Err(Error::DegenerateRow(
            "every entry of a softmax row is masked".into(),
        ));
    }
    if !m.is_finite() {
        return Err(Error::Evaluation(format!("non-finite softmax row maximum {m}")));
    }
    let mut denom = 0.0;
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        if mask.is_valid(j) {
            let e = (v - m).exp();
            *o = e;
            denom += e;
        } else {
            *o = 0.0;
        }
    }
    let sink_term = sink.map_or(0.0, |s| (s - m).exp());
    denom += sink_term;
    let inv = 1.0 / denom;
    for (j, o) in out.iter_mut().enumerate() {
        if mask.is_valid(j) {
            *o *= inv;
        }
    }
    Ok(sink_term * inv)
}

/// Row-wise masked softmax over the last axis.
pub fn softmax_rows(x: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (rows, cols) = mask.check(x.shape())?;
    let mut out = vec![0.0; x.numel()];
    for (r, (xr, or)) in x
        .data()
        .chunks(cols.max(1))
        .zip(out.chunks_mut(cols.max(1)))
        .enumerate()
    {
        softmax_row(xr, mask.row(r % rows.max(1), rows, cols), None, or)?;
    }
    Tensor::new(x.shape().to_vec(), out)
}
