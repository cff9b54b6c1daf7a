//! Gradient-norm statistics and robust spike detection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open range of step indices `[start, end)` into a series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    /// The early-training window, steps 0 to 500.
    pub const EARLY: Window = Window { start: 0, end: 500 };

    pub fn new(start: usize, end: usize) -> Self {
        Window { start, end }
    }

    /// Clamps to a series of length `len`.
    pub fn clamp(self, len: usize) -> Window {
        Window {
            start: self.start.min(len),
            end: self.end.min(len),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityStats {
    pub mean: f64,
    pub std: f64,
    pub variance: f64,
    /// `std / mean`; `None` when the mean is zero.
    pub cv: Option<f64>,
    pub series_len: usize,
    pub window: Window,
}

/// Population statistics of the raw (unsmoothed) values inside `window`.
pub fn grad_norm_stats(series: &[f64], window: Window) -> Result<StabilityStats> {
    if window.start >= window.end || window.end > series.len() {
        return Err(Error::Input(format!(
            "window [{}, {}) is empty or exceeds a series of length {}",
            window.start,
            window.end,
            series.len()
        )));
    }
    let xs = &series[window.start..window.end];
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let variance = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = variance.sqrt();
    Ok(StabilityStats {
        mean,
        std,
        variance,
        cv: (mean != 0.0).then(|| std / mean),
        series_len: xs.len(),
        window,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeReport {
    pub k: f64,
    pub median: f64,
    pub mad: f64,
    pub tau: f64,
    /// Indices into the series whose value exceeds `tau`.
    pub spike_steps: Vec<usize>,
    pub count: usize,
}

/// Median, averaging the two central values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Counts values strictly above `median + k·MAD`.
pub fn count_spikes(series: &[f64], k: f64) -> Result<SpikeReport> {
    if series.is_empty() {
        return Err(Error::Input("cannot count spikes in an empty series".into()));
    }
    if !(k > 0.0) {
        return Err(Error::Input(format!("k must be positive, got {k}")));
    }
    let med = median(series);
    let deviations: Vec<f64> = series.iter().map(|x| (x - med).abs()).collect();
    let mad = median(&deviations);
    let tau = med + k * mad;
    let spike_steps: Vec<usize> = series
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > tau)
        .map(|(i, _)| i)
        .collect();
    Ok(SpikeReport {
        k,
        median: med,
        mad,
        tau,
        count: spike_steps.len(),
        spike_steps,
    })
}

/// Stats plus spike counts at `k = 6` and `k = 9` for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub window: Window,
    pub mean: f64,
    pub std: f64,
    pub variance: f64,
    pub cv: Option<f64>,
    pub spikes: Spikes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spikes {
    pub k6: SpikeReport,
    pub k9: SpikeReport,
}

/// Report over `window` (clamped to the series); spikes are counted
/// within the same window.
pub fn stability_report(series: &[f64], window: Window) -> Result<StabilityReport> {
    let window = window.clamp(series.len());
    let stats = grad_norm_stats(series, window)?;
    let slice = &series[window.start..window.end];
    let shift = |mut r: SpikeReport| {
        r.spike_steps.iter_mut().for_each(|s| *s += window.start);
        r
    };
    Ok(StabilityReport {
        window,
        mean: stats.mean,
        std: stats.std,
        variance: stats.variance,
        cv: stats.cv,
        spikes: Spikes {
            k6: shift(count_spikes(slice, 6.0)?),
            k9: shift(count_spikes(slice, 9.0)?),
        },
    })
}
