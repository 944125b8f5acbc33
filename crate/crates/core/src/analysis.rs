//! Synchrony analysis between two respiration traces: resampling onto
//! a shared grid, Pearson correlation, lag estimation and
//! synchronized-section detection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Analysis grid rate.
pub const ANALYSIS_RATE_HZ: f64 = 100.0;
/// Default cross-correlation search half-width.
pub const DEFAULT_MAX_LAG_MS: u64 = 5000;
/// Sliding window length for section detection.
pub const SECTION_WINDOW_MS: u64 = 30_000;
/// Sliding window step.
pub const SECTION_STEP_MS: u64 = 1000;
/// Per-window correlation threshold for a synchronized section.
pub const SECTION_R_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("traces do not overlap in time")]
    NoOverlap,
    #[error("series too short: need at least {need} samples, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("series is constant; correlation undefined")]
    ConstantSeries,
    #[error("timestamps must be strictly increasing")]
    NonMonotonic,
}

/// A timestamped scalar series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub t_ms: f64,
    pub value: f64,
}

/// Two traces resampled onto one uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    /// Grid start time.
    pub start_ms: f64,
    /// Grid interval.
    pub step_ms: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl AlignedPair {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn end_ms(&self) -> f64 {
        self.start_ms + self.step_ms * (self.len().saturating_sub(1)) as f64
    }
}

/// Synchrony summary for a pair of traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyncReport {
    pub pearson_r: f64,
    /// Lag of y relative to x in milliseconds.
    pub lag_ms: i64,
    /// Bounds of the longest synchronized section, if any.
    pub section: Option<[f64; 2]>,
}

fn interp(points: &[TracePoint], t: f64) -> f64 {
    // Binary search for the bracketing segment; t is inside the span.
    let mut lo = 0usize;
    let mut hi = points.len() - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if points[mid].t_ms <= t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = points[lo];
    let b = points[hi];
    if t <= a.t_ms {
        return a.value;
    }
    if t >= b.t_ms {
        return b.value;
    }
    let frac = (t - a.t_ms) / (b.t_ms - a.t_ms);
    a.value + frac * (b.value - a.value)
}

/// Linearly resample both traces onto the overlap of their spans at
/// `rate_hz`.
pub fn resample_align(
    x: &[TracePoint],
    y: &[TracePoint],
    rate_hz: f64,
) -> Result<AlignedPair, AnalysisError> {
    for series in [x, y] {
        if series.len() < 2 {
            return Err(AnalysisError::TooShort {
                need: 2,
                got: series.len(),
            });
        }
        if series.windows(2).any(|w| w[1].t_ms <= w[0].t_ms) {
            return Err(AnalysisError::NonMonotonic);
        }
    }
    let start = x[0].t_ms.max(y[0].t_ms);
    let end = x[x.len() - 1].t_ms.min(y[y.len() - 1].t_ms);
    if end <= start {
        return Err(AnalysisError::NoOverlap);
    }
    let step = 1000.0 / rate_hz;
    let n = ((end - start) / step).floor() as usize + 1;
    if n < 2 {
        return Err(AnalysisError::NoOverlap);
    }
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let t = start + i as f64 * step;
        xs.push(interp(x, t));
        ys.push(interp(y, t));
    }
    Ok(AlignedPair {
        start_ms: start,
        step_ms: step,
        x: xs,
        y: ys,
    })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(AnalysisError::TooShort {
            need: 2,
            got: n.min(y.len()),
        });
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ConstantSeries);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Lag of y relative to x maximizing the cross-correlation, searched
/// over integer sample shifts within ±`max_lag_ms`. Ties break toward
/// the smaller |lag|.
pub fn estimate_lag(pair: &AlignedPair, max_lag_ms: u64) -> Result<i64, AnalysisError> {
    let n = pair.len();
    let max_shift = ((max_lag_ms as f64 / pair.step_ms).floor() as usize).min(n.saturating_sub(2));
    let mut best_r = f64::NEG_INFINITY;
    let mut best_shift: i64 = 0;
    for shift in -(max_shift as i64)..=(max_shift as i64) {
        // Positive shift: y lags x by `shift` samples.
        let (xs, ys) = if shift >= 0 {
            let s = shift as usize;
            (&pair.x[..n - s], &pair.y[s..])
        } else {
            let s = (-shift) as usize;
            (&pair.x[s..], &pair.y[..n - s])
        };
        let r = match pearson(xs, ys) {
            Ok(r) => r,
            Err(AnalysisError::ConstantSeries) => continue,
            Err(e) => return Err(e),
        };
        let better = r > best_r + 1e-12
            || ((r - best_r).abs() <= 1e-12 && shift.abs() < best_shift.abs());
        if better {
            best_r = r;
            best_shift = shift;
        }
    }
    if best_r == f64::NEG_INFINITY {
        return Err(AnalysisError::ConstantSeries);
    }
    Ok((best_shift as f64 * pair.step_ms).round() as i64)
}

/// The pair with y shifted back by `lag_ms` so both series line up.
pub fn compensate_lag(pair: &AlignedPair, lag_ms: i64) -> AlignedPair {
    let shift = (lag_ms as f64 / pair.step_ms).round() as i64;
    let n = pair.len() as i64;
    if shift == 0 || shift.abs() >= n {
        return pair.clone();
    }
    let (x, y, start) = if shift > 0 {
        let s = shift as usize;
        (
            pair.x[..pair.len() - s].to_vec(),
            pair.y[s..].to_vec(),
            pair.start_ms,
        )
    } else {
        let s = (-shift) as usize;
        (
            pair.x[s..].to_vec(),
            pair.y[..pair.len() - s].to_vec(),
            pair.start_ms + s as f64 * pair.step_ms,
        )
    };
    AlignedPair {
        start_ms: start,
        step_ms: pair.step_ms,
        x,
        y,
    }
}

/// Per-window correlation for section scoring.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WindowScore {
    pub start_ms: f64,
    pub r: f64,
}

/// Correlations of sliding `SECTION_WINDOW_MS` windows at
/// `SECTION_STEP_MS` steps over an (already lag-compensated) pair.
pub fn window_scores(pair: &AlignedPair) -> Result<Vec<WindowScore>, AnalysisError> {
    let win = (SECTION_WINDOW_MS as f64 / pair.step_ms).round() as usize;
    let step = (SECTION_STEP_MS as f64 / pair.step_ms).round() as usize;
    if pair.len() < win {
        return Err(AnalysisError::TooShort {
            need: win,
            got: pair.len(),
        });
    }
    let mut out = Vec::new();
    let mut i = 0usize;
    while i + win <= pair.len() {
        let r = match pearson(&pair.x[i..i + win], &pair.y[i..i + win]) {
            Ok(r) => r,
            // A flat window cannot demonstrate synchrony.
            Err(AnalysisError::ConstantSeries) => f64::NAN,
            Err(e) => return Err(e),
        };
        out.push(WindowScore {
            start_ms: pair.start_ms + i as f64 * pair.step_ms,
            r,
        });
        i += step;
    }
    Ok(out)
}

/// Longest run of qualifying windows (r ≥ 0.6) as a time span, after
/// lag compensation. `None` when no window qualifies.
pub fn find_synchronized_section(pair: &AlignedPair) -> Result<Option<[f64; 2]>, AnalysisError> {
    let lag = estimate_lag(pair, DEFAULT_MAX_LAG_MS)?;
    let compensated = compensate_lag(pair, lag);
    let scores = window_scores(&compensated)?;
    let mut best: Option<(usize, usize)> = None;
    let mut run_start: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if s.r >= SECTION_R_THRESHOLD {
            if run_start.is_none() {
                run_start = Some(i);
            }
            let start = run_start.unwrap();
            if best.map_or(true, |(b0, b1)| i - start > b1 - b0) {
                best = Some((start, i));
            }
        } else {
            run_start = None;
        }
    }
    Ok(best.map(|(i0, i1)| {
        [
            scores[i0].start_ms,
            scores[i1].start_ms + SECTION_WINDOW_MS as f64,
        ]
    }))
}

/// Full analysis: lag estimate, lag-compensated Pearson r and the
/// synchronized section. When `lag_compensate` is false, r is taken
/// over the unshifted pair.
pub fn analyze(pair: &AlignedPair, lag_compensate: bool) -> Result<SyncReport, AnalysisError> {
    let lag = estimate_lag(pair, DEFAULT_MAX_LAG_MS)?;
    let scored = if lag_compensate {
        compensate_lag(pair, lag)
    } else {
        pair.clone()
    };
    let r = pearson(&scored.x, &scored.y)?;
    let section = match find_synchronized_section(pair) {
        Ok(s) => s,
        Err(AnalysisError::TooShort { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(SyncReport {
        pearson_r: r,
        lag_ms: lag,
        section,
    })
}
