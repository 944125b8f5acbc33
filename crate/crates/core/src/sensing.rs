//! Dual-IMU respiration sensing: channel differencing, low-pass
//! filtering and phase-onset detection with depth/period tracking.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nominal IMU sample rate for the whole pipeline.
pub const IMU_RATE_HZ: f64 = 100.0;
/// Low-pass cutoff for the respiration band.
pub const LOWPASS_CUTOFF_HZ: f64 = 1.0;
/// Butterworth quality factor.
pub const LOWPASS_Q: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// Minimum spacing between consecutive phase events.
pub const REFRACTORY_MS: u64 = 700;
/// Relative prominence required to confirm an extremum.
pub const PROMINENCE_FRAC: f64 = 0.2;
/// Absolute prominence floor in m/s².
pub const PROMINENCE_FLOOR: f64 = 0.02;
/// Depth calibration window length.
pub const DEPTH_WINDOW_MS: u64 = 60_000;
/// Expected phase duration before any cycle has completed.
pub const DEFAULT_PHASE_MS: u64 = 2000;

#[derive(Debug, Error)]
pub enum SensingError {
    #[error("non-finite acceleration at t={t_ms} ms")]
    NonFiniteSample { t_ms: u64 },
    #[error("non-monotonic timestamp at t={t_ms} ms (previous {prev_ms} ms)")]
    NonMonotonicTimestamp { t_ms: u64, prev_ms: u64 },
    #[error("timestamp jitter at t={t_ms} ms: interval {got_ms} ms vs nominal {nominal_ms} ms")]
    TimestampJitter { t_ms: u64, got_ms: f64, nominal_ms: f64 },
    #[error("sample rate {0} Hz below 20 Hz minimum")]
    RateTooLow(f64),
    #[error("malformed CSV at line {line}: {msg}")]
    MalformedCsv { line: u64, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One timestamped sample from the front (sternum) and back IMUs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuFramePair {
    pub t_ms: u64,
    pub ax_front: f64,
    pub ay_front: f64,
    pub az_front: f64,
    pub ax_back: f64,
    pub ay_back: f64,
    pub az_back: f64,
}

impl ImuFramePair {
    pub fn from_z(t_ms: u64, az_front: f64, az_back: f64) -> Self {
        Self {
            t_ms,
            ax_front: 0.0,
            ay_front: 0.0,
            az_front,
            ax_back: 0.0,
            ay_back: 0.0,
            az_back,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ax_front.is_finite()
            && self.ay_front.is_finite()
            && self.az_front.is_finite()
            && self.ax_back.is_finite()
            && self.ay_back.is_finite()
            && self.az_back.is_finite()
    }
}

/// Differenced and filtered respiration sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RespirationSample {
    pub t_ms: u64,
    pub az_raw: f64,
    pub az_filt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    InspirationOnset,
    ExpirationOnset,
}

impl PhaseKind {
    pub fn opposite(self) -> Self {
        match self {
            PhaseKind::InspirationOnset => PhaseKind::ExpirationOnset,
            PhaseKind::ExpirationOnset => PhaseKind::InspirationOnset,
        }
    }
}

/// Detected inspiration/expiration onset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseEvent {
    pub kind: PhaseKind,
    pub t_ms: u64,
    /// Relative breath depth in [0,1].
    pub depth: f64,
    /// Duration of the phase that just ended, absent for the first event.
    pub prev_phase_duration_ms: Option<u64>,
    /// Delay between the extremum and its confirmation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emission_latency_ms: Option<u64>,
}

/// Subtract the back (reference) channel from the front channel.
///
/// Common-mode body motion present in both channels cancels exactly
/// when the channels are bitwise equal.
pub fn difference_channels(frame: &ImuFramePair) -> Result<f64, SensingError> {
    if !frame.is_finite() {
        return Err(SensingError::NonFiniteSample { t_ms: frame.t_ms });
    }
    Ok(frame.az_front - frame.az_back)
}

/// Second-order low-pass biquad (RBJ cookbook), direct form 1.
#[derive(Debug, Clone)]
pub struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Biquad {
    pub fn lowpass(sample_rate_hz: f64, cutoff_hz: f64, q: f64) -> Result<Self, SensingError> {
        if sample_rate_hz < 20.0 {
            return Err(SensingError::RateTooLow(sample_rate_hz));
        }
        let w0 = 2.0 * std::f64::consts::PI * cutoff_hz / sample_rate_hz;
        let (sin_w0, cos_w0) = w0.sin_cos();
        let alpha = sin_w0 / (2.0 * q);
        let a0 = 1.0 + alpha;
        Ok(Self {
            b0: (1.0 - cos_w0) / 2.0 / a0,
            b1: (1.0 - cos_w0) / a0,
            b2: (1.0 - cos_w0) / 2.0 / a0,
            a1: -2.0 * cos_w0 / a0,
            a2: (1.0 - alpha) / a0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        })
    }

    pub fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b1 * self.x1 + self.b2 * self.x2
            - self.a1 * self.y1
            - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }

    /// Transfer-function magnitude at `freq_hz` for `sample_rate_hz` sampling.
    pub fn magnitude_at(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate_hz;
        let (num_re, num_im) = (
            self.b0 + self.b1 * w.cos() + self.b2 * (2.0 * w).cos(),
            -(self.b1 * w.sin() + self.b2 * (2.0 * w).sin()),
        );
        let (den_re, den_im) = (
            1.0 + self.a1 * w.cos() + self.a2 * (2.0 * w).cos(),
            -(self.a1 * w.sin() + self.a2 * (2.0 * w).sin()),
        );
        (num_re * num_re + num_im * num_im).sqrt() / (den_re * den_re + den_im * den_im).sqrt()
    }
}

/// Streaming low-pass stage with timestamp validation.
#[derive(Debug, Clone)]
pub struct LowpassStage {
    filter: Biquad,
    nominal_interval_ms: f64,
    prev_t_ms: Option<u64>,
}

impl LowpassStage {
    pub fn new(sample_rate_hz: f64) -> Result<Self, SensingError> {
        Ok(Self {
            filter: Biquad::lowpass(sample_rate_hz, LOWPASS_CUTOFF_HZ, LOWPASS_Q)?,
            nominal_interval_ms: 1000.0 / sample_rate_hz,
            prev_t_ms: None,
        })
    }

    pub fn process(&mut self, t_ms: u64, az_raw: f64) -> Result<RespirationSample, SensingError> {
        if let Some(prev) = self.prev_t_ms {
            if t_ms <= prev {
                return Err(SensingError::NonMonotonicTimestamp { t_ms, prev_ms: prev });
            }
            let dt = (t_ms - prev) as f64;
            if (dt - self.nominal_interval_ms).abs() > 0.1 * self.nominal_interval_ms {
                return Err(SensingError::TimestampJitter {
                    t_ms,
                    got_ms: dt,
                    nominal_ms: self.nominal_interval_ms,
                });
            }
        }
        self.prev_t_ms = Some(t_ms);
        Ok(RespirationSample {
            t_ms,
            az_raw,
            az_filt: self.filter.process(az_raw),
        })
    }
}

/// Per-stream breathing state: current phase, duration rings and the
/// rolling amplitude window used for depth calibration.
#[derive(Debug, Clone)]
pub struct BreathTracker {
    insp_durations_ms: VecDeque<u64>,
    exp_durations_ms: VecDeque<u64>,
    amp_window: VecDeque<(u64, f64)>,
    pub current_phase: Option<PhaseKind>,
    pub phase_start_ms: Option<u64>,
}

impl Default for BreathTracker {
    fn default() -> Self {
        Self::new()
    }
}

impl BreathTracker {
    pub fn new() -> Self {
        Self {
            insp_durations_ms: VecDeque::new(),
            exp_durations_ms: VecDeque::new(),
            amp_window: VecDeque::new(),
            current_phase: None,
            phase_start_ms: None,
        }
    }

    pub fn record_duration(&mut self, kind: PhaseKind, duration_ms: u64) {
        debug_assert!(duration_ms > 0);
        let ring = match kind {
            PhaseKind::InspirationOnset => &mut self.insp_durations_ms,
            PhaseKind::ExpirationOnset => &mut self.exp_durations_ms,
        };
        if ring.len() == 3 {
            ring.pop_front();
        }
        ring.push_back(duration_ms);
    }

    pub fn record_amplitude(&mut self, t_ms: u64, peak_to_trough: f64) {
        self.amp_window.push_back((t_ms, peak_to_trough));
        while let Some(&(t0, _)) = self.amp_window.front() {
            if t_ms.saturating_sub(t0) > DEPTH_WINDOW_MS {
                self.amp_window.pop_front();
            } else {
                break;
            }
        }
    }

    /// 95th percentile of the rolling amplitude window (nearest-rank).
    pub fn amplitude_p95(&self) -> Option<f64> {
        if self.amp_window.is_empty() {
            return None;
        }
        let mut amps: Vec<f64> = self.amp_window.iter().map(|&(_, a)| a).collect();
        amps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((0.95 * amps.len() as f64).ceil() as usize).clamp(1, amps.len());
        Some(amps[rank - 1])
    }

    /// Median rolling amplitude, used to scale the prominence threshold.
    pub fn amplitude_median(&self) -> Option<f64> {
        if self.amp_window.is_empty() {
            return None;
        }
        let mut amps: Vec<f64> = self.amp_window.iter().map(|&(_, a)| a).collect();
        amps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = amps.len();
        Some(if n % 2 == 1 {
            amps[n / 2]
        } else {
            (amps[n / 2 - 1] + amps[n / 2]) / 2.0
        })
    }
}

/// Depth of a completed half-cycle relative to the calibrated P95
/// amplitude, clamped to [0,1]. Bootstraps to 1.0 before any cycle
/// has completed.
pub fn estimate_depth(peak: f64, trough: f64, tracker: &BreathTracker) -> f64 {
    debug_assert!(peak >= trough);
    match tracker.amplitude_p95() {
        Some(p95) if p95 > 0.0 => ((peak - trough) / p95).clamp(0.0, 1.0),
        _ => 1.0,
    }
}

/// Median of the last 3 completed durations of `kind`; 2000 ms until
/// the first one completes.
pub fn estimate_expected_duration(tracker: &BreathTracker, kind: PhaseKind) -> u64 {
    let ring = match kind {
        PhaseKind::InspirationOnset => &tracker.insp_durations_ms,
        PhaseKind::ExpirationOnset => &tracker.exp_durations_ms,
    };
    let mut v: Vec<u64> = ring.iter().copied().collect();
    if v.is_empty() {
        return DEFAULT_PHASE_MS;
    }
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

#[derive(Debug, Clone, Copy)]
enum Hunt {
    /// Still deciding which extremum comes first.
    Unknown,
    /// Tracking a candidate maximum.
    Max,
    /// Tracking a candidate minimum.
    Min,
}

/// Retreat-confirmation peak search over the filtered signal.
///
/// An extremum candidate is confirmed once the signal has moved away
/// from it by the prominence threshold; the event carries the
/// extremum's own timestamp and the confirmation delay.
#[derive(Debug)]
pub struct PhaseDetector {
    tracker: BreathTracker,
    /// When true (default), a local minimum of az maps to inspiration.
    min_is_inspiration: bool,
    hunt: Hunt,
    /// Candidate extremum for the current hunt direction. In the
    /// Unknown state these track the running min and max separately.
    cand_max: (f64, u64),
    cand_min: (f64, u64),
    last_event_t_ms: Option<u64>,
    last_extremum_val: Option<f64>,
    started: bool,
}

impl PhaseDetector {
    pub fn new(min_is_inspiration: bool) -> Self {
        Self {
            tracker: BreathTracker::new(),
            min_is_inspiration,
            hunt: Hunt::Unknown,
            cand_max: (f64::NEG_INFINITY, 0),
            cand_min: (f64::INFINITY, 0),
            last_event_t_ms: None,
            last_extremum_val: None,
            started: false,
        }
    }

    pub fn tracker(&self) -> &BreathTracker {
        &self.tracker
    }

    fn prominence(&self) -> f64 {
        let calib = self.tracker.amplitude_median().unwrap_or_else(|| {
            if self.cand_max.0 > self.cand_min.0 {
                self.cand_max.0 - self.cand_min.0
            } else {
                0.0
            }
        });
        (PROMINENCE_FRAC * calib).max(PROMINENCE_FLOOR)
    }

    fn kind_for(&self, was_max: bool) -> PhaseKind {
        // A maximum ends inspiration, so it is an expiration onset
        // under the min-is-inspiration convention.
        match (was_max, self.min_is_inspiration) {
            (true, true) | (false, false) => PhaseKind::ExpirationOnset,
            _ => PhaseKind::InspirationOnset,
        }
    }

    pub fn push(&mut self, sample: &RespirationSample) -> Option<PhaseEvent> {
        let v = sample.az_filt;
        let t = sample.t_ms;

        if !self.started {
            self.started = true;
            self.cand_max = (v, t);
            self.cand_min = (v, t);
            return None;
        }

        match self.hunt {
            Hunt::Unknown => {
                if v > self.cand_max.0 {
                    self.cand_max = (v, t);
                }
                if v < self.cand_min.0 {
                    self.cand_min = (v, t);
                }
                let prom = self.prominence();
                // A retreat below the running max confirms the max first
                // (and symmetrically for the min); whichever fires first
                // decides the initial direction.
                if self.cand_max.0 - v >= prom && self.cand_max.1 < t {
                    let (ev_v, ev_t) = self.cand_max;
                    let ev = self.confirm(true, ev_t, ev_v, t);
                    self.hunt = Hunt::Min;
                    self.cand_min = (v, t);
                    ev
                } else if v - self.cand_min.0 >= prom && self.cand_min.1 < t {
                    let (ev_v, ev_t) = self.cand_min;
                    let ev = self.confirm(false, ev_t, ev_v, t);
                    self.hunt = Hunt::Max;
                    self.cand_max = (v, t);
                    ev
                } else {
                    None
                }
            }
            Hunt::Max => {
                if v > self.cand_max.0 {
                    self.cand_max = (v, t);
                    None
                } else if self.cand_max.0 - v >= self.prominence() {
                    let (ev_v, ev_t) = self.cand_max;
                    let ev = self.confirm(true, ev_t, ev_v, t);
                    self.hunt = Hunt::Min;
                    self.cand_min = (v, t);
                    ev
                } else {
                    None
                }
            }
            Hunt::Min => {
                if v < self.cand_min.0 {
                    self.cand_min = (v, t);
                    None
                } else if v - self.cand_min.0 >= self.prominence() {
                    let (ev_v, ev_t) = self.cand_min;
                    let ev = self.confirm(false, ev_t, ev_v, t);
                    self.hunt = Hunt::Max;
                    self.cand_max = (v, t);
                    ev
                } else {
                    None
                }
            }
        }
    }

    fn confirm(
        &mut self,
        was_max: bool,
        extremum_t: u64,
        extremum_v: f64,
        confirm_t: u64,
    ) -> Option<PhaseEvent> {
        let kind = self.kind_for(was_max);
        if let Some(last) = self.last_event_t_ms {
            if extremum_t.saturating_sub(last) < REFRACTORY_MS {
                return None;
            }
        }
        // A suppressed extremum leaves the stream expecting its kind;
        // a same-kind follow-up is dropped to keep alternation.
        if self.tracker.current_phase == Some(kind) {
            return None;
        }
        let (peak, trough) = match self.last_extremum_val {
            Some(prev) if was_max => (extremum_v, prev),
            Some(prev) => (prev, extremum_v),
            None => (extremum_v, extremum_v),
        };
        let depth = estimate_depth(peak.max(trough), peak.min(trough), &self.tracker);
        let prev_phase_duration_ms = self.last_event_t_ms.map(|last| extremum_t - last);
        if let Some(d) = prev_phase_duration_ms {
            if d > 0 {
                // The phase that just ended is the opposite kind's span.
                self.tracker.record_duration(kind.opposite(), d);
            }
        }
        if self.last_extremum_val.is_some() {
            self.tracker
                .record_amplitude(extremum_t, (peak - trough).abs());
        }
        self.last_event_t_ms = Some(extremum_t);
        self.last_extremum_val = Some(extremum_v);
        self.tracker.current_phase = Some(kind);
        self.tracker.phase_start_ms = Some(extremum_t);
        Some(PhaseEvent {
            kind,
            t_ms: extremum_t,
            depth,
            prev_phase_duration_ms,
            emission_latency_ms: Some(confirm_t.saturating_sub(extremum_t)),
        })
    }
}

/// Full sensing chain: difference, low-pass, phase detection.
#[derive(Debug)]
pub struct SensingPipeline {
    lowpass: LowpassStage,
    detector: PhaseDetector,
}

impl SensingPipeline {
    pub fn new(sample_rate_hz: f64, min_is_inspiration: bool) -> Result<Self, SensingError> {
        Ok(Self {
            lowpass: LowpassStage::new(sample_rate_hz)?,
            detector: PhaseDetector::new(min_is_inspiration),
        })
    }

    pub fn push(
        &mut self,
        frame: &ImuFramePair,
    ) -> Result<(RespirationSample, Option<PhaseEvent>), SensingError> {
        let az_raw = difference_channels(frame)?;
        let sample = self.lowpass.process(frame.t_ms, az_raw)?;
        let event = self.detector.push(&sample);
        Ok((sample, event))
    }

    pub fn tracker(&self) -> &BreathTracker {
        self.detector.tracker()
    }
}

pub const IMU_CSV_HEADER: &str = "t_ms,ax_f,ay_f,az_f,ax_b,ay_b,az_b";

/// Parse dual-IMU CSV (`t_ms,ax_f,ay_f,az_f,ax_b,ay_b,az_b`).
pub fn read_imu_csv<R: BufRead>(reader: R) -> Result<Vec<ImuFramePair>, SensingError> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or(SensingError::MalformedCsv {
            line: 1,
            msg: "empty file".into(),
        })?;
    if header.trim() != IMU_CSV_HEADER {
        return Err(SensingError::MalformedCsv {
            line: 1,
            msg: format!("expected header `{IMU_CSV_HEADER}`, got `{}`", header.trim()),
        });
    }
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx as u64 + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 7 {
            return Err(SensingError::MalformedCsv {
                line: line_no,
                msg: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, SensingError> {
            s.parse().map_err(|_| SensingError::MalformedCsv {
                line: line_no,
                msg: format!("bad float `{s}`"),
            })
        };
        let t_ms: u64 = fields[0].parse().map_err(|_| SensingError::MalformedCsv {
            line: line_no,
            msg: format!("bad timestamp `{}`", fields[0]),
        })?;
        out.push(ImuFramePair {
            t_ms,
            ax_front: parse(fields[1])?,
            ay_front: parse(fields[2])?,
            az_front: parse(fields[3])?,
            ax_back: parse(fields[4])?,
            ay_back: parse(fields[5])?,
            az_back: parse(fields[6])?,
        });
    }
    Ok(out)
}

/// Write phase events as JSON Lines.
pub fn write_events_jsonl<W: Write>(mut w: W, events: &[PhaseEvent]) -> std::io::Result<()> {
    for ev in events {
        serde_json::to_writer(&mut w, ev)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
