//! Exponential vibration envelopes and simulated LRA waveform
//! synthesis.
//!
//! The envelope grows as `(14^(t/T) - 1)/13`, so equal time steps give
//! equal *relative* intensity steps, matching the ~20% vibrotactile
//! Weber fraction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensing::PhaseKind;

/// Growth base of the exponential envelope.
pub const ENVELOPE_BASE: f64 = 14.0;
/// Normalizer so the envelope spans exactly 0..100%.
pub const ENVELOPE_NORM: f64 = 13.0;
/// LRA carrier frequency in Hz.
pub const CARRIER_HZ: f64 = 200.0;
/// Number of actuator channels on the belt.
pub const CHANNELS: usize = 4;
/// Default waveform synthesis rate (10 samples per carrier cycle).
pub const SYNTH_RATE_HZ: f64 = 2000.0;
/// Recommended envelope command rate.
pub const ENVELOPE_RATE_HZ: f64 = 50.0;

#[derive(Debug, Error)]
pub enum EnvelopeError {
    #[error("phase duration must be positive, got {0} ms")]
    NonPositiveDuration(f64),
    #[error("level {0} outside [0,100]")]
    LevelOutOfRange(f64),
    #[error("unknown pattern code {0}")]
    UnknownPattern(u8),
    #[error("synth rate {synth_hz} Hz below 10x carrier {carrier_hz} Hz")]
    SynthRateTooLow { synth_hz: f64, carrier_hz: f64 },
}

/// The three breath-to-vibration mappings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Intensity rises during inspiration, falls during expiration.
    Coupled,
    /// The coupled mapping with the phases swapped.
    Inversed,
    /// Rises during inspiration, silent for the whole expiration.
    Discrete,
}

impl Pattern {
    pub fn wire_code(self) -> u8 {
        match self {
            Pattern::Coupled => 0,
            Pattern::Inversed => 1,
            Pattern::Discrete => 2,
        }
    }

    pub fn from_wire_code(code: u8) -> Result<Self, EnvelopeError> {
        match code {
            0 => Ok(Pattern::Coupled),
            1 => Ok(Pattern::Inversed),
            2 => Ok(Pattern::Discrete),
            other => Err(EnvelopeError::UnknownPattern(other)),
        }
    }

    pub fn parse_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "coupled" => Some(Pattern::Coupled),
            "inversed" => Some(Pattern::Inversed),
            "discrete" => Some(Pattern::Discrete),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EnvelopeParams {
    pub pattern: Pattern,
    /// Expected duration of the current phase.
    pub t_total_ms: f64,
    /// Breath depth scale in [0,1].
    pub depth: f64,
    pub phase_kind: PhaseKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeSample {
    pub t_ms: u64,
    /// Intensity percentage in [0,100].
    pub level: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ActuatorConfig {
    pub carrier_hz: f64,
    pub channels: usize,
    pub synth_rate_hz: f64,
}

impl Default for ActuatorConfig {
    fn default() -> Self {
        Self {
            carrier_hz: CARRIER_HZ,
            channels: CHANNELS,
            synth_rate_hz: SYNTH_RATE_HZ,
        }
    }
}

impl ActuatorConfig {
    pub fn validate(&self) -> Result<(), EnvelopeError> {
        if self.synth_rate_hz < 10.0 * self.carrier_hz {
            return Err(EnvelopeError::SynthRateTooLow {
                synth_hz: self.synth_rate_hz,
                carrier_hz: self.carrier_hz,
            });
        }
        Ok(())
    }
}

/// One synthesized drive sample across all channels.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformFrame {
    pub t_ms: f64,
    pub drive: [f64; CHANNELS],
}

/// Relative intensity in percent at `t_ms` into a phase of expected
/// duration `t_total_ms`:
/// `(14^(t/T) - 1)/13 * 100` on `(0, T]`, 100 beyond T, 0 at t = 0.
pub fn eq2_amplitude(t_ms: f64, t_total_ms: f64) -> Result<f64, EnvelopeError> {
    if t_total_ms <= 0.0 {
        return Err(EnvelopeError::NonPositiveDuration(t_total_ms));
    }
    debug_assert!(t_ms >= 0.0);
    if t_ms >= t_total_ms {
        return Ok(100.0);
    }
    let u = t_ms / t_total_ms;
    Ok((ENVELOPE_BASE.powf(u) - 1.0) / ENVELOPE_NORM * 100.0)
}

/// Invert `eq2_amplitude`: fraction of the phase elapsed for a given
/// level in [0,100].
pub fn eq2_invert(level: f64) -> Result<f64, EnvelopeError> {
    if !(0.0..=100.0).contains(&level) {
        return Err(EnvelopeError::LevelOutOfRange(level));
    }
    Ok((1.0 + ENVELOPE_NORM * level / 100.0).ln() / ENVELOPE_BASE.ln())
}

/// Envelope level at `t_ms` into the current phase for the given
/// pattern, depth-scaled and clamped to [0,100].
pub fn envelope_for_phase(params: &EnvelopeParams, t_ms: f64) -> Result<f64, EnvelopeError> {
    let t_total = params.t_total_ms;
    let ascend = |t: f64| eq2_amplitude(t.min(t_total), t_total);
    // Time-reversed ascent: 100 at phase onset, 0 at t = T.
    let descend = |t: f64| eq2_amplitude(t_total - t.min(t_total), t_total);
    let raw = match (params.pattern, params.phase_kind) {
        (Pattern::Coupled, PhaseKind::InspirationOnset) => ascend(t_ms)?,
        (Pattern::Coupled, PhaseKind::ExpirationOnset) => descend(t_ms)?,
        (Pattern::Inversed, PhaseKind::InspirationOnset) => descend(t_ms)?,
        (Pattern::Inversed, PhaseKind::ExpirationOnset) => ascend(t_ms)?,
        (Pattern::Discrete, PhaseKind::InspirationOnset) => ascend(t_ms)?,
        (Pattern::Discrete, PhaseKind::ExpirationOnset) => 0.0,
    };
    Ok((params.depth.clamp(0.0, 1.0) * raw).clamp(0.0, 100.0))
}

/// Round-half-up quantization of a percentage to the 0..=100 wire range.
pub fn quantize_level(level: f64) -> Result<u8, EnvelopeError> {
    if !(0.0..=100.0).contains(&level) {
        return Err(EnvelopeError::LevelOutOfRange(level));
    }
    Ok((level + 0.5).floor() as u8)
}

/// Zero-order-hold waveform synthesis: each enabled channel drives
/// `(level/100)·sin(2π·carrier·t)`; disabled channels stay at zero.
pub struct WaveformSynth {
    cfg: ActuatorConfig,
    channel_mask: u8,
}

impl WaveformSynth {
    pub fn new(cfg: ActuatorConfig, channel_mask: u8) -> Result<Self, EnvelopeError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            channel_mask: channel_mask & 0x0F,
        })
    }

    /// Expand an envelope sample stream into drive frames covering the
    /// span between the first and last envelope timestamps plus
    /// `tail_ms` of hold on the final level.
    pub fn synthesize(&self, levels: &[EnvelopeSample], tail_ms: f64) -> Vec<WaveformFrame> {
        if levels.is_empty() {
            return Vec::new();
        }
        let dt_ms = 1000.0 / self.cfg.synth_rate_hz;
        let start = levels[0].t_ms as f64;
        let end = levels[levels.len() - 1].t_ms as f64 + tail_ms;
        let n = ((end - start) / dt_ms).floor() as usize + 1;
        let mut out = Vec::with_capacity(n);
        let mut idx = 0usize;
        for i in 0..n {
            let t_ms = start + i as f64 * dt_ms;
            while idx + 1 < levels.len() && (levels[idx + 1].t_ms as f64) <= t_ms {
                idx += 1;
            }
            let level = levels[idx].level;
            let carrier = (2.0 * std::f64::consts::PI * self.cfg.carrier_hz * t_ms / 1000.0).sin();
            let mut drive = [0.0; CHANNELS];
            for (ch, d) in drive.iter_mut().enumerate() {
                if self.channel_mask & (1 << ch) != 0 {
                    *d = (level / 100.0) * carrier;
                }
            }
            out.push(WaveformFrame { t_ms, drive });
        }
        out
    }
}
