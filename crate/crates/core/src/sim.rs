//! Synthetic breathers: a scripted leader that produces dual-IMU
//! frames and a follower whose breathing phase entrains to the
//! vibration it receives. The closed loop runs on virtual time and is
//! bitwise deterministic for a given seed.

use std::f64::consts::PI;
use std::sync::mpsc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::envelope::{
    envelope_for_phase, eq2_invert, quantize_level, EnvelopeParams, Pattern,
};
use crate::protocol::{decode_frame, encode_frame, AmplitudeOrder, SequenceTracker};
use crate::relay::{Broker, RoutingMode, SessionCounters, SharedLogBuf};
use crate::sensing::{
    estimate_expected_duration, ImuFramePair, PhaseEvent, PhaseKind, SensingError,
    SensingPipeline,
};

/// Frequency of the shared body-sway motion artifact.
pub const MOTION_SWAY_HZ: f64 = 1.7;
/// Simulation tick rate, matching the IMU rate.
pub const SIM_RATE_HZ: f64 = 100.0;
/// Amplitude-order emission rate.
pub const ORDER_RATE_HZ: f64 = 50.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("natural period {0} ms outside [2000, 10000]")]
    PeriodOutOfRange(f64),
    #[error("negative noise or jitter parameter")]
    NegativeSpread,
    #[error("coupling gain must be >= 0, got {0}")]
    NegativeGain(f64),
    #[error("sensing: {0}")]
    Sensing(#[from] SensingError),
}

/// Generative model of the scripted (leader) breather.
#[derive(Debug, Clone, Copy)]
pub struct BreatherParams {
    pub natural_period_ms: f64,
    /// Breath term amplitude in m/s².
    pub depth_amp: f64,
    /// Per-cycle fractional period jitter (sigma).
    pub period_jitter_frac: f64,
    /// Shared-motion (body sway) artifact amplitude.
    pub motion_amp: f64,
    /// Per-channel white noise sigma.
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for BreatherParams {
    fn default() -> Self {
        Self {
            natural_period_ms: 4000.0,
            depth_amp: 0.3,
            period_jitter_frac: 0.02,
            motion_amp: 0.1,
            noise_sigma: 0.005,
            rng_seed: 1,
        }
    }
}

impl BreatherParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(2000.0..=10000.0).contains(&self.natural_period_ms) {
            return Err(SimError::PeriodOutOfRange(self.natural_period_ms));
        }
        if self.period_jitter_frac < 0.0 || self.noise_sigma < 0.0 {
            return Err(SimError::NegativeSpread);
        }
        Ok(())
    }
}

/// Entrainment model of the listening (follower) breather.
#[derive(Debug, Clone, Copy)]
pub struct FollowerParams {
    /// Coupling gain k in rad/s.
    pub coupling_gain: f64,
    pub natural_period_ms: f64,
    /// Amplitude of the follower's synthesized breath trace.
    pub depth_amp: f64,
}

impl Default for FollowerParams {
    fn default() -> Self {
        Self {
            coupling_gain: 1.5,
            natural_period_ms: 5000.0,
            depth_amp: 0.3,
        }
    }
}

impl FollowerParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.coupling_gain < 0.0 {
            return Err(SimError::NegativeGain(self.coupling_gain));
        }
        if !(2000.0..=10000.0).contains(&self.natural_period_ms) {
            return Err(SimError::PeriodOutOfRange(self.natural_period_ms));
        }
        Ok(())
    }
}

/// Streaming generator of leader IMU frames.
///
/// `az_front = depth_amp·sin(φ) + m(t) + n_f`, `az_back = m(t) + n_b`,
/// with the phase advancing at a per-cycle jittered period and
/// `m(t) = motion_amp·sin(2π·1.7·t)`.
pub struct LeaderGen {
    params: BreatherParams,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    phase: f64,
    current_period_ms: f64,
    t_ms: u64,
    dt_ms: f64,
}

impl LeaderGen {
    pub fn new(params: BreatherParams, rate_hz: f64) -> Result<Self, SimError> {
        params.validate()?;
        let noise = if params.noise_sigma > 0.0 {
            Some(Normal::new(0.0, params.noise_sigma).expect("sigma checked"))
        } else {
            None
        };
        Ok(Self {
            params,
            rng: ChaCha8Rng::seed_from_u64(params.rng_seed),
            noise,
            phase: 0.0,
            current_period_ms: params.natural_period_ms,
            t_ms: 0,
            dt_ms: 1000.0 / rate_hz,
        })
    }

    fn draw_period(&mut self) -> f64 {
        if self.params.period_jitter_frac == 0.0 {
            return self.params.natural_period_ms;
        }
        let jitter = Normal::new(0.0, self.params.period_jitter_frac)
            .expect("jitter checked")
            .sample(&mut self.rng);
        (self.params.natural_period_ms * (1.0 + jitter)).max(self.params.natural_period_ms * 0.25)
    }

    pub fn next_frame(&mut self) -> ImuFramePair {
        let t_s = self.t_ms as f64 / 1000.0;
        let breath = self.params.depth_amp * self.phase.sin();
        let motion = self.params.motion_amp * (2.0 * PI * MOTION_SWAY_HZ * t_s).sin();
        let (n_f, n_b) = match &self.noise {
            Some(dist) => (dist.sample(&mut self.rng), dist.sample(&mut self.rng)),
            None => (0.0, 0.0),
        };
        let frame = ImuFramePair::from_z(self.t_ms, breath + motion + n_f, motion + n_b);
        self.t_ms += self.dt_ms as u64;
        self.phase += 2.0 * PI * self.dt_ms / self.current_period_ms;
        if self.phase >= 2.0 * PI {
            self.phase -= 2.0 * PI;
            self.current_period_ms = self.draw_period();
        }
        frame
    }

    pub fn frames(&mut self, duration_ms: u64) -> Vec<ImuFramePair> {
        let n = (duration_ms as f64 / self.dt_ms) as usize;
        (0..n).map(|_| self.next_frame()).collect()
    }
}

/// Generate the leader's dual-IMU stream for `duration_ms`.
pub fn gen_leader_frames(
    params: BreatherParams,
    duration_ms: u64,
    rate_hz: f64,
) -> Result<Vec<ImuFramePair>, SimError> {
    Ok(LeaderGen::new(params, rate_hz)?.frames(duration_ms))
}

/// Reconstructs the sender's breathing phase from the received
/// envelope levels: onsets pin the phase to 0 (inspiration) or π
/// (expiration); in between the level is inverted through the
/// exponential curve.
#[derive(Debug, Default)]
pub struct StimPhaseEstimator {
    prev_level: Option<f64>,
    rising: bool,
    /// Running peak level, tracks the sender's depth scaling.
    peak_level: f64,
    phase: Option<f64>,
    /// Estimated half-phase duration for silent extrapolation.
    half_phase_ms: f64,
    ms_since_update: f64,
}

impl StimPhaseEstimator {
    pub fn new() -> Self {
        Self {
            prev_level: None,
            rising: true,
            peak_level: 0.0,
            phase: None,
            half_phase_ms: 2000.0,
            ms_since_update: 0.0,
        }
    }

    pub fn phase(&self) -> Option<f64> {
        self.phase
    }

    /// Ingest one received level sample `dt_ms` after the previous one.
    pub fn update(&mut self, level: f64, pattern: Pattern, dt_ms: f64) {
        self.peak_level = (self.peak_level * 0.9995).max(level).max(1.0);
        if let Some(prev) = self.prev_level {
            if level > prev {
                self.rising = true;
            } else if level < prev {
                self.rising = false;
            }
        }
        self.prev_level = Some(level);
        self.ms_since_update += dt_ms;

        let norm = (level / self.peak_level).clamp(0.0, 1.0) * 100.0;
        let u = eq2_invert(norm).expect("normalized level in range");

        let new_phase = match pattern {
            Pattern::Coupled => {
                if self.rising {
                    PI * u
                } else {
                    2.0 * PI - PI * u
                }
            }
            Pattern::Inversed => {
                if self.rising {
                    PI + PI * u
                } else {
                    PI - PI * u
                }
            }
            Pattern::Discrete => {
                if level <= 0.0 {
                    // Silent expiration: extrapolate linearly.
                    let prev = self.phase.unwrap_or(PI).max(PI);
                    Some((prev + PI * dt_ms / self.half_phase_ms).min(2.0 * PI - 1e-6))
                        .unwrap()
                } else {
                    PI * u
                }
            }
        };

        // Crossing an onset refreshes the half-phase duration estimate.
        if let Some(old) = self.phase {
            let wrapped = (old > 1.5 * PI && new_phase < 0.5 * PI)
                || (old < PI && new_phase >= PI && old > 0.5 * PI);
            if wrapped && self.ms_since_update > 500.0 {
                self.half_phase_ms = self.ms_since_update.clamp(500.0, 10_000.0);
                self.ms_since_update = 0.0;
            }
        }
        self.phase = Some(new_phase);
    }
}

/// Kuramoto-style follower: `dφ/dt = 2π/P₀ + k·sin(φ_stim − φ)`.
#[derive(Debug)]
pub struct FollowerSim {
    pub params: FollowerParams,
    /// Unwrapped breathing phase in radians; 0 mod 2π = inspiration onset.
    pub phase: f64,
    stim: StimPhaseEstimator,
}

impl FollowerSim {
    pub fn new(params: FollowerParams) -> Result<Self, SimError> {
        params.validate()?;
        Ok(Self {
            params,
            phase: 0.0,
            stim: StimPhaseEstimator::new(),
        })
    }

    pub fn stim_phase(&self) -> Option<f64> {
        self.stim.phase()
    }

    /// Feed one received envelope level into the stimulus estimator.
    pub fn receive_level(&mut self, level: f64, pattern: Pattern, dt_ms: f64) {
        self.stim.update(level, pattern, dt_ms);
    }

    /// Advance the phase by `dt_ms`, coupling toward the current
    /// stimulus phase when one is known.
    pub fn step(&mut self, dt_ms: f64) -> f64 {
        let natural = 2.0 * PI / self.params.natural_period_ms;
        let coupling = match self.stim.phase() {
            Some(stim) => {
                let k_per_ms = self.params.coupling_gain / 1000.0;
                k_per_ms * (stim - self.phase.rem_euclid(2.0 * PI)).sin()
            }
            None => 0.0,
        };
        self.phase += (natural + coupling) * dt_ms;
        self.phase
    }

    /// Breath acceleration for the current phase: minimum at
    /// inspiration onset, maximum at expiration onset.
    pub fn breath_az(&self) -> f64 {
        -self.params.depth_amp * self.phase.cos()
    }
}

/// Single-direction belt station: own sensing chain plus the envelope
/// state driving outgoing amplitude orders.
struct BeltStation {
    sensing: SensingPipeline,
    source_id: u8,
    pattern: Pattern,
    seq: u16,
    env: Option<ActiveEnvelope>,
    events: Vec<PhaseEvent>,
}

struct ActiveEnvelope {
    kind: PhaseKind,
    onset_ms: u64,
    t_total_ms: f64,
    depth: f64,
}

impl BeltStation {
    fn new(source_id: u8, pattern: Pattern) -> Result<Self, SimError> {
        Ok(Self {
            sensing: SensingPipeline::new(SIM_RATE_HZ, true)?,
            source_id,
            pattern,
            seq: 0,
            env: None,
            events: Vec::new(),
        })
    }

    /// Push a frame through sensing; a confirmed event restarts the
    /// envelope, backdated to the extremum time.
    fn ingest(&mut self, frame: &ImuFramePair) -> Result<f64, SimError> {
        let (sample, event) = self.sensing.push(frame)?;
        if let Some(ev) = event {
            let t_total = estimate_expected_duration(self.sensing.tracker(), ev.kind) as f64;
            self.env = Some(ActiveEnvelope {
                kind: ev.kind,
                onset_ms: ev.t_ms,
                t_total_ms: t_total,
                depth: ev.depth,
            });
            self.events.push(ev);
        }
        Ok(sample.az_raw)
    }

    /// Amplitude order for the current envelope state, if one exists.
    fn make_order(&mut self, now_ms: u64) -> Option<AmplitudeOrder> {
        let env = self.env.as_ref()?;
        let t = now_ms.saturating_sub(env.onset_ms) as f64;
        let params = EnvelopeParams {
            pattern: self.pattern,
            t_total_ms: env.t_total_ms,
            depth: env.depth,
            phase_kind: env.kind,
        };
        let level = envelope_for_phase(&params, t).ok()?;
        let order = AmplitudeOrder {
            source_id: self.source_id,
            seq: self.seq,
            timestamp_ms: now_ms as u32,
            pattern: self.pattern,
            level: quantize_level(level).ok()?,
            channel_mask: 0x0F,
        };
        self.seq = self.seq.wrapping_add(1);
        Some(order)
    }
}

/// Everything a closed-loop run produces.
pub struct ClosedLoopOutput {
    /// Leader's differenced breath trace (t_ms, az_raw) at 100 Hz.
    pub leader_trace: Vec<(u64, f64)>,
    /// Follower's breath trace at 100 Hz.
    pub follower_trace: Vec<(u64, f64)>,
    /// Binary relay session log (recv_ts + frame records).
    pub relay_log: Vec<u8>,
    pub leader_events: Vec<PhaseEvent>,
    pub follower_events: Vec<PhaseEvent>,
    /// Times at which the follower's phase crossed an inspiration
    /// onset, for period/lock analysis.
    pub follower_cycle_marks_ms: Vec<u64>,
    /// Wrapped stimulus-minus-follower phase error per tick, present
    /// once the follower has reconstructed a stimulus phase.
    pub stim_phase_error: Vec<(u64, f64)>,
    pub counters: SessionCounters,
}

impl ClosedLoopOutput {
    /// Instantaneous follower periods from successive cycle marks.
    pub fn follower_periods_ms(&self) -> Vec<f64> {
        self.follower_cycle_marks_ms
            .windows(2)
            .map(|w| (w[1] - w[0]) as f64)
            .collect()
    }

    /// First time from which the stimulus phase error stays within
    /// `tol_rad` of its final settled value. `None` when the error
    /// never settles.
    pub fn lock_time_ms(&self, tol_rad: f64) -> Option<u64> {
        let errs = &self.stim_phase_error;
        if errs.len() < 1000 {
            return None;
        }
        // The reconstructed stimulus phase ripples within each breath;
        // smooth over ~4 s before judging convergence.
        let half = 200usize;
        let smoothed: Vec<f64> = (0..errs.len())
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half).min(errs.len() - 1);
                errs[lo..=hi].iter().map(|&(_, e)| e).sum::<f64>() / (hi - lo + 1) as f64
            })
            .collect();
        let tail = &smoothed[smoothed.len() - smoothed.len() / 5..];
        let settled = tail.iter().sum::<f64>() / tail.len() as f64;
        let mut lock_idx = None;
        for i in (0..smoothed.len()).rev() {
            if (smoothed[i] - settled).abs() <= tol_rad {
                lock_idx = Some(i);
            } else {
                break;
            }
        }
        lock_idx.map(|i| errs[i].0)
    }
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Wire a leader and follower through sensing, envelopes, the wire
/// protocol and a pair relay session, on virtual time.
pub fn run_closed_loop(
    leader: BreatherParams,
    follower: FollowerParams,
    pattern: Pattern,
    duration_ms: u64,
) -> Result<ClosedLoopOutput, SimError> {
    leader.validate()?;
    follower.validate()?;

    let broker = Broker::new();
    let log_buf = SharedLogBuf::new();
    let session = broker.create_session(RoutingMode::Pair, Box::new(log_buf.clone()));
    let (leader_tx, leader_rx) = mpsc::channel();
    let (follower_tx, follower_rx) = mpsc::channel();
    let leader_id = broker.join(session, "leader", Box::new(leader_tx)).unwrap();
    let follower_id = broker.join(session, "follower", Box::new(follower_tx)).unwrap();

    let mut leader_gen = LeaderGen::new(leader, SIM_RATE_HZ)?;
    let mut leader_station = BeltStation::new(leader_id, pattern)?;
    let mut follower_station = BeltStation::new(follower_id, pattern)?;
    let mut follower_sim = FollowerSim::new(follower)?;
    let mut follower_seq_track = SequenceTracker::new();

    let dt_ms = 1000.0 / SIM_RATE_HZ;
    let order_interval = (1000.0 / ORDER_RATE_HZ) as u64;
    let steps = (duration_ms as f64 / dt_ms) as usize;

    let mut leader_trace = Vec::with_capacity(steps);
    let mut follower_trace = Vec::with_capacity(steps);
    let mut cycle_marks = Vec::new();
    let mut phase_error = Vec::new();
    let mut next_cycle_threshold = 2.0 * PI;
    let mut ms_since_order: f64 = 0.0;

    for step in 0..steps {
        let now_ms = (step as f64 * dt_ms) as u64;

        // Leader: sense own breath, emit orders toward the follower.
        let frame = leader_gen.next_frame();
        let az = leader_station.ingest(&frame)?;
        leader_trace.push((now_ms, az));
        if now_ms % order_interval == 0 {
            if let Some(order) = leader_station.make_order(now_ms) {
                let bytes = encode_frame(&order).expect("order valid by construction");
                let _ = broker.route_frame(session, &bytes, now_ms);
            }
        }

        // Follower: consume received orders, entrain, breathe.
        while let Ok(bytes) = follower_rx.try_recv() {
            if let Ok(order) = decode_frame(&bytes) {
                if follower_seq_track.track(order.source_id, order.seq).accepted() {
                    follower_sim.receive_level(
                        order.level as f64,
                        order.pattern,
                        ms_since_order.max(dt_ms),
                    );
                    ms_since_order = 0.0;
                }
            }
        }
        ms_since_order += dt_ms;

        let phase = follower_sim.step(dt_ms);
        if phase >= next_cycle_threshold {
            cycle_marks.push(now_ms);
            next_cycle_threshold += 2.0 * PI;
        }
        if let Some(stim) = follower_sim.stim_phase() {
            phase_error.push((now_ms, wrap_angle(stim - phase.rem_euclid(2.0 * PI))));
        }
        let follower_frame =
            ImuFramePair::from_z(now_ms, follower_sim.breath_az(), 0.0);
        let f_az = follower_station.ingest(&follower_frame)?;
        follower_trace.push((now_ms, f_az));
        if now_ms % order_interval == 0 {
            if let Some(order) = follower_station.make_order(now_ms) {
                let bytes = encode_frame(&order).expect("order valid by construction");
                let _ = broker.route_frame(session, &bytes, now_ms);
            }
        }
        // The scripted leader ignores incoming vibration.
        while leader_rx.try_recv().is_ok() {}
    }

    let counters = broker.counters(session).unwrap();
    Ok(ClosedLoopOutput {
        leader_trace,
        follower_trace,
        relay_log: log_buf.contents(),
        leader_events: leader_station.events,
        follower_events: follower_station.events,
        follower_cycle_marks_ms: cycle_marks,
        stim_phase_error: phase_error,
        counters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{analyze, resample_align, TracePoint};
    use crate::sensing::difference_channels;
    use approx::assert_abs_diff_eq;

    fn clean_params(seed: u64) -> BreatherParams {
        BreatherParams {
            natural_period_ms: 4000.0,
            depth_amp: 0.3,
            period_jitter_frac: 0.0,
            motion_amp: 0.0,
            noise_sigma: 0.0,
            rng_seed: seed,
        }
    }

    #[test]
    fn clean_leader_back_channel_is_zero() {
        let frames = gen_leader_frames(clean_params(1), 10_000, 100.0).unwrap();
        assert_eq!(frames.len(), 1000);
        for f in &frames {
            assert_eq!(f.az_back, 0.0);
        }
        // Front channel is a clean sinusoid: check amplitude bounds
        // and a zero crossing at the start.
        assert_abs_diff_eq!(frames[0].az_front, 0.0, epsilon = 1e-12);
        let max = frames.iter().map(|f| f.az_front).fold(f64::MIN, f64::max);
        assert_abs_diff_eq!(max, 0.3, epsilon = 1e-3);
    }

    #[test]
    fn differencing_recovers_breath_exactly() {
        let params = BreatherParams {
            motion_amp: 0.25,
            noise_sigma: 0.0,
            period_jitter_frac: 0.0,
            ..clean_params(2)
        };
        let with_motion = gen_leader_frames(params, 30_000, 100.0).unwrap();
        let clean = gen_leader_frames(
            BreatherParams {
                motion_amp: 0.0,
                ..params
            },
            30_000,
            100.0,
        )
        .unwrap();
        for (a, b) in with_motion.iter().zip(&clean) {
            let diff = difference_channels(a).unwrap();
            assert!((diff - b.az_front).abs() <= 1e-12);
        }
    }

    #[test]
    fn seeded_generation_is_bitwise_deterministic() {
        let params = BreatherParams::default();
        let a = gen_leader_frames(params, 20_000, 100.0).unwrap();
        let b = gen_leader_frames(params, 20_000, 100.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generated_amplitude_bounded() {
        let params = BreatherParams::default();
        let bound = params.depth_amp + params.motion_amp + 6.0 * params.noise_sigma;
        for f in gen_leader_frames(params, 90_000, 100.0).unwrap() {
            assert!(f.az_front.abs() <= bound, "{} > {bound}", f.az_front);
            assert!(f.az_back.abs() <= bound);
        }
    }

    #[test]
    fn uncoupled_follower_keeps_natural_period() {
        let mut f = FollowerSim::new(FollowerParams {
            coupling_gain: 0.0,
            natural_period_ms: 5000.0,
            depth_amp: 0.3,
        })
        .unwrap();
        // Drive with an arbitrary stimulus; k = 0 ignores it.
        for i in 0..10_000 {
            if i % 2 == 0 {
                f.receive_level(50.0, Pattern::Coupled, 20.0);
            }
            f.step(10.0);
        }
        let expected = 2.0 * PI / 5000.0 * 10.0 * 10_000.0;
        assert_abs_diff_eq!(f.phase, expected, epsilon = 1e-9);
    }

    #[test]
    fn aligned_stimulus_gives_zero_coupling() {
        let params = FollowerParams {
            coupling_gain: 2.0,
            natural_period_ms: 4000.0,
            depth_amp: 0.3,
        };
        let mut f = FollowerSim::new(params).unwrap();
        f.stim = StimPhaseEstimator::new();
        // Force the stimulus phase equal to the follower's own phase.
        for _ in 0..100 {
            let own = f.phase.rem_euclid(2.0 * PI);
            f.stim.phase = Some(own);
            f.step(10.0);
        }
        let expected = 2.0 * PI / 4000.0 * 10.0 * 100.0;
        assert_abs_diff_eq!(f.phase, expected, epsilon = 1e-9);
    }

    /// Numerical integration of the phase ODE with an ideal stimulus
    /// as the oracle: the follower must lock to a 4 s stimulus from a
    /// 5 s natural period within 60 s at k = 1.5 rad/s.
    #[test]
    fn follower_locks_to_ideal_stimulus() {
        // Oracle: direct Euler integration of the stated ODE.
        let (k, p_stim, p0) = (1.5f64, 4000.0f64, 5000.0f64);
        let dt = 10.0;
        let mut phi = 0.0f64;
        let mut oracle_marks = Vec::new();
        let mut next = 2.0 * PI;
        for step in 0..9000 {
            let t = step as f64 * dt;
            let stim = (2.0 * PI * t / p_stim).rem_euclid(2.0 * PI);
            phi += (2.0 * PI / p0 + k / 1000.0 * (stim - phi.rem_euclid(2.0 * PI)).sin()) * dt;
            if phi >= next {
                oracle_marks.push(t);
                next += 2.0 * PI;
            }
        }
        let oracle_periods: Vec<f64> = oracle_marks.windows(2).map(|w| w[1] - w[0]).collect();
        let tail = &oracle_periods[oracle_periods.len() - 3..];
        for p in tail {
            assert!((p - p_stim).abs() < 0.05 * p_stim, "oracle period {p}");
        }

        // Implementation under test, fed an ideal coupled envelope.
        let mut f = FollowerSim::new(FollowerParams {
            coupling_gain: k,
            natural_period_ms: p0,
            depth_amp: 0.3,
        })
        .unwrap();
        let mut marks = Vec::new();
        let mut next = 2.0 * PI;
        for step in 0..9000 {
            let t = step as f64 * dt;
            if step % 2 == 0 {
                // Ideal coupled envelope for a breather at p_stim.
                let u = (t / (p_stim / 2.0)).rem_euclid(2.0);
                let level = if u <= 1.0 {
                    crate::envelope::eq2_amplitude(u * 100.0, 100.0).unwrap()
                } else {
                    crate::envelope::eq2_amplitude((2.0 - u) * 100.0, 100.0).unwrap()
                };
                f.receive_level(level, Pattern::Coupled, 20.0);
            }
            let phase = f.step(dt);
            if phase >= next {
                marks.push(t);
                next += 2.0 * PI;
            }
        }
        let periods: Vec<f64> = marks.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(periods.len() >= 5, "follower produced {} cycles", periods.len());
        let tail = &periods[periods.len() - 3..];
        for p in tail {
            assert!(
                (p - p_stim).abs() < 0.05 * p_stim,
                "follower period {p}, expected near {p_stim}"
            );
        }
    }

    #[test]
    fn stim_estimator_tracks_coupled_envelope() {
        let mut est = StimPhaseEstimator::new();
        let t_half = 2000.0;
        let mut worst: f64 = 0.0;
        // Two full breaths of an ideal coupled envelope.
        for step in 0..400 {
            let t = step as f64 * 20.0;
            let u = (t / t_half).rem_euclid(2.0);
            let (level, truth) = if u <= 1.0 {
                (
                    crate::envelope::eq2_amplitude(u * t_half, t_half).unwrap(),
                    PI * u,
                )
            } else {
                (
                    crate::envelope::eq2_amplitude((2.0 - u) * t_half, t_half).unwrap(),
                    PI * u,
                )
            };
            est.update(level, Pattern::Coupled, 20.0);
            if t > t_half {
                let got = est.phase().unwrap();
                let err = (got - truth).rem_euclid(2.0 * PI);
                let err = err.min(2.0 * PI - err);
                worst = worst.max(err);
            }
        }
        assert!(worst < 0.35, "worst stimulus phase error {worst} rad");
    }

    #[test]
    fn closed_loop_emits_full_traces_and_is_deterministic() {
        let out = run_closed_loop(
            clean_params(5),
            FollowerParams::default(),
            Pattern::Coupled,
            90_000,
        )
        .unwrap();
        assert_eq!(out.leader_trace.len(), 9000);
        assert_eq!(out.follower_trace.len(), 9000);
        assert!(!out.relay_log.is_empty());
        assert!(!out.leader_events.is_empty());

        let again = run_closed_loop(
            clean_params(5),
            FollowerParams::default(),
            Pattern::Coupled,
            90_000,
        )
        .unwrap();
        assert_eq!(out.leader_trace, again.leader_trace);
        assert_eq!(out.follower_trace, again.follower_trace);
        assert_eq!(out.relay_log, again.relay_log);
    }

    #[test]
    fn uncoupled_loop_traces_stay_at_natural_periods() {
        let out = run_closed_loop(
            clean_params(6),
            FollowerParams {
                coupling_gain: 0.0,
                ..FollowerParams::default()
            },
            Pattern::Coupled,
            60_000,
        )
        .unwrap();
        let periods = out.follower_periods_ms();
        for p in &periods {
            assert_abs_diff_eq!(*p, 5000.0, epsilon = 20.0);
        }
    }

    #[test]
    fn coupled_loop_reaches_high_correlation() {
        let out = run_closed_loop(
            clean_params(7),
            FollowerParams::default(),
            Pattern::Coupled,
            90_000,
        )
        .unwrap();
        // Final 60 s of both traces.
        let to_points = |trace: &[(u64, f64)]| -> Vec<TracePoint> {
            trace
                .iter()
                .filter(|(t, _)| *t >= 30_000)
                .map(|&(t, v)| TracePoint {
                    t_ms: t as f64,
                    value: v,
                })
                .collect()
        };
        let pair = resample_align(
            &to_points(&out.leader_trace),
            &to_points(&out.follower_trace),
            100.0,
        )
        .unwrap();
        let report = analyze(&pair, true).unwrap();
        assert!(
            report.pearson_r >= 0.75,
            "closed-loop r = {}",
            report.pearson_r
        );
    }

    #[test]
    fn lock_time_nonincreasing_in_coupling_gain() {
        let mut lock_times = Vec::new();
        for k in [0.5, 1.0, 1.5, 2.0] {
            let out = run_closed_loop(
                clean_params(8),
                FollowerParams {
                    coupling_gain: k,
                    natural_period_ms: 5000.0,
                    depth_amp: 0.3,
                },
                Pattern::Coupled,
                90_000,
            )
            .unwrap();
            let lock = out.lock_time_ms(0.2).unwrap_or(90_000);
            lock_times.push(lock);
        }
        for w in lock_times.windows(2) {
            assert!(
                w[1] <= w[0],
                "lock times must be nonincreasing in k: {lock_times:?}"
            );
        }
    }
}
