//! Session broker for the breath relay: pair, fan-out and mesh
//! routing of amplitude-order frames with append-only session logs.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::protocol::{decode_frame, ProtocolError, FRAME_LEN};

#[derive(Debug, Error)]
pub enum RelayError {
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session is full")]
    SessionFull,
    #[error("participant `{0}` already joined")]
    DuplicateParticipant(String),
    #[error("participant `{0}` is not a member")]
    UnknownParticipant(String),
    #[error("undecodable frame: {0}")]
    UndecodableFrame(#[from] ProtocolError),
    #[error("frame source {0} is not a session member")]
    UnknownSource(u8),
    #[error("log io: {0}")]
    LogIo(#[from] std::io::Error),
}

/// Opaque session token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl SessionId {
    pub fn parse(s: &str) -> Option<Self> {
        u64::from_str_radix(s, 16).ok().map(SessionId)
    }
}

/// How frames move between session members.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// Exactly two members, each forwarded to the other.
    Pair,
    /// One designated source broadcast to everyone else.
    FanOut { source_id: u8 },
    /// Every member broadcast to every other member.
    Mesh,
}

/// Where delivered frames go. Implementations must not block.
pub trait FrameSink: Send {
    fn deliver(&self, frame: &[u8; FRAME_LEN]);
}

impl FrameSink for std::sync::mpsc::Sender<[u8; FRAME_LEN]> {
    fn deliver(&self, frame: &[u8; FRAME_LEN]) {
        // Receiver may be gone; the broker drops silently then.
        let _ = self.send(*frame);
    }
}

/// Drop-count style counters kept per session.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct SessionCounters {
    pub routed: u64,
    pub undecodable_dropped: u64,
    pub unknown_source_dropped: u64,
    /// Fan-out frames from members other than the designated source.
    pub non_source_frames: u64,
}

struct Member {
    name: String,
    sink: Box<dyn FrameSink>,
}

struct SessionState {
    mode: RoutingMode,
    members: BTreeMap<u8, Member>,
    log: Box<dyn Write + Send>,
    last_recv_ts: u64,
    counters: SessionCounters,
}

impl SessionState {
    fn max_members(&self) -> usize {
        match self.mode {
            RoutingMode::Pair => 2,
            _ => 256,
        }
    }

    fn lowest_free_source_id(&self) -> Option<u8> {
        (0u8..=255).find(|id| !self.members.contains_key(id))
    }

    fn recipients(&self, source_id: u8) -> Vec<u8> {
        match self.mode {
            RoutingMode::Pair | RoutingMode::Mesh => self
                .members
                .keys()
                .copied()
                .filter(|&id| id != source_id)
                .collect(),
            RoutingMode::FanOut { source_id: hub } => {
                if source_id == hub {
                    self.members
                        .keys()
                        .copied()
                        .filter(|&id| id != source_id)
                        .collect()
                } else {
                    Vec::new()
                }
            }
        }
    }
}

/// The relay broker. All sessions share one lock; a frame is logged
/// and delivered under it, which gives per-source FIFO and an atomic
/// membership snapshot per frame.
pub struct Broker {
    sessions: Mutex<BTreeMap<SessionId, SessionState>>,
    next_session: AtomicU64,
}

impl Default for Broker {
    fn default() -> Self {
        Self::new()
    }
}

impl Broker {
    pub fn new() -> Self {
        Self {
            sessions: Mutex::new(BTreeMap::new()),
            next_session: AtomicU64::new(1),
        }
    }

    pub fn create_session(
        &self,
        mode: RoutingMode,
        log: Box<dyn Write + Send>,
    ) -> SessionId {
        let id = SessionId(self.next_session.fetch_add(1, Ordering::Relaxed));
        let state = SessionState {
            mode,
            members: BTreeMap::new(),
            log,
            last_recv_ts: 0,
            counters: SessionCounters::default(),
        };
        self.sessions.lock().unwrap().insert(id, state);
        id
    }

    /// Join a session; the lowest unused source_id is assigned.
    pub fn join(
        &self,
        session: SessionId,
        participant: &str,
        sink: Box<dyn FrameSink>,
    ) -> Result<u8, RelayError> {
        let mut sessions = self.sessions.lock().unwrap();
        let state = sessions
            .get_mut(&session)
            .ok_or(RelayError::UnknownSession(session))?;
        if state.members.values().any(|m| m.name == participant) {
            return Err(RelayError::DuplicateParticipant(participant.to_string()));
        }
        if state.members.len() >= state.max_members() {
            return Err(RelayError::SessionFull);
        }
        let source_id = state.lowest_free_source_id().ok_or(RelayError::SessionFull)?;
        state.members.insert(
            source_id,
            Member {
                name: participant.to_string(),
                sink,
            },
        );
        Ok(source_id)
    }

    pub fn leave(&self, session: SessionId, participant: &str) -> Result<(), RelayError> {
        let mut sessions = self.sessions.lock().unwrap();
        let state = sessions
            .get_mut(&session)
            .ok_or(RelayError::UnknownSession(session))?;
        let id = state
            .members
            .iter()
            .find(|(_, m)| m.name == participant)
            .map(|(&id, _)| id)
            .ok_or_else(|| RelayError::UnknownParticipant(participant.to_string()))?;
        state.members.remove(&id);
        Ok(())
    }

    /// Route one frame: decode, log, deliver. Returns the recipient
    /// source_ids. Undecodable and unknown-source frames are dropped
    /// and counted.
    pub fn route_frame(
        &self,
        session: SessionId,
        frame: &[u8],
        recv_ts_ms: u64,
    ) -> Result<Vec<u8>, RelayError> {
        let mut sessions = self.sessions.lock().unwrap();
        let state = sessions
            .get_mut(&session)
            .ok_or(RelayError::UnknownSession(session))?;
        let order = match decode_frame(frame) {
            Ok(o) => o,
            Err(e) => {
                state.counters.undecodable_dropped += 1;
                return Err(RelayError::UndecodableFrame(e));
            }
        };
        if !state.members.contains_key(&order.source_id) {
            state.counters.unknown_source_dropped += 1;
            return Err(RelayError::UnknownSource(order.source_id));
        }
        let frame_arr: [u8; FRAME_LEN] = frame.try_into().expect("decode checked length");
        // Receive timestamps must be nondecreasing within a log.
        let ts = recv_ts_ms.max(state.last_recv_ts);
        state.last_recv_ts = ts;
        let mut rec = [0u8; 8 + FRAME_LEN];
        rec[..8].copy_from_slice(&ts.to_be_bytes());
        rec[8..].copy_from_slice(&frame_arr);
        state.log.write_all(&rec)?;

        let recipients = state.recipients(order.source_id);
        if recipients.is_empty() {
            if let RoutingMode::FanOut { source_id } = state.mode {
                if order.source_id != source_id {
                    state.counters.non_source_frames += 1;
                }
            }
        }
        for id in &recipients {
            state.members[id].sink.deliver(&frame_arr);
        }
        state.counters.routed += 1;
        Ok(recipients)
    }

    pub fn counters(&self, session: SessionId) -> Result<SessionCounters, RelayError> {
        let sessions = self.sessions.lock().unwrap();
        sessions
            .get(&session)
            .map(|s| s.counters)
            .ok_or(RelayError::UnknownSession(session))
    }

    pub fn members(&self, session: SessionId) -> Result<Vec<(u8, String)>, RelayError> {
        let sessions = self.sessions.lock().unwrap();
        sessions
            .get(&session)
            .map(|s| {
                s.members
                    .iter()
                    .map(|(&id, m)| (id, m.name.clone()))
                    .collect()
            })
            .ok_or(RelayError::UnknownSession(session))
    }

    pub fn mode(&self, session: SessionId) -> Result<RoutingMode, RelayError> {
        let sessions = self.sessions.lock().unwrap();
        sessions
            .get(&session)
            .map(|s| s.mode)
            .ok_or(RelayError::UnknownSession(session))
    }

    pub fn flush_logs(&self) -> std::io::Result<()> {
        let mut sessions = self.sessions.lock().unwrap();
        for state in sessions.values_mut() {
            state.log.flush()?;
        }
        Ok(())
    }
}

/// In-memory log target that can be read back after the run.
#[derive(Clone, Default)]
pub struct SharedLogBuf(Arc<Mutex<Vec<u8>>>);

impl SharedLogBuf {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contents(&self) -> Vec<u8> {
        self.0.lock().unwrap().clone()
    }
}

impl Write for SharedLogBuf {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Sink that discards every frame.
pub struct NullSink;

impl FrameSink for NullSink {
    fn deliver(&self, _frame: &[u8; FRAME_LEN]) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::Pattern;
    use crate::protocol::{encode_frame, replay_log, AmplitudeOrder};
    use std::sync::mpsc;

    fn order_from(source_id: u8, seq: u16) -> [u8; FRAME_LEN] {
        encode_frame(&AmplitudeOrder {
            source_id,
            seq,
            timestamp_ms: seq as u32 * 20,
            pattern: Pattern::Coupled,
            level: 40,
            channel_mask: 0x0F,
        })
        .unwrap()
    }

    fn null_log() -> Box<dyn Write + Send> {
        Box::new(std::io::sink())
    }

    #[test]
    fn sessions_get_distinct_ids() {
        let broker = Broker::new();
        let a = broker.create_session(RoutingMode::Pair, null_log());
        let b = broker.create_session(RoutingMode::Mesh, null_log());
        assert_ne!(a, b);
        assert!(broker.members(a).unwrap().is_empty());
    }

    #[test]
    fn pair_assigns_low_ids_and_rejects_third() {
        let broker = Broker::new();
        let s = broker.create_session(RoutingMode::Pair, null_log());
        assert_eq!(broker.join(s, "a", Box::new(NullSink)).unwrap(), 0);
        assert_eq!(broker.join(s, "b", Box::new(NullSink)).unwrap(), 1);
        assert!(matches!(
            broker.join(s, "c", Box::new(NullSink)),
            Err(RelayError::SessionFull)
        ));
    }

    #[test]
    fn duplicate_participant_rejected() {
        let broker = Broker::new();
        let s = broker.create_session(RoutingMode::Mesh, null_log());
        broker.join(s, "a", Box::new(NullSink)).unwrap();
        assert!(matches!(
            broker.join(s, "a", Box::new(NullSink)),
            Err(RelayError::DuplicateParticipant(_))
        ));
    }

    #[test]
    fn rejoin_reuses_lowest_freed_id() {
        let broker = Broker::new();
        let s = broker.create_session(RoutingMode::Mesh, null_log());
        // Brute-force oracle: a set of free ids, always take the minimum.
        let mut free: std::collections::BTreeSet<u8> = (0..=255).collect();
        for name in ["a", "b", "c", "d"] {
            let got = broker.join(s, name, Box::new(NullSink)).unwrap();
            let want = *free.iter().next().unwrap();
            assert_eq!(got, want);
            free.remove(&want);
        }
        broker.leave(s, "b").unwrap();
        free.insert(1);
        let got = broker.join(s, "e", Box::new(NullSink)).unwrap();
        assert_eq!(got, *free.iter().next().unwrap());
        assert_eq!(got, 1);
    }

    #[test]
    fn pair_routes_to_other_member() {
        let broker = Broker::new();
        let s = broker.create_session(RoutingMode::Pair, null_log());
        let (tx0, rx0) = mpsc::channel();
        let (tx1, rx1) = mpsc::channel();
        broker.join(s, "a", Box::new(tx0)).unwrap();
        broker.join(s, "b", Box::new(tx1)).unwrap();
        let frame = order_from(0, 1);
        assert_eq!(broker.route_frame(s, &frame, 10).unwrap(), vec![1]);
        assert_eq!(rx1.try_recv().unwrap(), frame);
        assert!(rx0.try_recv().is_err(), "no echo to the sender");
    }

    #[test]
    fn mesh_routes_to_everyone_else() {
        let broker = Broker::new();
        let s = broker.create_session(RoutingMode::Mesh, null_log());
        for name in ["a", "b", "c", "d"] {
            broker.join(s, name, Box::new(NullSink)).unwrap();
        }
        assert_eq!(
            broker.route_frame(s, &order_from(2, 1), 0).unwrap(),
            vec![0, 1, 3]
        );
    }

    #[test]
    fn fanout_only_hub_traffic_delivered() {
        let broker = Broker::new();
        let s = broker.create_session(RoutingMode::FanOut { source_id: 0 }, null_log());
        for name in ["hub", "x", "y"] {
            broker.join(s, name, Box::new(NullSink)).unwrap();
        }
        assert_eq!(broker.route_frame(s, &order_from(0, 1), 0).unwrap(), vec![1, 2]);
        assert_eq!(broker.route_frame(s, &order_from(1, 1), 1).unwrap(), Vec::<u8>::new());
        assert_eq!(broker.counters(s).unwrap().non_source_frames, 1);
    }

    #[test]
    fn fanout_before_hub_joins_drops_frames() {
        let broker = Broker::new();
        let s = broker.create_session(RoutingMode::FanOut { source_id: 0 }, null_log());
        // Hub has not joined; its source_id is unknown.
        assert!(matches!(
            broker.route_frame(s, &order_from(0, 1), 0),
            Err(RelayError::UnknownSource(0))
        ));
        assert_eq!(broker.counters(s).unwrap().unknown_source_dropped, 1);
    }

    /// Routing-table oracle: enumerate recipients by definition for
    /// every mode and member count up to 4.
    #[test]
    fn routing_matches_brute_force_table() {
        for n_members in 1..=4usize {
            let modes = {
                let mut v = vec![RoutingMode::Mesh];
                if n_members == 2 {
                    v.push(RoutingMode::Pair);
                }
                for hub in 0..n_members as u8 {
                    v.push(RoutingMode::FanOut { source_id: hub });
                }
                v
            };
            for mode in modes {
                let broker = Broker::new();
                let s = broker.create_session(mode, null_log());
                let names: Vec<String> = (0..n_members).map(|i| format!("p{i}")).collect();
                for name in &names {
                    broker.join(s, name, Box::new(NullSink)).unwrap();
                }
                for sender in 0..n_members as u8 {
                    let got = broker.route_frame(s, &order_from(sender, 1), 0).unwrap();
                    let want: Vec<u8> = (0..n_members as u8)
                        .filter(|&id| {
                            id != sender
                                && match mode {
                                    RoutingMode::Pair | RoutingMode::Mesh => true,
                                    RoutingMode::FanOut { source_id } => sender == source_id,
                                }
                        })
                        .collect();
                    assert_eq!(got, want, "mode {mode:?}, {n_members} members, sender {sender}");
                }
            }
        }
    }

    #[test]
    fn undecodable_frame_counted_and_dropped() {
        let broker = Broker::new();
        let s = broker.create_session(RoutingMode::Mesh, null_log());
        broker.join(s, "a", Box::new(NullSink)).unwrap();
        let mut frame = order_from(0, 1);
        frame[12] ^= 0xFF;
        assert!(matches!(
            broker.route_frame(s, &frame, 0),
            Err(RelayError::UndecodableFrame(_))
        ));
        assert_eq!(broker.counters(s).unwrap().undecodable_dropped, 1);
    }

    #[test]
    fn log_replay_reproduces_delivered_frames() {
        let broker = Broker::new();
        let buf = SharedLogBuf::new();
        let s = broker.create_session(RoutingMode::Pair, Box::new(buf.clone()));
        broker.join(s, "a", Box::new(NullSink)).unwrap();
        broker.join(s, "b", Box::new(NullSink)).unwrap();
        for i in 0..10u16 {
            broker.route_frame(s, &order_from((i % 2) as u8, i), i as u64 * 5).unwrap();
        }
        let records = replay_log(buf.contents().as_slice()).unwrap();
        assert_eq!(records.len(), 10);
        let mut prev_ts = 0;
        for (i, (ts, order)) in records.iter().enumerate() {
            assert!(*ts >= prev_ts);
            prev_ts = *ts;
            assert_eq!(order.seq, i as u16);
        }
    }

    #[test]
    fn concurrent_sources_keep_per_source_fifo() {
        use std::thread;
        let broker = Arc::new(Broker::new());
        let s = broker.create_session(RoutingMode::Mesh, null_log());
        let (tx_a, rx_a) = mpsc::channel();
        let (tx_b, rx_b) = mpsc::channel();
        broker.join(s, "src0", Box::new(NullSink)).unwrap();
        broker.join(s, "src1", Box::new(NullSink)).unwrap();
        broker.join(s, "sink_a", Box::new(tx_a)).unwrap();
        broker.join(s, "sink_b", Box::new(tx_b)).unwrap();
        const N: u16 = 5000;
        let mut handles = Vec::new();
        for src in 0..2u8 {
            let broker = Arc::clone(&broker);
            handles.push(thread::spawn(move || {
                for seq in 0..N {
                    broker.route_frame(s, &order_from(src, seq), seq as u64).unwrap();
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        for rx in [rx_a, rx_b] {
            let mut next = [0u16; 2];
            let mut total = 0;
            while let Ok(frame) = rx.try_recv() {
                let order = decode_frame(&frame).unwrap();
                assert!(order.source_id < 2);
                assert_eq!(order.seq, next[order.source_id as usize], "per-source FIFO");
                next[order.source_id as usize] += 1;
                total += 1;
            }
            assert_eq!(total, 2 * N as usize);
        }
    }
}
