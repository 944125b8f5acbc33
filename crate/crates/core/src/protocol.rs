//! Amplitude-order wire protocol: a fixed 13-byte frame with sync
//! byte, version, big-endian fields and an XOR checksum, plus
//! per-source sequence tracking and the binary session-log format.

use std::collections::HashMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::envelope::Pattern;

/// First byte of every frame.
pub const SYNC_BYTE: u8 = 0xB5;
/// Protocol version carried in byte 1.
pub const VERSION: u8 = 0x01;
/// Total frame length in bytes.
pub const FRAME_LEN: usize = 13;
/// Bytes per session-log record: 8-byte receive timestamp + frame.
pub const LOG_RECORD_LEN: usize = 8 + FRAME_LEN;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("bad sync byte {0:#04x}")]
    BadSync(u8),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("checksum mismatch: computed {computed:#04x}, frame carries {carried:#04x}")]
    BadChecksum { computed: u8, carried: u8 },
    #[error("field out of range: {0}")]
    FieldOutOfRange(&'static str),
    #[error("frame must be exactly {FRAME_LEN} bytes, got {0}")]
    WrongLength(usize),
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("truncated record at offset {offset}: {got} of {LOG_RECORD_LEN} bytes")]
    TruncatedRecord { offset: u64, got: usize },
    #[error("frame checksum failure at offset {offset}: {source}")]
    ChecksumFailure {
        offset: u64,
        source: ProtocolError,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// The over-the-air command a belt executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AmplitudeOrder {
    pub source_id: u8,
    pub seq: u16,
    pub timestamp_ms: u32,
    pub pattern: Pattern,
    /// Intensity percentage 0..=100.
    pub level: u8,
    /// Low 4 bits select the active actuator channels.
    pub channel_mask: u8,
}

impl AmplitudeOrder {
    fn validate(&self) -> Result<(), ProtocolError> {
        if self.level > 100 {
            return Err(ProtocolError::FieldOutOfRange("level > 100"));
        }
        if self.channel_mask >= 16 {
            return Err(ProtocolError::FieldOutOfRange("channel_mask >= 16"));
        }
        Ok(())
    }
}

fn xor_checksum(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0, |acc, b| acc ^ b)
}

/// Encode an order into its 13-byte frame.
///
/// Layout (multi-byte fields big-endian):
/// `[0]=0xB5 [1]=version [2]=source [3..5]=seq [5..9]=timestamp
///  [9]=pattern [10]=level [11]=mask [12]=XOR of bytes 0..12`.
pub fn encode_frame(order: &AmplitudeOrder) -> Result<[u8; FRAME_LEN], ProtocolError> {
    order.validate()?;
    let mut f = [0u8; FRAME_LEN];
    f[0] = SYNC_BYTE;
    f[1] = VERSION;
    f[2] = order.source_id;
    f[3..5].copy_from_slice(&order.seq.to_be_bytes());
    f[5..9].copy_from_slice(&order.timestamp_ms.to_be_bytes());
    f[9] = order.pattern.wire_code();
    f[10] = order.level;
    f[11] = order.channel_mask;
    f[12] = xor_checksum(&f[..12]);
    Ok(f)
}

/// Decode and validate a 13-byte frame.
pub fn decode_frame(bytes: &[u8]) -> Result<AmplitudeOrder, ProtocolError> {
    if bytes.len() != FRAME_LEN {
        return Err(ProtocolError::WrongLength(bytes.len()));
    }
    if bytes[0] != SYNC_BYTE {
        return Err(ProtocolError::BadSync(bytes[0]));
    }
    if bytes[1] != VERSION {
        return Err(ProtocolError::BadVersion(bytes[1]));
    }
    let computed = xor_checksum(&bytes[..12]);
    if computed != bytes[12] {
        return Err(ProtocolError::BadChecksum {
            computed,
            carried: bytes[12],
        });
    }
    if bytes[9] > 2 {
        return Err(ProtocolError::FieldOutOfRange("pattern > 2"));
    }
    if bytes[10] > 100 {
        return Err(ProtocolError::FieldOutOfRange("level > 100"));
    }
    if bytes[11] >= 16 {
        return Err(ProtocolError::FieldOutOfRange("channel_mask >= 16"));
    }
    Ok(AmplitudeOrder {
        source_id: bytes[2],
        seq: u16::from_be_bytes([bytes[3], bytes[4]]),
        timestamp_ms: u32::from_be_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]),
        pattern: Pattern::from_wire_code(bytes[9]).expect("range checked"),
        level: bytes[10],
        channel_mask: bytes[11],
    })
}

/// A hole in a source's sequence numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGapReport {
    pub source_id: u8,
    pub expected: u16,
    pub received: u16,
    pub gap: u16,
}

/// How an arriving sequence number was classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqDisposition {
    /// First frame seen from this source.
    First,
    InOrder,
    /// Frames were skipped; carries the gap details.
    Gap(FrameGapReport),
    /// Same seq as the previous frame; dropped.
    Duplicate,
    /// Older than the previous frame (reordered); dropped.
    Stale,
}

impl SeqDisposition {
    /// Whether the frame should be processed further.
    pub fn accepted(&self) -> bool {
        !matches!(self, SeqDisposition::Duplicate | SeqDisposition::Stale)
    }
}

/// Per-source sequence tracker over the wrapping 16-bit counter.
#[derive(Debug, Default)]
pub struct SequenceTracker {
    last_seen: HashMap<u8, u16>,
}

impl SequenceTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn track(&mut self, source_id: u8, seq: u16) -> SeqDisposition {
        let disp = match self.last_seen.get(&source_id) {
            None => SeqDisposition::First,
            Some(&last) => {
                let delta = seq.wrapping_sub(last);
                match delta {
                    0 => SeqDisposition::Duplicate,
                    1 => SeqDisposition::InOrder,
                    d if d < 0x8000 => SeqDisposition::Gap(FrameGapReport {
                        source_id,
                        expected: last.wrapping_add(1),
                        received: seq,
                        gap: d - 1,
                    }),
                    _ => SeqDisposition::Stale,
                }
            }
        };
        if disp.accepted() {
            self.last_seen.insert(source_id, seq);
        }
        disp
    }
}

/// Append-only session log writer: records of
/// `[recv_ts: 8 bytes BE][13 frame bytes]`, no header.
pub struct LogWriter<W: Write> {
    inner: W,
}

impl<W: Write> LogWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn append(&mut self, recv_ts_ms: u64, frame: &[u8; FRAME_LEN]) -> std::io::Result<()> {
        let mut rec = [0u8; LOG_RECORD_LEN];
        rec[..8].copy_from_slice(&recv_ts_ms.to_be_bytes());
        rec[8..].copy_from_slice(frame);
        self.inner.write_all(&rec)
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Replay a session log, decoding each frame.
pub fn replay_log<R: Read>(mut reader: R) -> Result<Vec<(u64, AmplitudeOrder)>, LogError> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    loop {
        let mut rec = [0u8; LOG_RECORD_LEN];
        let mut got = 0usize;
        while got < LOG_RECORD_LEN {
            let n = reader.read(&mut rec[got..])?;
            if n == 0 {
                break;
            }
            got += n;
        }
        if got == 0 {
            return Ok(out);
        }
        if got < LOG_RECORD_LEN {
            return Err(LogError::TruncatedRecord { offset, got });
        }
        let recv_ts = u64::from_be_bytes(rec[..8].try_into().unwrap());
        let order = decode_frame(&rec[8..]).map_err(|source| LogError::ChecksumFailure {
            offset,
            source,
        })?;
        out.push((recv_ts, order));
        offset += LOG_RECORD_LEN as u64;
    }
}

/// Raw records of a log without decoding, for byte-level forwarding.
pub fn replay_log_raw<R: Read>(mut reader: R) -> Result<Vec<(u64, [u8; FRAME_LEN])>, LogError> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    loop {
        let mut rec = [0u8; LOG_RECORD_LEN];
        let mut got = 0usize;
        while got < LOG_RECORD_LEN {
            let n = reader.read(&mut rec[got..])?;
            if n == 0 {
                break;
            }
            got += n;
        }
        if got == 0 {
            return Ok(out);
        }
        if got < LOG_RECORD_LEN {
            return Err(LogError::TruncatedRecord { offset, got });
        }
        let recv_ts = u64::from_be_bytes(rec[..8].try_into().unwrap());
        let mut frame = [0u8; FRAME_LEN];
        frame.copy_from_slice(&rec[8..]);
        out.push((recv_ts, frame));
        offset += LOG_RECORD_LEN as u64;
    }
}
