//! Trace CSV I/O shared by the subcommands.
//!
//! Two layouts are accepted when reading:
//!   - `t_ms,az` — one value column (simulation output)
//!   - `t_ms,az_raw,az_filt` — ingest output; `az_filt` is used unless
//!     the caller asks for the raw column.

use std::io::{BufRead, Write};

use breathlink_core::analysis::TracePoint;
use breathlink_core::sensing::RespirationSample;

pub const TRACE_HEADER: &str = "t_ms,az";
pub const RESPIRATION_HEADER: &str = "t_ms,az_raw,az_filt";

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn write_trace<W: Write>(mut w: W, points: &[(u64, f64)]) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for (t_ms, az) in points {
        writeln!(w, "{t_ms},{az}")?;
    }
    Ok(())
}

pub fn write_respiration<W: Write>(
    mut w: W,
    samples: &[RespirationSample],
) -> std::io::Result<()> {
    writeln!(w, "{RESPIRATION_HEADER}")?;
    for s in samples {
        writeln!(w, "{},{},{}", s.t_ms, s.az_raw, s.az_filt)?;
    }
    Ok(())
}

/// Read either trace layout into analysis points. `raw` selects
/// `az_raw` over `az_filt` in the three-column layout.
pub fn read_trace<R: BufRead>(reader: R, raw: bool) -> Result<Vec<TracePoint>, TraceError> {
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.ok_or(TraceError::Malformed {
        line: 1,
        msg: "empty file".into(),
    })?;
    let value_col = match header.trim() {
        TRACE_HEADER => 1,
        RESPIRATION_HEADER => {
            if raw {
                1
            } else {
                2
            }
        }
        other => {
            return Err(TraceError::Malformed {
                line: 1,
                msg: format!(
                    "expected header `{TRACE_HEADER}` or `{RESPIRATION_HEADER}`, got `{other}`"
                ),
            })
        }
    };
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx as u64 + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() <= value_col {
            return Err(TraceError::Malformed {
                line: line_no,
                msg: format!("expected at least {} fields", value_col + 1),
            });
        }
        let parse = |s: &str| -> Result<f64, TraceError> {
            s.parse().map_err(|_| TraceError::Malformed {
                line: line_no,
                msg: format!("bad float `{s}`"),
            })
        };
        out.push(TracePoint {
            t_ms: parse(fields[0])?,
            value: parse(fields[value_col])?,
        });
    }
    Ok(out)
}
