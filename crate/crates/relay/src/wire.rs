//! Control-channel messages: newline-delimited JSON sharing the TCP
//! stream with raw 13-byte data frames. The two are distinguished by
//! the first byte (0xB5 opens a frame, `{` opens a control line).

use breathlink_core::relay::RoutingMode;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ControlRequest {
    /// Create a session; `mode` is `pair`, `mesh` or `fanout` (the
    /// latter with `source_id` naming the hub).
    Create {
        mode: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source_id: Option<u8>,
    },
    Join {
        session: String,
        participant: String,
    },
    Leave,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ControlResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ControlResponse {
    pub fn err(msg: impl Into<String>) -> Self {
        Self {
            ok: false,
            error: Some(msg.into()),
            ..Self::default()
        }
    }
}

/// Parse the `mode`/`source_id` pair of a create request.
pub fn parse_mode(mode: &str, source_id: Option<u8>) -> Result<RoutingMode, String> {
    match mode {
        "pair" => Ok(RoutingMode::Pair),
        "mesh" => Ok(RoutingMode::Mesh),
        "fanout" => {
            let source_id = source_id.ok_or("fanout mode requires source_id")?;
            Ok(RoutingMode::FanOut { source_id })
        }
        other => Err(format!("unknown mode `{other}`")),
    }
}

/// Render a routing mode back into its wire fields.
pub fn mode_fields(mode: RoutingMode) -> (&'static str, Option<u8>) {
    match mode {
        RoutingMode::Pair => ("pair", None),
        RoutingMode::Mesh => ("mesh", None),
        RoutingMode::FanOut { source_id } => ("fanout", Some(source_id)),
    }
}
