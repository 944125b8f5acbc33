//! Network layer for the breath relay: a TCP service speaking
//! newline-delimited JSON control messages and raw 13-byte amplitude
//! frames on one endpoint, plus a small client.

pub mod client;
pub mod server;
pub mod wire;
