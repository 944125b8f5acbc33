//! Async client for the relay service: issues control requests and
//! exchanges raw amplitude frames over a single TCP stream.

use breathlink_core::protocol::{decode_frame, AmplitudeOrder, FRAME_LEN, SYNC_BYTE};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

use crate::wire::{ControlRequest, ControlResponse};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed response: {0}")]
    BadResponse(#[from] serde_json::Error),
    #[error("relay refused request: {0}")]
    Refused(String),
    #[error("response missing field `{0}`")]
    MissingField(&'static str),
    #[error("connection closed")]
    Closed,
}

/// One inbound unit from the relay: either a decoded amplitude frame
/// or a control response.
#[derive(Debug)]
pub enum Incoming {
    Frame(AmplitudeOrder),
    Control(ControlResponse),
}

pub struct RelayClient {
    reader: BufReader<OwnedReadHalf>,
    writer: OwnedWriteHalf,
}

impl RelayClient {
    pub async fn connect(addr: &str) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (read_half, writer) = stream.into_split();
        Ok(Self {
            reader: BufReader::new(read_half),
            writer,
        })
    }

    /// Create a session, returning its id string.
    pub async fn create(
        &mut self,
        mode: &str,
        source_id: Option<u8>,
    ) -> Result<String, ClientError> {
        let resp = self
            .request(&ControlRequest::Create {
                mode: mode.to_string(),
                source_id,
            })
            .await?;
        resp.session.ok_or(ClientError::MissingField("session"))
    }

    /// Join a session, returning the source id assigned to us.
    pub async fn join(&mut self, session: &str, participant: &str) -> Result<u8, ClientError> {
        let resp = self
            .request(&ControlRequest::Join {
                session: session.to_string(),
                participant: participant.to_string(),
            })
            .await?;
        resp.source_id.ok_or(ClientError::MissingField("source_id"))
    }

    pub async fn leave(&mut self) -> Result<(), ClientError> {
        self.request(&ControlRequest::Leave).await.map(|_| ())
    }

    pub async fn send_frame(&mut self, frame: &[u8; FRAME_LEN]) -> Result<(), ClientError> {
        self.writer.write_all(frame).await?;
        Ok(())
    }

    /// Read the next inbound unit, dispatching on the first byte.
    pub async fn next_message(&mut self) -> Result<Incoming, ClientError> {
        let mut first = [0u8; 1];
        if let Err(e) = self.reader.read_exact(&mut first).await {
            return match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Err(ClientError::Closed),
                _ => Err(e.into()),
            };
        }
        if first[0] == SYNC_BYTE {
            let mut frame = [0u8; FRAME_LEN];
            frame[0] = SYNC_BYTE;
            self.reader.read_exact(&mut frame[1..]).await?;
            let order = decode_frame(&frame).map_err(|e| {
                ClientError::Refused(format!("undecodable frame from relay: {e}"))
            })?;
            Ok(Incoming::Frame(order))
        } else {
            let line = self.read_line(first[0]).await?;
            Ok(Incoming::Control(serde_json::from_slice(&line)?))
        }
    }

    /// Send a control request and wait for the matching response.
    /// Frames arriving in between are discarded; callers doing control
    /// calls are not mid-stream.
    async fn request(&mut self, req: &ControlRequest) -> Result<ControlResponse, ClientError> {
        let mut payload = serde_json::to_vec(req)?;
        payload.push(b'\n');
        self.writer.write_all(&payload).await?;
        loop {
            match self.next_message().await? {
                Incoming::Control(resp) => {
                    if resp.ok {
                        return Ok(resp);
                    }
                    return Err(ClientError::Refused(
                        resp.error.unwrap_or_else(|| "unspecified".into()),
                    ));
                }
                Incoming::Frame(_) => continue,
            }
        }
    }

    async fn read_line(&mut self, first: u8) -> Result<Vec<u8>, ClientError> {
        let mut line = vec![first];
        let mut byte = [0u8; 1];
        loop {
            self.reader.read_exact(&mut byte).await?;
            if byte[0] == b'\n' {
                return Ok(line);
            }
            line.push(byte[0]);
        }
    }
}
