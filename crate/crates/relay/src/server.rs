//! TCP relay service. One listen endpoint carries both the JSON
//! control channel and raw amplitude frames; sessions log to
//! append-only files in the configured directory.

use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use breathlink_core::protocol::{FRAME_LEN, SYNC_BYTE};
use breathlink_core::relay::{Broker, FrameSink, RelayError, SessionId};
use tokio::io::{AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tracing::{debug, info, warn};

use crate::wire::{parse_mode, ControlRequest, ControlResponse};

/// Frame sink backed by the connection's outgoing channel.
struct ChannelSink(mpsc::UnboundedSender<Vec<u8>>);

impl FrameSink for ChannelSink {
    fn deliver(&self, frame: &[u8; FRAME_LEN]) {
        let _ = self.0.send(frame.to_vec());
    }
}

pub struct RelayService {
    broker: Arc<Broker>,
    log_dir: PathBuf,
    epoch: Instant,
}

impl RelayService {
    pub fn new(log_dir: impl AsRef<Path>) -> std::io::Result<Arc<Self>> {
        std::fs::create_dir_all(log_dir.as_ref())?;
        Ok(Arc::new(Self {
            broker: Arc::new(Broker::new()),
            log_dir: log_dir.as_ref().to_path_buf(),
            epoch: Instant::now(),
        }))
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    fn log_path(&self, session: SessionId) -> PathBuf {
        self.log_dir.join(format!("session-{session}.log"))
    }

    /// Accept connections until `shutdown` resolves, then flush logs.
    pub async fn serve(
        self: Arc<Self>,
        listener: TcpListener,
        shutdown: impl std::future::Future<Output = ()>,
    ) -> std::io::Result<()> {
        info!("relay listening on {}", listener.local_addr()?);
        tokio::pin!(shutdown);
        loop {
            tokio::select! {
                accepted = listener.accept() => {
                    let (stream, peer) = accepted?;
                    debug!("connection from {peer}");
                    let service = Arc::clone(&self);
                    tokio::spawn(async move {
                        if let Err(e) = service.handle_connection(stream).await {
                            debug!("connection {peer} closed: {e}");
                        }
                    });
                }
                _ = &mut shutdown => break,
            }
        }
        info!("relay shutting down, flushing session logs");
        self.broker.flush_logs()?;
        Ok(())
    }

    async fn handle_connection(self: &Arc<Self>, stream: TcpStream) -> std::io::Result<()> {
        let (read_half, write_half) = stream.into_split();
        let mut reader = BufReader::new(read_half);
        let (out_tx, out_rx) = mpsc::unbounded_channel::<Vec<u8>>();
        let writer_task = tokio::spawn(write_loop(write_half, out_rx));

        // (session, participant name) once joined.
        let mut membership: Option<(SessionId, String)> = None;

        let result = loop {
            let mut first = [0u8; 1];
            match reader.read_exact(&mut first).await {
                Ok(_) => {}
                Err(e) => break Err(e),
            }
            if first[0] == SYNC_BYTE {
                let mut rest = [0u8; FRAME_LEN - 1];
                if let Err(e) = reader.read_exact(&mut rest).await {
                    break Err(e);
                }
                let mut frame = [0u8; FRAME_LEN];
                frame[0] = SYNC_BYTE;
                frame[1..].copy_from_slice(&rest);
                match &membership {
                    Some((session, _)) => {
                        // Bad frames are dropped and counted; the
                        // connection stays up.
                        if let Err(e) = self.broker.route_frame(*session, &frame, self.now_ms()) {
                            match e {
                                RelayError::UndecodableFrame(_) | RelayError::UnknownSource(_) => {
                                    warn!("dropped frame: {e}");
                                }
                                other => warn!("routing failure: {other}"),
                            }
                        }
                    }
                    None => warn!("frame before join; dropped"),
                }
            } else {
                let mut line = vec![first[0]];
                let mut byte = [0u8; 1];
                loop {
                    match reader.read_exact(&mut byte).await {
                        Ok(_) => {
                            if byte[0] == b'\n' {
                                break;
                            }
                            line.push(byte[0]);
                            if line.len() > 4096 {
                                break;
                            }
                        }
                        Err(e) => return finish(writer_task, out_tx, Err(e)).await,
                    }
                }
                let response = self.handle_control(&line, &out_tx, &mut membership);
                let mut payload = serde_json::to_vec(&response)?;
                payload.push(b'\n');
                if out_tx.send(payload).is_err() {
                    break Ok(());
                }
            }
        };

        if let Some((session, name)) = membership.take() {
            let _ = self.broker.leave(session, &name);
        }
        finish(writer_task, out_tx, result).await
    }

    fn handle_control(
        &self,
        line: &[u8],
        out_tx: &mpsc::UnboundedSender<Vec<u8>>,
        membership: &mut Option<(SessionId, String)>,
    ) -> ControlResponse {
        let request: ControlRequest = match serde_json::from_slice(line) {
            Ok(r) => r,
            Err(e) => return ControlResponse::err(format!("bad control line: {e}")),
        };
        match request {
            ControlRequest::Create { mode, source_id } => {
                let mode = match parse_mode(&mode, source_id) {
                    Ok(m) => m,
                    Err(e) => return ControlResponse::err(e),
                };
                // Session id is only known after registration, so log
                // files are named by a fresh counter path probe.
                let file = match self.open_next_log() {
                    Ok(f) => f,
                    Err(e) => return ControlResponse::err(format!("log create failed: {e}")),
                };
                let (path_hint, writer) = file;
                let session = self.broker.create_session(mode, writer);
                let final_path = self.log_path(session);
                if let Err(e) = std::fs::rename(&path_hint, &final_path) {
                    warn!("could not rename session log {path_hint:?}: {e}");
                }
                info!("created session {session} ({mode:?})");
                ControlResponse {
                    ok: true,
                    session: Some(session.to_string()),
                    ..ControlResponse::default()
                }
            }
            ControlRequest::Join {
                session,
                participant,
            } => {
                if membership.is_some() {
                    return ControlResponse::err("already joined");
                }
                let Some(session) = SessionId::parse(&session) else {
                    return ControlResponse::err("malformed session id");
                };
                let sink = Box::new(ChannelSink(out_tx.clone()));
                match self.broker.join(session, &participant, sink) {
                    Ok(source_id) => {
                        *membership = Some((session, participant));
                        ControlResponse {
                            ok: true,
                            source_id: Some(source_id),
                            ..ControlResponse::default()
                        }
                    }
                    Err(e) => ControlResponse::err(e.to_string()),
                }
            }
            ControlRequest::Leave => match membership.take() {
                Some((session, name)) => match self.broker.leave(session, &name) {
                    Ok(()) => ControlResponse {
                        ok: true,
                        ..ControlResponse::default()
                    },
                    Err(e) => ControlResponse::err(e.to_string()),
                },
                None => ControlResponse::err("not joined"),
            },
        }
    }

    fn open_next_log(&self) -> std::io::Result<(PathBuf, Box<dyn std::io::Write + Send>)> {
        for attempt in 0u32.. {
            let path = self.log_dir.join(format!("pending-{attempt}.log"));
            match std::fs::OpenOptions::new()
                .create_new(true)
                .write(true)
                .open(&path)
            {
                Ok(f) => return Ok((path, Box::new(BufWriter::new(f)))),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
        unreachable!()
    }
}

async fn write_loop(
    mut writer: OwnedWriteHalf,
    mut rx: mpsc::UnboundedReceiver<Vec<u8>>,
) -> std::io::Result<()> {
    while let Some(chunk) = rx.recv().await {
        writer.write_all(&chunk).await?;
    }
    writer.shutdown().await
}

async fn finish(
    writer_task: tokio::task::JoinHandle<std::io::Result<()>>,
    out_tx: mpsc::UnboundedSender<Vec<u8>>,
    result: std::io::Result<()>,
) -> std::io::Result<()> {
    drop(out_tx);
    let _ = writer_task.await;
    match result {
        // EOF is a normal disconnect.
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(()),
        other => other,
    }
}
