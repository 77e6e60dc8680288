//! Transport for the wire protocol. One listening port serves both raw TCP
//! (newline-delimited JSON) and WebSocket clients (one JSON text frame per
//! message): a connection whose first bytes are an HTTP `GET` is upgraded,
//! anything else is treated as NDJSON.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use futures_util::{SinkExt, StreamExt};
use gridsync_core::scenario::{IcId, InitialCondition};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;

use crate::protocol::*;
use crate::session::{LiveConfig, LiveError, SessionHandle, SessionManager, SessionSpec};

/// Shared server state: the session manager plus what `start` needs.
pub struct ServerState {
    pub manager: SessionManager,
    /// Used for new sessions; its `ic` is the default condition.
    pub template: SessionSpec,
    /// Conditions selectable by id in `start`.
    pub conditions: Vec<InitialCondition>,
    pub live: LiveConfig,
}

impl ServerState {
    pub fn new(manager: SessionManager, template: SessionSpec, conditions: Vec<InitialCondition>, live: LiveConfig) -> Self {
        ServerState {
            manager,
            template,
            conditions,
            live,
        }
    }

    pub fn start(&self, ic: Option<&str>, pacing: Option<f64>) -> Result<Arc<SessionHandle>, LiveError> {
        let mut spec = self.template.clone();
        if let Some(id) = ic {
            let id: IcId = id.parse().map_err(LiveError::Config)?;
            spec.ic = self
                .conditions
                .iter()
                .find(|c| c.id == id)
                .cloned()
                .ok_or_else(|| LiveError::Config(format!("unknown initial condition {id}")))?;
        }
        let mut live = self.live.clone();
        if let Some(p) = pacing {
            live.pacing = p;
        }
        self.manager.start_session(spec, live)
    }
}

struct Connection {
    state: Arc<ServerState>,
    out: mpsc::UnboundedSender<String>,
    seq: u64,
    session: Option<Arc<SessionHandle>>,
    forwarder: Option<JoinHandle<()>>,
}

impl Connection {
    fn reply(&mut self, body: Body) {
        self.seq += 1;
        let msg = WireMessage {
            v: PROTOCOL_VERSION,
            seq: self.seq,
            t: 0.0,
            session: None,
            body,
        };
        let _ = self.out.send(msg.to_line());
    }

    fn error(&mut self, code: ErrorCode, message: impl Into<String>, re: Option<u64>) {
        self.reply(Body::Error(ErrorPayload {
            code,
            message: message.into(),
            re,
        }));
    }

    fn attach(&mut self, handle: Arc<SessionHandle>) {
        if let Some(f) = self.forwarder.take() {
            f.abort();
        }
        let mut rx = handle.subscribe();
        let out = self.out.clone();
        self.forwarder = Some(tokio::spawn(async move {
            while let Some(m) = rx.recv().await {
                if out.send(m.to_line()).is_err() {
                    break;
                }
            }
        }));
        self.session = Some(handle);
    }

    async fn line(&mut self, line: &str) {
        if line.trim().is_empty() {
            return;
        }
        let msg = match WireMessage::from_line(line) {
            Ok(m) => m,
            Err(e) => return self.error(ErrorCode::BadMessage, e, None),
        };
        let Body::Command(cmd) = msg.body else {
            return self.error(ErrorCode::BadMessage, format!("clients may only send commands, got `{}`", msg.kind()), Some(msg.seq));
        };
        let re = msg.seq;
        match cmd {
            CommandPayload::Subscribe { session } => {
                let found = match &session {
                    Some(id) => self.state.manager.get(id),
                    None => self.state.manager.latest(),
                };
                match found {
                    Some(h) => {
                        self.reply(Body::Ack(AckPayload {
                            command: "subscribe".into(),
                            re,
                            session: Some(h.id().to_string()),
                            effective_t: None,
                        }));
                        self.attach(h);
                    }
                    None => {
                        let what = session.unwrap_or_else(|| "(none running)".into());
                        self.error(ErrorCode::UnknownSession, format!("unknown session {what}"), Some(re));
                    }
                }
            }
            CommandPayload::Start { ic, pacing } => {
                let state = self.state.clone();
                let started = tokio::task::spawn_blocking(move || state.start(ic.as_deref(), pacing)).await;
                match started {
                    Ok(Ok(h)) => {
                        self.reply(Body::Ack(AckPayload {
                            command: "start".into(),
                            re,
                            session: Some(h.id().to_string()),
                            effective_t: None,
                        }));
                        self.attach(h);
                    }
                    Ok(Err(e)) => self.error(e.code(), e.to_string(), Some(re)),
                    Err(e) => self.error(ErrorCode::Internal, e.to_string(), Some(re)),
                }
            }
            CommandPayload::Reconnect | CommandPayload::Stop => {
                let Some(h) = self.session.clone() else {
                    return self.error(ErrorCode::NotSubscribed, "subscribe to a session first", Some(re));
                };
                let rx = if matches!(cmd, CommandPayload::Reconnect) {
                    h.request_reconnect(re)
                } else {
                    h.request_stop(re)
                };
                // Acks and phase errors arrive on the session stream; only a
                // session that is already gone is answered here.
                match rx.await {
                    Ok(Err(LiveError::Terminated)) | Err(_) => {
                        self.error(ErrorCode::Terminated, "session has terminated", Some(re))
                    }
                    _ => {}
                }
            }
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(f) = self.forwarder.take() {
            f.abort();
        }
    }
}

async fn serve_ndjson(stream: TcpStream, state: Arc<ServerState>) -> io::Result<()> {
    let (read, mut write) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    let writer = tokio::spawn(async move {
        while let Some(mut line) = rx.recv().await {
            line.push('\n');
            if write.write_all(line.as_bytes()).await.is_err() {
                break;
            }
        }
        let _ = write.shutdown().await;
    });
    let mut conn = Connection {
        state,
        out: tx,
        seq: 0,
        session: None,
        forwarder: None,
    };
    let mut lines = BufReader::new(read).lines();
    while let Some(line) = lines.next_line().await? {
        conn.line(&line).await;
    }
    // The client closed its side; keep streaming until the session ends.
    if let Some(f) = conn.forwarder.take() {
        let _ = f.await;
    }
    drop(conn);
    let _ = writer.await;
    Ok(())
}

async fn serve_websocket(stream: TcpStream, state: Arc<ServerState>) -> io::Result<()> {
    let ws = tokio_tungstenite::accept_async(stream).await.map_err(io::Error::other)?;
    let (mut sink, mut source) = ws.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    let writer = tokio::spawn(async move {
        while let Some(line) = rx.recv().await {
            if sink.send(Message::Text(line.into())).await.is_err() {
                return;
            }
        }
        let _ = sink.close().await;
    });
    let mut conn = Connection {
        state,
        out: tx,
        seq: 0,
        session: None,
        forwarder: None,
    };
    while let Some(frame) = source.next().await {
        match frame {
            Ok(Message::Text(text)) => conn.line(text.as_str()).await,
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => {}
        }
    }
    drop(conn);
    writer.abort();
    Ok(())
}

async fn serve_connection(stream: TcpStream, state: Arc<ServerState>) -> io::Result<()> {
    let mut head = [0u8; 4];
    let n = stream.peek(&mut head).await?;
    if n >= 3 && &head[..3] == b"GET" {
        serve_websocket(stream, state).await
    } else {
        serve_ndjson(stream, state).await
    }
}

/// Accepts connections until `shutdown` fires.
pub async fn serve(listener: TcpListener, state: Arc<ServerState>, mut shutdown: oneshot::Receiver<()>) -> io::Result<()> {
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let (stream, _) = accepted?;
                let state = state.clone();
                tokio::spawn(async move {
                    let _ = serve_connection(stream, state).await;
                });
            }
            _ = &mut shutdown => return Ok(()),
        }
    }
}

/// A server running on its own thread and runtime.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    /// Blocks until the server stops.
    pub fn wait(mut self) -> io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }

    pub fn shutdown(mut self) -> io::Result<()> {
        if let Some(s) = self.shutdown.take() {
            let _ = s.send(());
        }
        self.wait()
    }
}

/// Binds `addr` (port 0 picks a free port) and serves in the background.
pub fn spawn_server(addr: &str, state: Arc<ServerState>) -> io::Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let local = std_listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let (tx, rx) = oneshot::channel();
    let thread = std::thread::Builder::new().name("live-server".into()).spawn(move || {
        runtime.block_on(async move {
            let listener = TcpListener::from_std(std_listener)?;
            serve(listener, state, rx).await
        })
    })?;
    Ok(ServerHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
