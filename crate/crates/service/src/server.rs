//! Websocket transport for live sessions.
//!
//! Each subject connection owns one [`LiveSession`] on its own task. The only
//! state shared between tasks is the spectator registry, which maps session
//! ids to broadcast channels carrying the unmasked stream.

use crate::live::{LiveSession, Outbox};
use crate::protocol::{
    parse_client, ClientMessage, ErrorCode, Mode, ServerMessage, SessionConfig, StreamRole,
    PROTOCOL_VERSION,
};
use futures_util::{SinkExt, StreamExt};
use pedtrial_core::engine::EngineConfig;
use pedtrial_core::scenario::SessionDesign;
use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, watch};
use tokio::task::JoinSet;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::WebSocketStream;
use tracing::{info, warn};

const SPECTATOR_BUFFER: usize = 4096;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub engine: EngineConfig,
    pub design: SessionDesign,
    /// Finished sessions are written here.
    pub store_root: Option<PathBuf>,
}

struct Channel {
    ack: String,
    tx: broadcast::Sender<String>,
}

#[derive(Default)]
struct Registry {
    sessions: Mutex<HashMap<String, Channel>>,
    counter: AtomicU64,
}

impl Registry {
    fn subscribe(&self, id: &str) -> Option<(String, broadcast::Receiver<String>)> {
        let map = self.sessions.lock().expect("registry lock");
        map.get(id).map(|c| (c.ack.clone(), c.tx.subscribe()))
    }

    fn next_id(&self, seed: u64, store: Option<&PathBuf>) -> String {
        loop {
            let n = self.counter.fetch_add(1, Ordering::Relaxed);
            let id = format!("live-s{seed}-{n:03}");
            let taken = self
                .sessions
                .lock()
                .expect("registry lock")
                .contains_key(&id)
                || store.is_some_and(|root| root.join(&id).exists());
            if !taken {
                return id;
            }
        }
    }
}

/// Accepts connections on `listener` until `shutdown` resolves, then stops
/// every session, writes what they recorded, and returns.
pub async fn run(
    listener: TcpListener,
    config: ServerConfig,
    shutdown: impl Future<Output = ()>,
) -> std::io::Result<()> {
    let config = Arc::new(config);
    let registry = Arc::new(Registry::default());
    let (stop_tx, stop_rx) = watch::channel(false);
    let mut tasks = JoinSet::new();
    tokio::pin!(shutdown);
    loop {
        tokio::select! {
            _ = &mut shutdown => break,
            accepted = listener.accept() => {
                let (stream, peer) = match accepted {
                    Ok(a) => a,
                    Err(e) => {
                        warn!(error = %e, "accept failed");
                        continue;
                    }
                };
                let config = config.clone();
                let registry = registry.clone();
                let stop = stop_rx.clone();
                tasks.spawn(async move {
                    if let Err(e) = connection(stream, config, registry, stop).await {
                        warn!(%peer, error = %e, "connection ended with an error");
                    }
                });
            }
            Some(_) = tasks.join_next(), if !tasks.is_empty() => {}
        }
    }
    info!("shutting down; flushing {} connection(s)", tasks.len());
    let _ = stop_tx.send(true);
    while tasks.join_next().await.is_some() {}
    Ok(())
}

type Ws = WebSocketStream<TcpStream>;

async fn send(
    ws: &mut Ws,
    msg: &ServerMessage,
) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    ws.send(Message::text(msg.to_text())).await
}

async fn fail(ws: &mut Ws, msg: ServerMessage) {
    let _ = send(ws, &msg).await;
    let _ = ws.close(None).await;
}

async fn connection(
    stream: TcpStream,
    config: Arc<ServerConfig>,
    registry: Arc<Registry>,
    mut stop: watch::Receiver<bool>,
) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    let mut ws = tokio_tungstenite::accept_async(stream).await?;
    let first = tokio::select! {
        m = next_text(&mut ws) => m?,
        _ = stop.changed() => None,
    };
    let Some(text) = first else {
        return Ok(());
    };
    let (version, hello) = match text.and_then(|t| parse_client(&t)) {
        Ok(ClientMessage::Hello { version, config }) => (version, config),
        Ok(_) => {
            fail(
                &mut ws,
                ServerMessage::error(ErrorCode::ProtocolViolation, "first frame must be hello"),
            )
            .await;
            return Ok(());
        }
        Err(e) => {
            fail(&mut ws, e).await;
            return Ok(());
        }
    };
    if version != PROTOCOL_VERSION {
        let msg = format!(
            "protocol version {version} is not supported; server speaks {PROTOCOL_VERSION}"
        );
        fail(
            &mut ws,
            ServerMessage::error(ErrorCode::VersionMismatch, msg),
        )
        .await;
        return Ok(());
    }
    match hello.role {
        StreamRole::Spectator => spectate(ws, hello, &registry).await,
        StreamRole::Subject => subject(ws, hello, &config, &registry, stop).await,
    }
}

/// Next text frame, or `None` when the peer closed. Binary frames are a
/// protocol violation.
async fn next_text(
    ws: &mut Ws,
) -> Result<Option<Result<String, ServerMessage>>, tokio_tungstenite::tungstenite::Error> {
    while let Some(msg) = ws.next().await {
        match msg? {
            Message::Text(t) => return Ok(Some(Ok(t.to_string()))),
            Message::Binary(_) => {
                let e = ServerMessage::error(
                    ErrorCode::ProtocolViolation,
                    "binary frames are not accepted",
                );
                return Ok(Some(Err(e)));
            }
            Message::Close(_) => return Ok(None),
            _ => {}
        }
    }
    Ok(None)
}

async fn spectate(
    mut ws: Ws,
    hello: SessionConfig,
    registry: &Registry,
) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    let Some(id) = hello.session_id else {
        fail(
            &mut ws,
            ServerMessage::error(
                ErrorCode::InvalidConfig,
                "spectators must name a session_id",
            ),
        )
        .await;
        return Ok(());
    };
    let Some((ack, mut rx)) = registry.subscribe(&id) else {
        fail(
            &mut ws,
            ServerMessage::error(ErrorCode::UnknownSession, format!("no live session {id}")),
        )
        .await;
        return Ok(());
    };
    ws.send(Message::text(ack)).await?;
    // Runs until the session's sender is dropped, so frames sent during a
    // shutdown still reach the spectator.
    loop {
        tokio::select! {
            frame = rx.recv() => match frame {
                Ok(text) => ws.send(Message::text(text)).await?,
                Err(broadcast::error::RecvError::Lagged(n)) => warn!(session = %id, skipped = n, "spectator lagging"),
                Err(broadcast::error::RecvError::Closed) => break,
            },
            incoming = ws.next() => match incoming {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return Ok(()),
                // The spectator stream is read-only.
                Some(Ok(_)) => {}
            },
        }
    }
    let _ = ws.close(None).await;
    Ok(())
}

async fn subject(
    mut ws: Ws,
    hello: SessionConfig,
    config: &ServerConfig,
    registry: &Registry,
    mut stop: watch::Receiver<bool>,
) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    let id = registry.next_id(hello.seed, config.store_root.as_ref());
    let (session, out) =
        match LiveSession::open(&id, hello, config.engine.clone(), config.design.clone()) {
            Ok(s) => s,
            Err(e) => {
                fail(&mut ws, e).await;
                return Ok(());
            }
        };
    let mut session = match &config.store_root {
        Some(root) => session.with_store(root),
        None => session,
    };
    let (tx, _) = broadcast::channel(SPECTATOR_BUFFER);
    let ack = out
        .spectator
        .first()
        .map(ServerMessage::to_text)
        .unwrap_or_default();
    registry.sessions.lock().expect("registry lock").insert(
        id.clone(),
        Channel {
            ack,
            tx: tx.clone(),
        },
    );
    info!(session = %id, mode = ?session.mode(), "session opened");

    let result = drive(&mut ws, &mut session, &tx, out, config.engine.dt, &mut stop).await;
    if !session.is_finished() {
        let out = session.shutdown();
        let _ = deliver(&mut ws, &tx, out).await;
    }
    registry.sessions.lock().expect("registry lock").remove(&id);
    if let Some(dir) = session.saved_to() {
        info!(session = %id, dir = %dir.display(), "session written");
    }
    let _ = ws.close(None).await;
    result
}

async fn deliver(
    ws: &mut Ws,
    tx: &broadcast::Sender<String>,
    out: Outbox,
) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    for msg in &out.spectator {
        let _ = tx.send(msg.to_text());
    }
    for msg in &out.subject {
        ws.feed(Message::text(msg.to_text())).await?;
    }
    ws.flush().await
}

async fn drive(
    ws: &mut Ws,
    session: &mut LiveSession,
    tx: &broadcast::Sender<String>,
    first: Outbox,
    dt: f64,
    stop: &mut watch::Receiver<bool>,
) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    deliver(ws, tx, first).await?;
    let mut clock = tokio::time::interval(Duration::from_secs_f64(dt));
    clock.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Burst);
    let realtime = session.mode() == Mode::Realtime;
    while !session.is_finished() {
        let out = tokio::select! {
            text = next_text(ws) => {
                let Some(text) = text? else {
                    return Ok(());
                };
                let was_running = session.is_running();
                match text.and_then(|t| parse_client(&t)).and_then(|m| session.handle(m)) {
                    Ok(out) => {
                        if !was_running && session.is_running() {
                            // Ticks skipped between trials are not owed.
                            clock.reset();
                        }
                        out
                    }
                    Err(e) => {
                        let mut out = session.shutdown();
                        out.subject.insert(0, e);
                        deliver(ws, tx, out).await?;
                        return Ok(());
                    }
                }
            }
            _ = clock.tick(), if realtime && session.is_running() => {
                match session.advance() {
                    Ok(out) => out,
                    Err(e) => {
                        let mut out = session.shutdown();
                        out.subject.insert(0, e);
                        deliver(ws, tx, out).await?;
                        return Ok(());
                    }
                }
            }
            _ = stop.changed() => return Ok(()),
        };
        deliver(ws, tx, out).await?;
    }
    Ok(())
}
