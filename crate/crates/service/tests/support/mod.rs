#![allow(dead_code)]

use pedtrial::protocol::{ClientMessage, InputFrame, ServerMessage};
use pedtrial_core::engine::{EventKind, Observation, SubjectInput, SubjectPose, VisiblePedestrian};
use pedtrial_core::scenario::{FieldLoss, TrialSpec};
use pedtrial_core::Vec2;

/// Set-membership visibility check written from the field definitions alone.
pub fn oracle_visible(pose: &SubjectPose, p: Vec2, fov_half: f64, loss: FieldLoss) -> Option<bool> {
    let d = p - pose.position;
    let bearing = d.x.atan2(d.y).to_degrees();
    let mut alpha = bearing - (pose.body_heading + pose.head_yaw);
    while alpha > 180.0 {
        alpha -= 360.0;
    }
    while alpha <= -180.0 {
        alpha += 360.0;
    }
    // Too close to an edge to call either way.
    if (alpha.abs() - fov_half).abs() < 1e-9 || alpha.abs() < 1e-9 {
        return None;
    }
    let in_field = alpha.abs() <= fov_half;
    Some(match loss {
        FieldLoss::None => in_field,
        FieldLoss::LeftHemianopia => in_field && alpha > 0.0,
        FieldLoss::RightHemianopia => in_field && alpha < 0.0,
    })
}

/// Rebuilds what a subject may know from the subject stream.
#[derive(Debug, Default)]
pub struct SubjectView {
    pub spawn_t: Option<f64>,
    pub last: Option<Observation>,
    pub trial: Option<TrialSpec>,
    /// Set by a trial summary, cleared by the next trial's first state.
    pub trial_over: bool,
    pub session_done: bool,
}

impl SubjectView {
    pub fn absorb(&mut self, msg: &ServerMessage) {
        match msg {
            ServerMessage::TrialConfig { trial, .. } => {
                self.trial = Some(trial.clone());
            }
            ServerMessage::Event { event, .. } => {
                if let EventKind::PedestriansSpawned { .. } = event.kind {
                    self.spawn_t = Some(event.t);
                }
            }
            ServerMessage::State {
                tick,
                t,
                phase,
                subject,
                pedestrians,
                ..
            } => {
                if *tick == 0 {
                    self.spawn_t = None;
                    self.trial_over = false;
                }
                self.last = Some(Observation {
                    tick: *tick,
                    t: *t,
                    phase: *phase,
                    subject: *subject,
                    spawn_t: self.spawn_t,
                    visible: pedestrians
                        .iter()
                        .map(|p| VisiblePedestrian {
                            id: p.id,
                            position: p.position,
                            velocity: p.velocity,
                        })
                        .collect(),
                });
            }
            ServerMessage::TrialSummary(_) => self.trial_over = true,
            ServerMessage::SessionSummary { .. } => self.session_done = true,
            _ => {}
        }
    }
}

/// Client frames that deliver `input` for lockstep tick `tick`.
pub fn input_frames(input: &SubjectInput, tick: u64) -> Vec<ClientMessage> {
    let mut out = Vec::new();
    if let Some(side) = input.detect {
        out.push(ClientMessage::Detect { side });
    }
    out.push(ClientMessage::Input(InputFrame {
        tick,
        steer_rate: input.steer_rate,
        speed_target: input.speed_target,
        head_yaw_target: input.head_yaw_target,
        head_pitch_target: input.head_pitch_target,
    }));
    out
}

pub mod ws {
    use super::{input_frames, SubjectView};
    use futures_util::{SinkExt, StreamExt};
    use pedtrial::protocol::{ClientMessage, ServerMessage, SessionConfig, PROTOCOL_VERSION};
    use pedtrial::server::{self, ServerConfig};
    use pedtrial_core::agents::SubjectPolicy;
    use pedtrial_core::engine::{EngineConfig, Phase};
    use pedtrial_core::scenario::SessionDesign;
    use std::net::SocketAddr;
    use std::path::PathBuf;
    use tokio::net::TcpStream;
    use tokio::sync::oneshot;
    use tokio::task::JoinHandle;
    use tokio_tungstenite::tungstenite::Message;
    use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

    pub type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

    pub struct Server {
        pub addr: SocketAddr,
        stop: Option<oneshot::Sender<()>>,
        handle: JoinHandle<std::io::Result<()>>,
    }

    impl Server {
        pub async fn start(store_root: Option<PathBuf>) -> Self {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            let addr = listener.local_addr().unwrap();
            let (tx, rx) = oneshot::channel::<()>();
            let config = ServerConfig {
                engine: EngineConfig::default(),
                design: SessionDesign::default(),
                store_root,
            };
            let handle = tokio::spawn(server::run(listener, config, async {
                let _ = rx.await;
            }));
            Self {
                addr,
                stop: Some(tx),
                handle,
            }
        }

        pub async fn stop(mut self) {
            let _ = self.stop.take().unwrap().send(());
            self.handle.await.unwrap().unwrap();
        }
    }

    pub async fn connect(addr: SocketAddr) -> Client {
        tokio_tungstenite::connect_async(format!("ws://{addr}"))
            .await
            .unwrap()
            .0
    }

    pub async fn send(ws: &mut Client, msg: &ClientMessage) {
        ws.send(Message::text(serde_json::to_string(msg).unwrap()))
            .await
            .unwrap();
    }

    pub async fn send_raw(ws: &mut Client, text: &str) {
        ws.send(Message::text(text.to_owned())).await.unwrap();
    }

    /// Next server frame, or `None` once the server closed.
    pub async fn recv(ws: &mut Client) -> Option<ServerMessage> {
        loop {
            match ws.next().await? {
                Ok(Message::Text(t)) => return Some(serde_json::from_str(&t).unwrap()),
                Ok(Message::Close(_)) | Err(_) => return None,
                Ok(_) => {}
            }
        }
    }

    pub async fn hello(ws: &mut Client, config: SessionConfig) -> String {
        send(
            ws,
            &ClientMessage::Hello {
                version: PROTOCOL_VERSION,
                config,
            },
        )
        .await;
        match recv(ws).await {
            Some(ServerMessage::SessionAck { session_id, .. }) => session_id,
            other => panic!("expected session_ack, got {other:?}"),
        }
    }

    /// Runs a whole lockstep session with `policy`, which needs a state frame
    /// every tick; returns every frame received.
    pub async fn run_policy(ws: &mut Client, policy: &mut dyn SubjectPolicy) -> Vec<ServerMessage> {
        let mut view = SubjectView::default();
        let mut log = Vec::new();
        // The trial announcement that followed the ack.
        let first = recv(ws).await.unwrap();
        view.absorb(&first);
        log.push(first);
        while !view.session_done {
            send(ws, &ClientMessage::StartTrial {}).await;
            loop {
                let m = recv(ws).await.expect("server closed mid-session");
                view.absorb(&m);
                match &m {
                    ServerMessage::State { tick, phase, .. } if *phase != Phase::Ended => {
                        if *tick == 0 {
                            policy.begin_trial(view.trial.as_ref().unwrap());
                        }
                        let obs = view.last.clone().unwrap();
                        let input = policy.act(&obs);
                        for msg in input_frames(&input, obs.tick + 1) {
                            send(ws, &msg).await;
                        }
                    }
                    ServerMessage::Error { .. } => panic!("server error: {m:?}"),
                    _ => {}
                }
                let next = matches!(
                    m,
                    ServerMessage::TrialConfig { .. } | ServerMessage::SessionSummary { .. }
                );
                log.push(m);
                if next {
                    break;
                }
            }
        }
        log
    }
}
