//! Wire protocol for live sessions.
//!
//! Every frame is one JSON object in a websocket text message, tagged by
//! `type`. Client frames reject unknown fields, so a client cannot smuggle
//! state into the server. See `docs/protocol.md` for transcripts.

use pedtrial_core::analysis::TrialOutcome;
use pedtrial_core::engine::{EngineConfig, Event, Phase, Side, SubjectPose};
use pedtrial_core::scenario::Role;
use pedtrial_core::scenario::{FieldLoss, TrialSpec};
use pedtrial_core::store::Block;
use pedtrial_core::Vec2;
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// The server steps on its own clock at `dt`.
    #[default]
    Realtime,
    /// Each `input` frame advances exactly one tick.
    Lockstep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamRole {
    /// The walker; state frames are masked by the subject's field.
    #[default]
    Subject,
    /// Experimenter view of an existing session; unmasked, read-only.
    Spectator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    #[serde(default)]
    pub role: StreamRole,
    /// Spectators name the session they attach to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub field_loss: FieldLoss,
    /// Known preferred walking speed. When absent the session starts with a
    /// block of obstacle-free trials and measures it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pws: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pws_trials: Option<usize>,
    /// Explicit main-block trials; otherwise the standard 32-trial schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<Vec<TrialSpec>>,
    /// Ticks per state frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_divisor: Option<u32>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            role: StreamRole::Subject,
            session_id: None,
            seed: 0,
            mode: Mode::Realtime,
            field_loss: FieldLoss::None,
            pws: None,
            pws_trials: None,
            trials: None,
            state_divisor: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputFrame {
    /// In lockstep mode the tick this input produces; must be the next tick.
    /// In realtime mode informational only.
    pub tick: u64,
    pub steer_rate: f64,
    pub speed_target: f64,
    pub head_yaw_target: f64,
    #[serde(default)]
    pub head_pitch_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        version: u32,
        #[serde(default)]
        config: SessionConfig,
    },
    Input(InputFrame),
    Detect {
        side: Side,
    },
    // Empty braces rather than unit variants: serde only rejects unknown
    // fields on struct variants.
    StartTrial {},
    Abort {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedestrianView {
    pub id: u32,
    pub position: Vec2,
    pub velocity: Vec2,
    /// Only on the spectator stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    VersionMismatch,
    ProtocolViolation,
    InvalidConfig,
    BadState,
    UnknownSession,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub block: Block,
    pub index: usize,
    pub trial_id: u32,
    /// Main-block trials only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<TrialOutcome>,
    /// Walking speed on preferred-speed trials.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walking_speed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    SessionAck {
        version: u32,
        session_id: String,
        seed: u64,
        config: SessionConfig,
        engine: EngineConfig,
        trial_count: usize,
    },
    TrialConfig {
        block: Block,
        index: usize,
        of: usize,
        trial: TrialSpec,
        pws: f64,
    },
    State {
        tick: u64,
        t: f64,
        trial_id: u32,
        phase: Phase,
        subject: SubjectPose,
        pedestrians: Vec<PedestrianView>,
    },
    Event {
        block: Block,
        trial_id: u32,
        event: Event,
    },
    TrialSummary(TrialSummary),
    SessionSummary {
        session_id: String,
        pws: f64,
        trials: Vec<TrialSummary>,
        /// Where the session was written, if it was.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        saved_to: Option<String>,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code,
            message: message.into(),
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

pub fn parse_client(text: &str) -> Result<ClientMessage, ServerMessage> {
    serde_json::from_str(text)
        .map_err(|e| ServerMessage::error(ErrorCode::ProtocolViolation, e.to_string()))
}
