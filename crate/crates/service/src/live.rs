//! One live session, independent of any transport or clock.
//!
//! The server feeds client messages to [`LiveSession::handle`] and, in
//! realtime mode, calls [`LiveSession::advance`] once per `dt`. Every message
//! is logged with the number of engine steps taken before it arrived, which
//! is enough to replay a realtime session exactly.

use crate::protocol::{
    ClientMessage, ErrorCode, InputFrame, Mode, PedestrianView, ServerMessage, SessionConfig,
    StreamRole, TrialSummary, PROTOCOL_VERSION,
};
use pedtrial_core::analysis::{pws_estimate, trial_outcome, trial_walking_speed};
use pedtrial_core::engine::{EngineConfig, Event, EventKind, Side, SubjectInput, TrialEngine};
use pedtrial_core::scenario::{
    collision_conditions, generate_session_with, SessionDesign, SubjectParams, TrialSpec,
};
use pedtrial_core::session::{pws_schedule, PROVISIONAL_PWS, PWS_TRIALS};
use pedtrial_core::store::{
    self, Block, PolicySource, SessionData, SessionManifest, StoreError, Timestamps, TrialRecord,
    SCHEMA_VERSION,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const INPUTS_FILE: &str = "inputs.jsonl";
pub const DEFAULT_STATE_DIVISOR: u32 = 2;
pub const LATENCY_NOTE: &str =
    "live session: reaction times are measured at server arrival of the detect frame and include network latency";

/// Frames produced by one call, split by stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outbox {
    pub subject: Vec<ServerMessage>,
    pub spectator: Vec<ServerMessage>,
}

impl Outbox {
    fn both(&mut self, msg: ServerMessage) {
        self.spectator.push(msg.clone());
        self.subject.push(msg);
    }

    fn append(&mut self, mut other: Outbox) {
        self.subject.append(&mut other.subject);
        self.spectator.append(&mut other.spectator);
    }
}

/// One received client message and the engine steps taken before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub step: u64,
    pub message: ClientMessage,
}

struct Running {
    block: Block,
    index: usize,
    engine: TrialEngine,
}

pub struct LiveSession {
    id: String,
    config: SessionConfig,
    engine_cfg: EngineConfig,
    design: SessionDesign,
    subject: SubjectParams,
    pws_specs: Vec<TrialSpec>,
    main_specs: Vec<TrialSpec>,
    main_seed: u64,
    block: Block,
    next_index: usize,
    running: Option<Running>,
    held: SubjectInput,
    detects: VecDeque<Side>,
    records: Vec<TrialRecord>,
    summaries: Vec<TrialSummary>,
    inputs: Vec<InputRecord>,
    steps: u64,
    divisor: u64,
    finished: bool,
    store_root: Option<PathBuf>,
    saved_to: Option<PathBuf>,
    timestamps: Timestamps,
    notes: Vec<String>,
}

fn invalid(msg: impl std::fmt::Display) -> ServerMessage {
    ServerMessage::error(ErrorCode::InvalidConfig, msg.to_string())
}

fn unix_now() -> Option<u64> {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs())
}

impl LiveSession {
    /// Opens a session from a client `hello`. Returns the acknowledgement and
    /// the first trial announcement.
    pub fn open(
        id: impl Into<String>,
        config: SessionConfig,
        engine_cfg: EngineConfig,
        design: SessionDesign,
    ) -> Result<(Self, Outbox), ServerMessage> {
        if config.role != StreamRole::Subject {
            return Err(invalid("only subject connections open sessions"));
        }
        engine_cfg.validate().map_err(invalid)?;
        let divisor = config.state_divisor.unwrap_or(DEFAULT_STATE_DIVISOR);
        if divisor == 0 {
            return Err(invalid("state_divisor must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pws_seed: u64 = rng.random();
        let main_seed: u64 = rng.random();

        let (pws, pws_known) = match config.pws {
            Some(p) => (p, true),
            None => (PROVISIONAL_PWS, false),
        };
        let subject = SubjectParams::new(pws, config.field_loss);
        subject.validate().map_err(invalid)?;
        let pws_specs = if pws_known {
            Vec::new()
        } else {
            let n = config.pws_trials.unwrap_or(PWS_TRIALS);
            if n == 0 {
                return Err(invalid(
                    "pws_trials must be at least 1 when pws is not given",
                ));
            }
            pws_schedule(&design, n, pws_seed)
        };
        let main_specs = match &config.trials {
            Some(t) => t.clone(),
            None if pws_known => generate_session_with(&design, &subject, main_seed),
            None => Vec::new(),
        };
        for spec in pws_specs.iter().chain(&main_specs) {
            spec.validate(&engine_cfg.placement).map_err(invalid)?;
            if let Some(course) = &spec.course {
                course.place(pws, &engine_cfg.placement).map_err(invalid)?;
            }
        }
        let planned = match &config.trials {
            Some(t) => t.len(),
            None => design.repetitions * collision_conditions().len() + design.null_trials,
        };

        let id = id.into();
        let session = Self {
            id: id.clone(),
            engine_cfg: engine_cfg.clone(),
            design,
            subject,
            block: if pws_known { Block::Main } else { Block::Pws },
            pws_specs,
            main_specs,
            main_seed,
            next_index: 0,
            running: None,
            held: SubjectInput::default(),
            detects: VecDeque::new(),
            records: Vec::new(),
            summaries: Vec::new(),
            inputs: vec![InputRecord {
                step: 0,
                message: ClientMessage::Hello {
                    version: PROTOCOL_VERSION,
                    config: config.clone(),
                },
            }],
            steps: 0,
            divisor: divisor as u64,
            finished: false,
            store_root: None,
            saved_to: None,
            timestamps: Timestamps {
                created_unix: unix_now(),
                completed_unix: None,
            },
            notes: vec![LATENCY_NOTE.to_owned()],
            config: config.clone(),
        };
        let mut out = Outbox::default();
        out.both(ServerMessage::SessionAck {
            version: PROTOCOL_VERSION,
            session_id: id,
            seed: config.seed,
            config,
            engine: engine_cfg,
            trial_count: session.pws_specs.len() + planned,
        });
        session.announce(&mut out);
        Ok((session, out))
    }

    /// Writes the session under `root/<session_id>` when it finishes or shuts down.
    pub fn with_store(mut self, root: impl Into<PathBuf>) -> Self {
        self.store_root = Some(root.into());
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn is_running(&self) -> bool {
        self.running.is_some()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn subject_params(&self) -> &SubjectParams {
        &self.subject
    }

    pub fn inputs(&self) -> &[InputRecord] {
        &self.inputs
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn saved_to(&self) -> Option<&Path> {
        self.saved_to.as_deref()
    }

    fn current_specs(&self) -> &[TrialSpec] {
        match self.block {
            Block::Pws => &self.pws_specs,
            Block::Main => &self.main_specs,
        }
    }

    fn announce(&self, out: &mut Outbox) {
        let specs = self.current_specs();
        let Some(spec) = specs.get(self.next_index) else {
            return;
        };
        let msg = |trial: TrialSpec| ServerMessage::TrialConfig {
            block: self.block,
            index: self.next_index,
            of: specs.len(),
            trial,
            pws: self.subject.pws,
        };
        out.spectator.push(msg(spec.clone()));
        // The condition would tell the subject where to look.
        out.subject.push(msg(TrialSpec {
            course: None,
            ..spec.clone()
        }));
    }

    /// Processes one client message. An `Err` is a fatal error frame; the
    /// caller sends it and closes the connection.
    pub fn handle(&mut self, msg: ClientMessage) -> Result<Outbox, ServerMessage> {
        if self.finished {
            return Err(ServerMessage::error(
                ErrorCode::BadState,
                "session has finished",
            ));
        }
        self.inputs.push(InputRecord {
            step: self.steps,
            message: msg.clone(),
        });
        match msg {
            ClientMessage::Hello { .. } => Err(ServerMessage::error(
                ErrorCode::ProtocolViolation,
                "hello after the session was opened",
            )),
            ClientMessage::Input(frame) => self.input(frame),
            ClientMessage::Detect { side } => {
                if self.running.is_some() {
                    self.detects.push_back(side);
                }
                Ok(Outbox::default())
            }
            ClientMessage::StartTrial {} => self.start_trial(),
            ClientMessage::Abort {} => Ok(self.abort()),
        }
    }

    fn input(&mut self, frame: InputFrame) -> Result<Outbox, ServerMessage> {
        let values = [
            frame.steer_rate,
            frame.speed_target,
            frame.head_yaw_target,
            frame.head_pitch_target,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ServerMessage::error(
                ErrorCode::ProtocolViolation,
                "input values must be finite",
            ));
        }
        if self.config.mode == Mode::Lockstep {
            if let Some(run) = &self.running {
                let expected = run.engine.state().tick + 1;
                if frame.tick != expected {
                    return Err(ServerMessage::error(
                        ErrorCode::ProtocolViolation,
                        format!(
                            "lockstep input for tick {} but next tick is {expected}",
                            frame.tick
                        ),
                    ));
                }
            }
        }
        self.held = SubjectInput {
            steer_rate: frame.steer_rate,
            speed_target: frame.speed_target,
            head_yaw_target: frame.head_yaw_target,
            head_pitch_target: frame.head_pitch_target,
            detect: None,
        };
        if self.config.mode == Mode::Lockstep && self.running.is_some() {
            return self.step();
        }
        Ok(Outbox::default())
    }

    /// One realtime clock tick. Steps the running trial with the held input;
    /// does nothing between trials or in lockstep mode.
    pub fn advance(&mut self) -> Result<Outbox, ServerMessage> {
        if self.config.mode == Mode::Lockstep || self.running.is_none() || self.finished {
            return Ok(Outbox::default());
        }
        self.step()
    }

    fn step(&mut self) -> Result<Outbox, ServerMessage> {
        let mut out = Outbox::default();
        let Some(run) = self.running.as_mut() else {
            return Ok(out);
        };
        let input = SubjectInput {
            detect: self.detects.pop_front(),
            ..self.held
        };
        let events = run
            .engine
            .step(&input)
            .map_err(|e| ServerMessage::error(ErrorCode::Internal, e.to_string()))?
            .to_vec();
        self.steps += 1;
        let block = run.block;
        let trial_id = run.engine.spec().trial_id;
        for e in &events {
            push_event(&mut out, block, trial_id, e);
        }
        let ended = run.engine.is_ended();
        if ended || run.engine.state().tick % self.divisor == 0 {
            push_state(&mut out, &run.engine);
        }
        if ended {
            out.append(self.close_trial()?);
        }
        Ok(out)
    }

    fn start_trial(&mut self) -> Result<Outbox, ServerMessage> {
        if self.running.is_some() {
            return Err(ServerMessage::error(
                ErrorCode::BadState,
                "a trial is already running",
            ));
        }
        let spec = self
            .current_specs()
            .get(self.next_index)
            .cloned()
            .ok_or_else(|| ServerMessage::error(ErrorCode::BadState, "no trial left to start"))?;
        let engine = TrialEngine::new(self.engine_cfg.clone(), self.subject.clone(), spec)
            .map_err(|e| ServerMessage::error(ErrorCode::Internal, e.to_string()))?;
        self.detects.clear();
        let mut out = Outbox::default();
        let trial_id = engine.spec().trial_id;
        for e in &engine.log().events {
            push_event(&mut out, self.block, trial_id, e);
        }
        push_state(&mut out, &engine);
        self.running = Some(Running {
            block: self.block,
            index: self.next_index,
            engine,
        });
        Ok(out)
    }

    fn record_trial(&mut self, run: Running) -> TrialSummary {
        let spec = run.engine.spec().clone();
        let log = run.engine.into_log();
        let record = TrialRecord::new(run.block, spec, log.events, log.samples);
        let summary = TrialSummary {
            block: run.block,
            index: run.index,
            trial_id: record.spec.trial_id,
            outcome: match run.block {
                Block::Main => trial_outcome(&self.id, self.subject.field_loss, &record).ok(),
                Block::Pws => None,
            },
            walking_speed: match run.block {
                Block::Pws => trial_walking_speed(&record),
                Block::Main => None,
            },
        };
        self.records.push(record);
        self.summaries.push(summary.clone());
        summary
    }

    fn close_trial(&mut self) -> Result<Outbox, ServerMessage> {
        let mut out = Outbox::default();
        let Some(run) = self.running.take() else {
            return Ok(out);
        };
        let summary = self.record_trial(run);
        out.both(ServerMessage::TrialSummary(summary));
        self.next_index += 1;

        if self.next_index >= self.current_specs().len() && self.block == Block::Pws {
            self.finish_pws_block()?;
        }
        if self.next_index >= self.current_specs().len() {
            out.append(self.finish());
        } else {
            self.announce(&mut out);
        }
        Ok(out)
    }

    fn finish_pws_block(&mut self) -> Result<(), ServerMessage> {
        let pws = pws_estimate(self.records.iter().filter(|r| r.block == Block::Pws))
            .map_err(|e| ServerMessage::error(ErrorCode::BadState, e.to_string()))?;
        self.subject.pws = pws;
        self.subject.validate().map_err(invalid)?;
        if self.config.trials.is_none() {
            self.main_specs = generate_session_with(&self.design, &self.subject, self.main_seed);
        }
        for spec in &self.main_specs {
            if let Some(course) = &spec.course {
                course
                    .place(pws, &self.engine_cfg.placement)
                    .map_err(invalid)?;
            }
        }
        self.block = Block::Main;
        self.next_index = 0;
        Ok(())
    }

    /// Ends the current trial, if any, and the session.
    pub fn abort(&mut self) -> Outbox {
        let mut out = Outbox::default();
        if self.finished {
            return out;
        }
        if let Some(mut run) = self.running.take() {
            let before = run.engine.log().events.len();
            run.engine.abort();
            let trial_id = run.engine.spec().trial_id;
            for e in &run.engine.log().events[before..] {
                push_event(&mut out, run.block, trial_id, e);
            }
            let summary = self.record_trial(run);
            out.both(ServerMessage::TrialSummary(summary));
        }
        self.notes
            .push("session aborted before completion".to_owned());
        out.append(self.finish());
        out
    }

    fn finish(&mut self) -> Outbox {
        let mut out = Outbox::default();
        self.finished = true;
        self.timestamps.completed_unix = unix_now();
        if let Some(root) = self.store_root.clone() {
            match self.save(&root) {
                Ok(dir) => self.saved_to = Some(dir),
                Err(e) => out.both(ServerMessage::error(
                    ErrorCode::Internal,
                    format!("saving session: {e}"),
                )),
            }
        }
        out.both(ServerMessage::SessionSummary {
            session_id: self.id.clone(),
            pws: self.subject.pws,
            trials: self.summaries.clone(),
            saved_to: self.saved_to.as_ref().map(|p| p.display().to_string()),
        });
        out
    }

    /// Everything recorded so far as a store session.
    pub fn session_data(&self) -> SessionData {
        let manifest = SessionManifest {
            schema_version: SCHEMA_VERSION,
            session_id: self.id.clone(),
            seed: self.config.seed,
            subject: self.subject.clone(),
            engine: self.engine_cfg.clone(),
            policy: PolicySource::Live,
            trial_digest: SessionManifest::compute_digest(&self.pws_specs, &self.main_specs),
            pws_trials: self.pws_specs.clone(),
            trials: self.main_specs.clone(),
            timestamps: self.timestamps.clone(),
            notes: self.notes.clone(),
            extra: Default::default(),
        };
        SessionData::new(manifest, self.records.clone())
    }

    /// Writes the session and its input log under `root/<session_id>`.
    pub fn save(&self, root: &Path) -> Result<PathBuf, StoreError> {
        let dir = store::session_dir(root, &self.id);
        store::write_session(&dir, &self.session_data())?;
        let path = dir.join(INPUTS_FILE);
        let io = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io)?);
        for rec in &self.inputs {
            let line = serde_json::to_string(rec).expect("input records serialize");
            writeln!(f, "{line}").map_err(io)?;
        }
        f.flush().map_err(io)?;
        Ok(dir)
    }

    /// Stops the session for a server shutdown, writing what was recorded.
    pub fn shutdown(&mut self) -> Outbox {
        if self.finished {
            return Outbox::default();
        }
        self.notes
            .push("server shut down during the session".to_owned());
        // Logged so a replay stops at the same step.
        self.inputs.push(InputRecord {
            step: self.steps,
            message: ClientMessage::Abort {},
        });
        self.abort()
    }
}

fn push_event(out: &mut Outbox, block: Block, trial_id: u32, e: &Event) {
    out.spectator.push(ServerMessage::Event {
        block,
        trial_id,
        event: e.clone(),
    });
    let mut masked = e.clone();
    if let EventKind::PedestriansSpawned {
        pedestrians,
        collision_point,
        ..
    } = &mut masked.kind
    {
        pedestrians.clear();
        *collision_point = None;
    }
    out.subject.push(ServerMessage::Event {
        block,
        trial_id,
        event: masked,
    });
}

fn push_state(out: &mut Outbox, engine: &TrialEngine) {
    let state = engine.state();
    let trial_id = engine.spec().trial_id;
    let obs = engine.observe();
    out.subject.push(ServerMessage::State {
        tick: state.tick,
        t: state.t,
        trial_id,
        phase: state.phase,
        subject: state.subject,
        pedestrians: obs
            .visible
            .into_iter()
            .map(|p| PedestrianView {
                id: p.id,
                position: p.position,
                velocity: p.velocity,
                role: None,
            })
            .collect(),
    });
    out.spectator.push(ServerMessage::State {
        tick: state.tick,
        t: state.t,
        trial_id,
        phase: state.phase,
        subject: state.subject,
        pedestrians: state
            .pedestrians
            .iter()
            .map(|p| PedestrianView {
                id: p.id,
                position: p.position,
                velocity: p.velocity,
                role: Some(p.role),
            })
            .collect(),
    });
}

/// Reads an `inputs.jsonl` file.
pub fn read_inputs(path: &Path) -> Result<Vec<InputRecord>, StoreError> {
    let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let body = line.trim_end();
        if !body.is_empty() {
            let rec = serde_json::from_str(body).map_err(|e| StoreError::Integrity {
                path: path.to_path_buf(),
                offset,
                record: i + 1,
                reason: e.to_string(),
            })?;
            out.push(rec);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

/// Re-runs a recorded session offline. The first record must be the `hello`.
///
/// A realtime trial still running after the last record is stepped to its
/// end with the held input, as the server clock would have done.
pub fn replay(
    id: &str,
    inputs: &[InputRecord],
    engine_cfg: EngineConfig,
    design: SessionDesign,
) -> Result<LiveSession, ServerMessage> {
    let Some((first, rest)) = inputs.split_first() else {
        return Err(ServerMessage::error(
            ErrorCode::ProtocolViolation,
            "empty input log",
        ));
    };
    let ClientMessage::Hello { config, .. } = &first.message else {
        return Err(ServerMessage::error(
            ErrorCode::ProtocolViolation,
            "input log does not start with hello",
        ));
    };
    let (mut session, _) = LiveSession::open(id, config.clone(), engine_cfg, design)?;
    for rec in rest {
        while session.steps < rec.step && session.running.is_some() {
            session.step()?;
        }
        if session.steps != rec.step {
            return Err(ServerMessage::error(
                ErrorCode::BadState,
                format!(
                    "input log diverged: message at step {} but replay is at {}",
                    rec.step, session.steps
                ),
            ));
        }
        session.handle(rec.message.clone())?;
    }
    // The clock kept running after the last message.
    while session.running.is_some() && session.config.mode == Mode::Realtime {
        session.step()?;
    }
    Ok(session)
}
