//! Fixed-step trial simulation.
//!
//! One [`TrialEngine`] runs one trial. Each call to [`TrialEngine::step`]
//! advances the clock by exactly one tick, integrates the subject's pose from
//! a [`SubjectInput`], moves pedestrians along their straight lines and emits
//! lifecycle events. Everything is a pure function of the trial spec and the
//! input stream, so identical inputs give identical logs.

use crate::geometry::{normalize_deg, relative_bearing_deg, Vec2};
use crate::scenario::{
    collision_point, place_distractors, DistractorConfig, FieldLoss, NominalPath, PedestrianInit,
    PlacementRules, Role, ScenarioError, SubjectParams, TrialSpec,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DT: f64 = 1.0 / 72.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("rejected input: {0}")]
    RejectedInput(String),
    #[error("trial has already ended")]
    TrialEnded,
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub dt: f64,
    /// deg/s
    pub max_steer_rate: f64,
    /// deg/s, applies to yaw and pitch
    pub head_slew_rate: f64,
    /// m/s^2
    pub speed_slew_rate: f64,
    pub max_speed: f64,
    /// Seconds after the subject passes the collision point before the trial ends.
    pub post_collision_point_time: f64,
    /// Hard stop for trials where the subject never reaches the end trigger.
    pub max_trial_duration: f64,
    /// Constant eye height, logged as metadata only.
    pub eye_height: f64,
    pub distractors: DistractorConfig,
    pub placement: PlacementRules,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            max_steer_rate: 120.0,
            head_slew_rate: 300.0,
            speed_slew_rate: 1.5,
            max_speed: 3.0,
            post_collision_point_time: 2.0,
            max_trial_duration: 120.0,
            eye_height: 1.6,
            distractors: DistractorConfig::default(),
            placement: PlacementRules::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let positive = [
            ("dt", self.dt),
            ("max_steer_rate", self.max_steer_rate),
            ("head_slew_rate", self.head_slew_rate),
            ("speed_slew_rate", self.speed_slew_rate),
            ("max_speed", self.max_speed),
            ("max_trial_duration", self.max_trial_duration),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(EngineError::InvalidConfig(format!(
                    "{name} must be > 0, got {v}"
                )));
            }
        }
        if self.dt > 1.0 / 60.0 + 1e-12 {
            return Err(EngineError::InvalidConfig(format!(
                "dt must be at most 1/60 s, got {}",
                self.dt
            )));
        }
        if !(self.post_collision_point_time >= 0.0) {
            return Err(EngineError::InvalidConfig(
                "post_collision_point_time must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubjectPose {
    pub position: Vec2,
    /// Degrees from +Y, positive to the right.
    pub body_heading: f64,
    pub speed: f64,
    /// Head yaw relative to the body, positive to the right.
    pub head_yaw: f64,
    /// Positive is up.
    pub head_pitch: f64,
    pub head_roll: f64,
}

impl SubjectPose {
    pub fn gaze_heading(&self) -> f64 {
        normalize_deg(self.body_heading + self.head_yaw)
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::from_heading(self.body_heading) * self.speed
    }

    /// Head yaw relative to the walking path rather than the body.
    pub fn yaw_from_path(&self) -> f64 {
        self.gaze_heading()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pedestrian {
    pub id: u32,
    pub position: Vec2,
    pub velocity: Vec2,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PreTrigger,
    Active,
    Ended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub t: f64,
    pub tick: u64,
    pub subject: SubjectPose,
    pub pedestrians: Vec<Pedestrian>,
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn mirrored(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseClass {
    HitCorrect,
    HitWrongSide,
    FalseAlarm,
    PostCollision,
    Miss,
}

impl ResponseClass {
    pub fn is_hit(self) -> bool {
        matches!(
            self,
            ResponseClass::HitCorrect | ResponseClass::HitWrongSide
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    EndTrigger,
    CollisionPointPassed,
    Timeout,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    TrialStart {
        trial_id: u32,
    },
    PedestriansSpawned {
        subject_position: Vec2,
        collision_point: Option<Vec2>,
        pedestrians: Vec<Pedestrian>,
    },
    DetectPress {
        side: Side,
        response: ResponseClass,
    },
    /// Emitted once per pedestrian, at the tick after the closest approach of
    /// the first overlap episode.
    Collision {
        pedestrian_id: u32,
        role: Role,
        onset_t: f64,
        closest_t: f64,
        min_distance: f64,
    },
    EndTrigger {
        progress: f64,
    },
    TrialEnd {
        reason: EndReason,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Position in the trial's event stream; strictly increasing.
    pub seq: u32,
    pub tick: u64,
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubjectInput {
    /// deg/s applied to the body heading.
    pub steer_rate: f64,
    pub speed_target: f64,
    pub head_yaw_target: f64,
    pub head_pitch_target: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detect: Option<Side>,
}

impl SubjectInput {
    pub fn walk(speed: f64) -> Self {
        Self {
            speed_target: speed,
            ..Self::default()
        }
    }

    fn check_finite(&self) -> Result<(), EngineError> {
        let fields = [
            ("steer_rate", self.steer_rate),
            ("speed_target", self.speed_target),
            ("head_yaw_target", self.head_yaw_target),
            ("head_pitch_target", self.head_pitch_target),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(EngineError::RejectedInput(format!("{name} is not finite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub tick: u64,
    pub t: f64,
    pub subject: SubjectPose,
    /// Positions indexed by pedestrian id; empty before the spawn.
    pub pedestrians: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrialLog {
    pub events: Vec<Event>,
    pub samples: Vec<PoseSample>,
}

/// Strict disc overlap: tangency is not a collision.
pub fn check_collision(subject_pos: Vec2, ped_pos: Vec2, r_s: f64, r_p: f64) -> bool {
    subject_pos.distance(ped_pos) < r_s + r_p
}

/// Whether `ped_pos` falls inside the subject's gaze-centered field.
pub fn visible(subject: &SubjectPose, ped_pos: Vec2, params: &SubjectParams) -> bool {
    let alpha = relative_bearing_deg(subject.position, subject.gaze_heading(), ped_pos);
    if alpha.abs() > params.fov_half_angle {
        return false;
    }
    match params.field_loss {
        FieldLoss::None => true,
        FieldLoss::LeftHemianopia => alpha >= 0.0,
        FieldLoss::RightHemianopia => alpha <= 0.0,
    }
}

/// Response classification given what is known at press time.
///
/// `target_x` is the colliding pedestrian's lateral offset from the path line,
/// `None` on null trials or before the pedestrians appear.
pub fn classify_response(
    target_x: Option<f64>,
    contact_started: bool,
    side: Side,
) -> ResponseClass {
    let Some(x) = target_x else {
        return ResponseClass::FalseAlarm;
    };
    if contact_started {
        return ResponseClass::PostCollision;
    }
    let correct = match side {
        Side::Right => x > 0.0,
        Side::Left => x < 0.0,
    };
    if correct {
        ResponseClass::HitCorrect
    } else {
        ResponseClass::HitWrongSide
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Contact {
    active: bool,
    emitted: bool,
    onset_t: f64,
    min_distance: f64,
    min_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisiblePedestrian {
    pub id: u32,
    pub position: Vec2,
    pub velocity: Vec2,
}

/// What a subject (synthetic or human) is allowed to know this tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub tick: u64,
    pub t: f64,
    pub phase: Phase,
    pub subject: SubjectPose,
    /// Time of the pedestrian spawn, once it happened.
    pub spawn_t: Option<f64>,
    pub visible: Vec<VisiblePedestrian>,
}

#[derive(Debug, Clone)]
pub struct TrialEngine {
    cfg: EngineConfig,
    params: SubjectParams,
    spec: TrialSpec,
    state: WorldState,
    /// Local-frame placements, translated at spawn.
    planned: Vec<PedestrianInit>,
    contacts: Vec<Contact>,
    spawn_t: Option<f64>,
    collision_point: Option<Vec2>,
    cp_passed_t: Option<f64>,
    next_seq: u32,
    log: TrialLog,
}

impl TrialEngine {
    pub fn new(
        cfg: EngineConfig,
        params: SubjectParams,
        spec: TrialSpec,
    ) -> Result<Self, EngineError> {
        cfg.validate()?;
        params.validate()?;
        spec.validate(&cfg.placement)?;
        let contact = 2.0 * params.shoulder_radius;
        let mut planned = Vec::with_capacity(spec.distractor_count as usize + 1);
        if let Some(course) = &spec.course {
            planned.push(course.place(params.pws, &cfg.placement)?);
        }
        let horizon = (spec.end_trigger_distance - spec.start_trigger_distance) / params.pws
            + cfg.post_collision_point_time;
        let nominal = NominalPath {
            origin: Vec2::ZERO,
            direction: Vec2::new(0.0, 1.0),
            speed: params.pws,
            duration: horizon,
        };
        planned.extend(place_distractors(
            spec.distractor_count as usize,
            spec.rng_seed,
            &nominal,
            &cfg.distractors,
            contact,
        )?);
        let state = WorldState {
            t: 0.0,
            tick: 0,
            subject: SubjectPose::default(),
            pedestrians: Vec::new(),
            phase: Phase::PreTrigger,
        };
        let mut engine = Self {
            cfg,
            params,
            spec,
            state,
            planned,
            contacts: Vec::new(),
            spawn_t: None,
            collision_point: None,
            cp_passed_t: None,
            next_seq: 0,
            log: TrialLog::default(),
        };
        let trial_id = engine.spec.trial_id;
        engine.emit(EventKind::TrialStart { trial_id });
        engine.record_sample();
        Ok(engine)
    }

    /// Places the subject somewhere other than the path origin before the first step.
    pub fn with_initial_pose(mut self, pose: SubjectPose) -> Self {
        debug_assert_eq!(self.state.tick, 0);
        self.state.subject = pose;
        self.log.samples.clear();
        self.record_sample();
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn params(&self) -> &SubjectParams {
        &self.params
    }

    pub fn spec(&self) -> &TrialSpec {
        &self.spec
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn log(&self) -> &TrialLog {
        &self.log
    }

    pub fn into_log(self) -> TrialLog {
        self.log
    }

    pub fn spawn_t(&self) -> Option<f64> {
        self.spawn_t
    }

    pub fn collision_point(&self) -> Option<Vec2> {
        self.collision_point
    }

    pub fn is_ended(&self) -> bool {
        self.state.phase == Phase::Ended
    }

    pub fn observe(&self) -> Observation {
        let visible = self
            .state
            .pedestrians
            .iter()
            .filter(|p| visible(&self.state.subject, p.position, &self.params))
            .map(|p| VisiblePedestrian {
                id: p.id,
                position: p.position,
                velocity: p.velocity,
            })
            .collect();
        Observation {
            tick: self.state.tick,
            t: self.state.t,
            phase: self.state.phase,
            subject: self.state.subject,
            spawn_t: self.spawn_t,
            visible,
        }
    }

    fn target(&self) -> Option<&Pedestrian> {
        self.state
            .pedestrians
            .iter()
            .find(|p| p.role == Role::Colliding)
    }

    /// Classifies a press against the current state.
    pub fn register_detection(&self, side: Side) -> ResponseClass {
        let target = self.target();
        let contact_started = target
            .map(|p| {
                let c = &self.contacts[p.id as usize];
                c.active || c.emitted
            })
            .unwrap_or(false);
        classify_response(target.map(|p| p.position.x), contact_started, side)
    }

    fn emit(&mut self, kind: EventKind) {
        let event = Event {
            seq: self.next_seq,
            tick: self.state.tick,
            t: self.state.t,
            kind,
        };
        self.next_seq += 1;
        self.log.events.push(event);
    }

    fn record_sample(&mut self) {
        self.log.samples.push(PoseSample {
            tick: self.state.tick,
            t: self.state.t,
            subject: self.state.subject,
            pedestrians: self.state.pedestrians.iter().map(|p| p.position).collect(),
        });
    }

    /// Advances one tick. Returns the events emitted during the tick.
    ///
    /// Non-finite inputs are rejected without touching the state.
    pub fn step(&mut self, input: &SubjectInput) -> Result<&[Event], EngineError> {
        if self.is_ended() {
            return Err(EngineError::TrialEnded);
        }
        input.check_finite()?;
        let first_event = self.log.events.len();
        let dt = self.cfg.dt;

        self.integrate_subject(input, dt);
        for p in &mut self.state.pedestrians {
            p.position += p.velocity * dt;
        }
        self.state.tick += 1;
        self.state.t = self.state.tick as f64 * dt;

        if self.state.phase == Phase::PreTrigger
            && self.progress() >= self.spec.start_trigger_distance
        {
            self.spawn()?;
        }
        if let Some(side) = input.detect {
            let response = self.register_detection(side);
            self.emit(EventKind::DetectPress { side, response });
        }
        self.track_contacts();
        self.check_end();
        self.record_sample();
        Ok(&self.log.events[first_event..])
    }

    /// Ends the trial early (e.g. a live client aborted).
    pub fn abort(&mut self) {
        if !self.is_ended() {
            self.finish(EndReason::Aborted);
        }
    }

    fn progress(&self) -> f64 {
        self.state.subject.position.y
    }

    fn integrate_subject(&mut self, input: &SubjectInput, dt: f64) {
        let cfg = &self.cfg;
        let s = &mut self.state.subject;
        let steer = input
            .steer_rate
            .clamp(-cfg.max_steer_rate, cfg.max_steer_rate);
        s.body_heading = normalize_deg(s.body_heading + steer * dt);
        let target_speed = input.speed_target.clamp(0.0, cfg.max_speed);
        s.speed = slew(s.speed, target_speed, cfg.speed_slew_rate * dt).max(0.0);
        let yaw_target = normalize_deg(input.head_yaw_target);
        s.head_yaw = normalize_deg(slew(s.head_yaw, yaw_target, cfg.head_slew_rate * dt));
        let pitch_target = input.head_pitch_target.clamp(-90.0, 90.0);
        s.head_pitch = slew(s.head_pitch, pitch_target, cfg.head_slew_rate * dt);
        s.position += Vec2::from_heading(s.body_heading) * (s.speed * dt);
    }

    fn spawn(&mut self) -> Result<(), EngineError> {
        let origin = self.state.subject.position;
        let cp = match &self.spec.course {
            Some(course) => Some(collision_point(
                self.params.pws,
                course.ttc_design,
                origin,
                Vec2::new(0.0, 1.0),
            )?),
            None => None,
        };
        self.state.pedestrians = self
            .planned
            .iter()
            .enumerate()
            .map(|(i, init)| {
                let w = init.to_world(origin);
                Pedestrian {
                    id: i as u32,
                    position: w.initial_position,
                    velocity: w.velocity,
                    role: w.role,
                }
            })
            .collect();
        self.contacts = vec![Contact::default(); self.state.pedestrians.len()];
        self.spawn_t = Some(self.state.t);
        self.collision_point = cp;
        self.state.phase = Phase::Active;
        self.emit(EventKind::PedestriansSpawned {
            subject_position: origin,
            collision_point: cp,
            pedestrians: self.state.pedestrians.clone(),
        });
        Ok(())
    }

    fn track_contacts(&mut self) {
        let r = self.params.shoulder_radius;
        let subject = self.state.subject.position;
        let t = self.state.t;
        let mut pending = Vec::new();
        for p in &self.state.pedestrians {
            let c = &mut self.contacts[p.id as usize];
            if c.emitted {
                continue;
            }
            let d = subject.distance(p.position);
            let overlapping = check_collision(subject, p.position, r, r);
            if !c.active {
                if overlapping {
                    *c = Contact {
                        active: true,
                        emitted: false,
                        onset_t: t,
                        min_distance: d,
                        min_t: t,
                    };
                }
            } else if overlapping && d < c.min_distance {
                c.min_distance = d;
                c.min_t = t;
            } else {
                c.emitted = true;
                pending.push((p.id, p.role, *c));
            }
        }
        for (id, role, c) in pending {
            self.emit_collision(id, role, c);
        }
    }

    fn emit_collision(&mut self, pedestrian_id: u32, role: Role, c: Contact) {
        self.emit(EventKind::Collision {
            pedestrian_id,
            role,
            onset_t: c.onset_t,
            closest_t: c.min_t,
            min_distance: c.min_distance,
        });
    }

    fn check_end(&mut self) {
        let t = self.state.t;
        if let (Some(cp), None) = (self.collision_point, self.cp_passed_t) {
            if self.progress() >= cp.y {
                self.cp_passed_t = Some(t);
            }
        }
        if self.state.phase == Phase::Active && self.progress() >= self.spec.end_trigger_distance {
            let progress = self.progress();
            self.emit(EventKind::EndTrigger { progress });
            self.finish(EndReason::EndTrigger);
        } else if self
            .cp_passed_t
            .is_some_and(|tp| t - tp >= self.cfg.post_collision_point_time - 1e-9)
        {
            self.finish(EndReason::CollisionPointPassed);
        } else if t >= self.cfg.max_trial_duration {
            self.finish(EndReason::Timeout);
        }
    }

    fn finish(&mut self, reason: EndReason) {
        // Flush overlaps still in progress so every contact is logged.
        let open: Vec<_> = self
            .state
            .pedestrians
            .iter()
            .filter_map(|p| {
                let c = self.contacts[p.id as usize];
                (c.active && !c.emitted).then_some((p.id, p.role, c))
            })
            .collect();
        for (id, role, c) in open {
            self.contacts[id as usize].emitted = true;
            self.emit_collision(id, role, c);
        }
        self.state.phase = Phase::Ended;
        self.emit(EventKind::TrialEnd { reason });
    }
}

fn slew(current: f64, target: f64, max_delta: f64) -> f64 {
    current + (target - current).clamp(-max_delta, max_delta)
}
