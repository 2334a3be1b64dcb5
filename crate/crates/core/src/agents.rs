//! Synthetic subjects for batch sessions.
//!
//! A policy sees only [`Observation`]s, which already exclude pedestrians
//! outside the subject's field. The scanning policy sweeps the head
//! sinusoidally, presses once a pedestrian has been in view long enough, looks
//! big enough and is predicted to pass too close, and then sidesteps when the
//! predicted time to contact drops below a trigger.

use crate::engine::{Observation, Phase, Side, SubjectInput, VisiblePedestrian};
use crate::geometry::{closest_approach, normalize_deg, time_to_contact, Vec2};
use crate::scenario::{FieldLoss, SubjectParams, TrialSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::TAU;

pub trait SubjectPolicy {
    /// Called before the first tick of every trial.
    fn begin_trial(&mut self, trial: &TrialSpec);
    fn act(&mut self, obs: &Observation) -> SubjectInput;
    /// Threats considered on the last `act` call.
    fn threats(&self) -> &[ThreatEstimate] {
        &[]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// deg
    pub scan_amplitude: f64,
    /// Fractional per-trial jitter applied to the amplitude.
    #[serde(default)]
    pub scan_amplitude_jitter: f64,
    /// s
    pub scan_period: f64,
    /// deg, negative = toward the (standardized) blind side
    pub scan_bias: f64,
    /// s of continuous visibility before a press
    pub detect_min_visible: f64,
    /// deg of angular size
    pub detect_size_threshold: f64,
    /// m of predicted closest approach
    pub threat_miss_distance: f64,
    /// Closest approaches further out than this are ignored, s.
    pub threat_horizon: f64,
    /// s
    pub avoid_ttc_trigger: f64,
    /// m
    pub avoid_lateral_offset: f64,
    /// deg of body heading while sidestepping
    pub avoid_heading: f64,
    /// Speed multiplier while sidestepping.
    pub avoid_speed_factor: f64,
    /// deg
    pub pitch_offset: f64,
}

impl PolicyParams {
    pub fn nv_default() -> Self {
        Self {
            scan_amplitude: 25.0,
            scan_amplitude_jitter: 0.15,
            scan_period: 3.0,
            scan_bias: 0.0,
            detect_min_visible: 0.3,
            detect_size_threshold: 3.5,
            threat_miss_distance: 0.6,
            threat_horizon: 10.0,
            avoid_ttc_trigger: 1.0,
            avoid_lateral_offset: 0.8,
            avoid_heading: 50.0,
            avoid_speed_factor: 0.5,
            pitch_offset: 2.0,
        }
    }

    pub fn hh_default() -> Self {
        Self {
            scan_amplitude: 60.0,
            scan_bias: -4.0,
            ..Self::nv_default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let nonneg = [
            ("scan_amplitude", self.scan_amplitude),
            ("scan_amplitude_jitter", self.scan_amplitude_jitter),
            ("detect_min_visible", self.detect_min_visible),
            ("detect_size_threshold", self.detect_size_threshold),
            ("threat_miss_distance", self.threat_miss_distance),
            ("threat_horizon", self.threat_horizon),
            ("avoid_ttc_trigger", self.avoid_ttc_trigger),
            ("avoid_lateral_offset", self.avoid_lateral_offset),
            ("avoid_heading", self.avoid_heading),
            ("avoid_speed_factor", self.avoid_speed_factor),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.scan_period > 0.0) {
            return Err(format!("scan_period must be > 0, got {}", self.scan_period));
        }
        if !(self.scan_bias.is_finite() && self.pitch_offset.is_finite()) {
            return Err("scan_bias and pitch_offset must be finite".into());
        }
        Ok(())
    }
}

/// Named presets shipped with the scenario schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Nv,
    HhLeft,
    HhRight,
}

impl Profile {
    pub fn field_loss(self) -> FieldLoss {
        match self {
            Profile::Nv => FieldLoss::None,
            Profile::HhLeft => FieldLoss::LeftHemianopia,
            Profile::HhRight => FieldLoss::RightHemianopia,
        }
    }

    pub fn default_params(self) -> PolicyParams {
        match self {
            Profile::Nv => PolicyParams::nv_default(),
            Profile::HhLeft | Profile::HhRight => PolicyParams::hh_default(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Nv => "nv",
            Profile::HhLeft => "hh-left",
            Profile::HhRight => "hh-right",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nv" => Ok(Profile::Nv),
            "hh-left" => Ok(Profile::HhLeft),
            "hh-right" => Ok(Profile::HhRight),
            other => Err(format!(
                "unknown profile {other:?} (expected nv, hh-left, hh-right)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreatEstimate {
    pub pedestrian_id: u32,
    pub predicted_miss_distance: f64,
    /// Time until the shoulder discs touch, or until the closest approach
    /// when they never do.
    pub predicted_ttc: f64,
    /// deg
    pub angular_size: f64,
    pub visible_dwell: f64,
}

/// Full angle subtended by a disc of radius `radius` at `distance`, degrees.
pub fn angular_size_deg(radius: f64, distance: f64) -> f64 {
    2.0 * (radius / distance).atan().to_degrees()
}

/// Constant walk at a fixed speed; never turns, never looks around, never presses.
#[derive(Debug, Clone)]
pub struct ScriptedWalker {
    pub speed: f64,
}

impl ScriptedWalker {
    pub fn new(pws: f64) -> Self {
        Self { speed: pws }
    }
}

impl SubjectPolicy for ScriptedWalker {
    fn begin_trial(&mut self, _trial: &TrialSpec) {}

    fn act(&mut self, _obs: &Observation) -> SubjectInput {
        SubjectInput::walk(self.speed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Track {
    id: u32,
    position: Vec2,
    velocity: Vec2,
    seen_at: f64,
}

impl Track {
    fn extrapolate(&self, t: f64) -> Vec2 {
        self.position + self.velocity * (t - self.seen_at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Maneuver {
    Walking,
    Evading { side: Side },
    Recovering,
}

/// Sinusoidal head scan with a detection and sidestep state machine.
#[derive(Debug, Clone)]
pub struct ScanPolicy {
    params: PolicyParams,
    subject: SubjectParams,
    speed: f64,
    max_steer: f64,
    // per trial
    phase: f64,
    amplitude: f64,
    last_t: Option<f64>,
    dwell: BTreeMap<u32, f64>,
    threats: Vec<ThreatEstimate>,
    locked: Option<Track>,
    pressed: bool,
    maneuver: Maneuver,
}

impl ScanPolicy {
    /// `walking_speed` is the speed the policy walks at; usually the subject's PWS.
    pub fn new(params: PolicyParams, subject: SubjectParams, walking_speed: f64) -> Self {
        Self {
            amplitude: params.scan_amplitude,
            params,
            subject,
            speed: walking_speed,
            max_steer: 120.0,
            phase: 0.0,
            last_t: None,
            dwell: BTreeMap::new(),
            threats: Vec::new(),
            locked: None,
            pressed: false,
            maneuver: Maneuver::Walking,
        }
    }

    /// Normal-vision policy.
    pub fn nv(params: PolicyParams, pws: f64) -> Self {
        Self::new(params, SubjectParams::new(pws, FieldLoss::None), pws)
    }

    /// Hemianopic policy; the engine applies the field mask, the policy only
    /// uses `field_loss` to break pass-side ties toward its seeing side.
    pub fn hh(params: PolicyParams, pws: f64, field_loss: FieldLoss) -> Self {
        Self::new(params, SubjectParams::new(pws, field_loss), pws)
    }

    pub fn with_max_steer(mut self, max_steer: f64) -> Self {
        self.max_steer = max_steer;
        self
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn has_pressed(&self) -> bool {
        self.pressed
    }

    /// Head yaw target of the scan schedule at time `t`, deg.
    ///
    /// `scan_bias` is given in standardized form (negative = blind side), so
    /// it is mirrored for right-sided field loss.
    pub fn scan_yaw(&self, t: f64) -> f64 {
        let bias = match self.subject.field_loss {
            FieldLoss::RightHemianopia => -self.params.scan_bias,
            _ => self.params.scan_bias,
        };
        bias + self.amplitude * (TAU * t / self.params.scan_period + self.phase).sin()
    }

    fn default_side(&self) -> Side {
        match self.subject.field_loss {
            FieldLoss::LeftHemianopia | FieldLoss::None => Side::Right,
            FieldLoss::RightHemianopia => Side::Left,
        }
    }

    fn estimate(&self, obs: &Observation, p: &VisiblePedestrian, dwell: f64) -> ThreatEstimate {
        let s = &obs.subject;
        let approach = closest_approach(s.position, s.velocity(), p.position, p.velocity);
        let distance = s.position.distance(p.position);
        ThreatEstimate {
            pedestrian_id: p.id,
            predicted_miss_distance: approach.distance,
            predicted_ttc: self.ttc(s.position, s.velocity(), p.position, p.velocity),
            angular_size: angular_size_deg(self.subject.shoulder_radius, distance),
            visible_dwell: dwell,
        }
    }

    fn update_perception(&mut self, obs: &Observation) {
        let dt = obs.t - self.last_t.unwrap_or(obs.t);
        self.last_t = Some(obs.t);
        let mut dwell = BTreeMap::new();
        for p in &obs.visible {
            let prev = self.dwell.get(&p.id).copied();
            // Dwell counts continuous visibility; it restarts after any gap.
            dwell.insert(p.id, prev.map_or(0.0, |d| d + dt));
        }
        self.dwell = dwell;
        self.threats = obs
            .visible
            .iter()
            .map(|p| self.estimate(obs, p, self.dwell[&p.id]))
            .collect();
        if let Some(track) = &mut self.locked {
            if let Some(p) = obs.visible.iter().find(|p| p.id == track.id) {
                track.position = p.position;
                track.velocity = p.velocity;
                track.seen_at = obs.t;
            }
        }
    }

    fn ttc(&self, p: Vec2, v: Vec2, q: Vec2, w: Vec2) -> f64 {
        let contact = 2.0 * self.subject.shoulder_radius;
        time_to_contact(p, v, q, w, contact).unwrap_or_else(|| closest_approach(p, v, q, w).time)
    }

    fn maybe_press(&mut self, obs: &Observation) -> Option<Side> {
        if self.pressed || obs.phase != Phase::Active {
            return None;
        }
        let prm = &self.params;
        let threat = self.threats.iter().find(|th| {
            th.visible_dwell >= prm.detect_min_visible
                && th.angular_size >= prm.detect_size_threshold
                && th.predicted_miss_distance < prm.threat_miss_distance
                && th.predicted_ttc <= prm.threat_horizon
        })?;
        let p = obs.visible.iter().find(|p| p.id == threat.pedestrian_id)?;
        self.pressed = true;
        self.locked = Some(Track {
            id: p.id,
            position: p.position,
            velocity: p.velocity,
            seen_at: obs.t,
        });
        Some(if p.position.x < 0.0 {
            Side::Left
        } else {
            Side::Right
        })
    }

    /// Picks the sidestep direction with the larger predicted miss distance.
    fn choose_side(&self, obs: &Observation, track: &Track) -> Side {
        let s = &obs.subject;
        let ped = track.extrapolate(obs.t);
        let speed = self.speed * self.params.avoid_speed_factor;
        let miss = |heading: f64| {
            closest_approach(
                s.position,
                Vec2::from_heading(heading) * speed,
                ped,
                track.velocity,
            )
            .distance
        };
        let right = miss(self.params.avoid_heading);
        let left = miss(-self.params.avoid_heading);
        if (right - left).abs() < 1e-6 {
            self.default_side()
        } else if right > left {
            Side::Right
        } else {
            Side::Left
        }
    }

    fn steer_toward(&self, heading: f64, target: f64) -> f64 {
        (normalize_deg(target - heading) * 8.0).clamp(-self.max_steer, self.max_steer)
    }

    fn locomotion(&mut self, obs: &Observation) -> (f64, f64) {
        let s = obs.subject;
        let Some(track) = self.locked else {
            return (0.0, self.speed);
        };
        let ped = track.extrapolate(obs.t);
        let approach = closest_approach(s.position, s.velocity(), ped, track.velocity);
        let ttc = self.ttc(s.position, s.velocity(), ped, track.velocity);
        let prm = &self.params;
        self.maneuver = match self.maneuver {
            Maneuver::Walking
                if ttc <= prm.avoid_ttc_trigger
                    && approach.time > 0.0
                    && approach.distance < prm.avoid_lateral_offset =>
            {
                Maneuver::Evading {
                    side: self.choose_side(obs, &track),
                }
            }
            Maneuver::Evading { .. }
                if approach.time <= 0.0 || approach.distance >= prm.avoid_lateral_offset =>
            {
                Maneuver::Recovering
            }
            Maneuver::Recovering
                if approach.time > 0.0 && approach.distance < prm.threat_miss_distance =>
            {
                Maneuver::Evading {
                    side: self.choose_side(obs, &track),
                }
            }
            m => m,
        };
        match self.maneuver {
            Maneuver::Walking => (0.0, self.speed),
            Maneuver::Evading { side } => {
                let target = match side {
                    Side::Right => prm.avoid_heading,
                    Side::Left => -prm.avoid_heading,
                };
                (
                    self.steer_toward(s.body_heading, target),
                    self.speed * prm.avoid_speed_factor,
                )
            }
            Maneuver::Recovering => (self.steer_toward(s.body_heading, 0.0), self.speed),
        }
    }
}

impl SubjectPolicy for ScanPolicy {
    fn begin_trial(&mut self, trial: &TrialSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(trial.rng_seed ^ 0x5ca1_ab1e_0000_0000);
        self.phase = rng.random_range(0.0..TAU);
        let j = self.params.scan_amplitude_jitter;
        self.amplitude = self.params.scan_amplitude
            * if j > 0.0 {
                rng.random_range(1.0 - j..=1.0 + j)
            } else {
                1.0
            };
        self.last_t = None;
        self.dwell.clear();
        self.threats.clear();
        self.locked = None;
        self.pressed = false;
        self.maneuver = Maneuver::Walking;
    }

    fn act(&mut self, obs: &Observation) -> SubjectInput {
        self.update_perception(obs);
        let detect = self.maybe_press(obs);
        let (steer_rate, speed_target) = self.locomotion(obs);
        // Yaw is commanded relative to the body; the schedule is relative to the path.
        let head_yaw_target = normalize_deg(self.scan_yaw(obs.t) - obs.subject.body_heading);
        SubjectInput {
            steer_rate,
            speed_target,
            head_yaw_target,
            head_pitch_target: self.params.pitch_offset,
            detect,
        }
    }

    fn threats(&self) -> &[ThreatEstimate] {
        &self.threats
    }
}
