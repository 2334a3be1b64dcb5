//! Collision-course geometry and trial schedules.
//!
//! All placement functions work in a local frame whose origin is the
//! subject's position when pedestrians appear and whose +Y axis is the walking
//! direction. Use [`PedestrianInit::to_world`] to move a placement into the
//! path frame.

use crate::geometry::Vec2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SHOULDER_RADIUS: f64 = 0.25;
pub const DEFAULT_FOV_HALF_ANGLE: f64 = 45.0;
pub const DEFAULT_TTC: f64 = 6.0;
pub const DEFAULT_OVERTAKEN_INIT_DISTANCE: f64 = 2.0;
pub const DEFAULT_DISTRACTOR_COUNT: u32 = 10;
pub const DEFAULT_START_TRIGGER: f64 = 3.0;
pub const DEFAULT_END_TRIGGER: f64 = 10.0;
pub const COLLISION_TRIALS: usize = 20;
pub const NULL_TRIALS: usize = 12;
pub const REPETITIONS_PER_CONDITION: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("invalid geometry at bearing {beta_deg} deg: {reason}")]
    InvalidGeometry { beta_deg: f64, reason: &'static str },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "could not place distractor {index} with clearance {clearance} m after {attempts} attempts"
    )]
    GenerationFailure {
        index: usize,
        clearance: f64,
        attempts: usize,
    },
}

fn require_positive(name: &'static str, value: f64) -> Result<(), ScenarioError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(ScenarioError::InvalidParameter {
            name,
            value,
            reason: "must be finite and > 0",
        })
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum FieldLoss {
    #[default]
    None,
    LeftHemianopia,
    RightHemianopia,
}

impl FieldLoss {
    pub fn is_hemianopic(self) -> bool {
        self != FieldLoss::None
    }

    /// The mirrored condition: left and right swap, `None` stays.
    pub fn mirrored(self) -> FieldLoss {
        match self {
            FieldLoss::None => FieldLoss::None,
            FieldLoss::LeftHemianopia => FieldLoss::RightHemianopia,
            FieldLoss::RightHemianopia => FieldLoss::LeftHemianopia,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    /// Preferred walking speed, m/s.
    pub pws: f64,
    #[serde(default = "default_shoulder_radius")]
    pub shoulder_radius: f64,
    #[serde(default = "default_fov_half_angle")]
    pub fov_half_angle: f64,
    #[serde(default = "default_field_loss")]
    pub field_loss: FieldLoss,
}

fn default_shoulder_radius() -> f64 {
    DEFAULT_SHOULDER_RADIUS
}
fn default_fov_half_angle() -> f64 {
    DEFAULT_FOV_HALF_ANGLE
}
fn default_field_loss() -> FieldLoss {
    FieldLoss::None
}

impl SubjectParams {
    pub fn new(pws: f64, field_loss: FieldLoss) -> Self {
        Self {
            pws,
            shoulder_radius: DEFAULT_SHOULDER_RADIUS,
            fov_half_angle: DEFAULT_FOV_HALF_ANGLE,
            field_loss,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        require_positive("pws", self.pws)?;
        require_positive("shoulder_radius", self.shoulder_radius)?;
        if !(self.fov_half_angle > 0.0 && self.fov_half_angle <= 90.0) {
            return Err(ScenarioError::InvalidParameter {
                name: "fov_half_angle",
                value: self.fov_half_angle,
                reason: "must lie in (0, 90]",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CourseKind {
    Approaching,
    Overtaken,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionCourse {
    pub kind: CourseKind,
    /// Bearing at spawn, degrees; positive is right of the heading.
    pub beta_deg: f64,
    #[serde(default = "default_ttc")]
    pub ttc_design: f64,
    /// Subject-to-pedestrian distance at spawn for overtaken courses.
    #[serde(default = "default_overtaken_init_distance")]
    pub overtaken_init_distance: f64,
}

fn default_ttc() -> f64 {
    DEFAULT_TTC
}
fn default_overtaken_init_distance() -> f64 {
    DEFAULT_OVERTAKEN_INIT_DISTANCE
}

impl CollisionCourse {
    pub fn approaching(beta_deg: f64) -> Self {
        Self {
            kind: CourseKind::Approaching,
            beta_deg,
            ttc_design: DEFAULT_TTC,
            overtaken_init_distance: DEFAULT_OVERTAKEN_INIT_DISTANCE,
        }
    }

    pub fn overtaken(beta_deg: f64) -> Self {
        Self {
            kind: CourseKind::Overtaken,
            ..Self::approaching(beta_deg)
        }
    }

    /// Places the colliding pedestrian in the local spawn frame.
    pub fn place(&self, pws: f64, rules: &PlacementRules) -> Result<PedestrianInit, ScenarioError> {
        rules.check(self)?;
        match self.kind {
            CourseKind::Approaching => place_approaching(pws, self.ttc_design, self.beta_deg),
            CourseKind::Overtaken => {
                let init = place_overtaken(
                    pws,
                    self.ttc_design,
                    self.beta_deg,
                    self.overtaken_init_distance,
                )?;
                rules.check_overtaken_crossing(self.beta_deg, &init)?;
                Ok(init)
            }
        }
    }
}

/// Restrictions on which bearings a course may use.
///
/// `enforce_bearing_sets` can be switched off for experimentation; the
/// geometric feasibility checks inside the placement functions always apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementRules {
    pub approaching_bearings: Vec<f64>,
    pub overtaken_bearings: Vec<f64>,
    pub enforce_bearing_sets: bool,
    /// Optional lower bound on the angle between an overtaken pedestrian's
    /// walking direction and the subject's path. Unset by default.
    #[serde(default)]
    pub min_overtaken_crossing_deg: Option<f64>,
}

impl Default for PlacementRules {
    fn default() -> Self {
        Self {
            approaching_bearings: vec![20.0, 40.0],
            overtaken_bearings: vec![20.0, 40.0, 60.0],
            enforce_bearing_sets: true,
            min_overtaken_crossing_deg: None,
        }
    }
}

impl PlacementRules {
    pub fn check(&self, course: &CollisionCourse) -> Result<(), ScenarioError> {
        require_positive("ttc_design", course.ttc_design)?;
        if !course.beta_deg.is_finite() {
            return Err(ScenarioError::InvalidParameter {
                name: "beta_deg",
                value: course.beta_deg,
                reason: "must be finite",
            });
        }
        if !self.enforce_bearing_sets {
            return Ok(());
        }
        let (allowed, label) = match course.kind {
            CourseKind::Approaching => (&self.approaching_bearings, "approaching"),
            CourseKind::Overtaken => (&self.overtaken_bearings, "overtaken"),
        };
        let mag = course.beta_deg.abs();
        if allowed.iter().any(|a| (a - mag).abs() < 1e-9) {
            Ok(())
        } else {
            Err(ScenarioError::InvalidConfig(format!(
                "{label} bearing |{}| deg is not in the allowed set {:?}",
                course.beta_deg, allowed
            )))
        }
    }

    fn check_overtaken_crossing(
        &self,
        beta_deg: f64,
        init: &PedestrianInit,
    ) -> Result<(), ScenarioError> {
        let Some(min) = self.min_overtaken_crossing_deg else {
            return Ok(());
        };
        let crossing = init.velocity.heading_deg().abs();
        if crossing + 1e-9 < min {
            return Err(ScenarioError::InvalidGeometry {
                beta_deg,
                reason: "overtaken crossing angle below configured minimum",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Colliding,
    Distractor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedestrianInit {
    pub initial_position: Vec2,
    pub velocity: Vec2,
    pub role: Role,
}

impl PedestrianInit {
    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }

    /// Translates a local-frame placement so the local origin sits at `origin`.
    pub fn to_world(self, origin: Vec2) -> PedestrianInit {
        PedestrianInit {
            initial_position: self.initial_position + origin,
            ..self
        }
    }

    pub fn mirrored(self) -> PedestrianInit {
        PedestrianInit {
            initial_position: self.initial_position.mirror_x(),
            velocity: self.velocity.mirror_x(),
            role: self.role,
        }
    }
}

/// Point `pws * ttc` ahead of `subject_pos` along `path_dir`.
pub fn collision_point(
    pws: f64,
    ttc: f64,
    subject_pos: Vec2,
    path_dir: Vec2,
) -> Result<Vec2, ScenarioError> {
    require_positive("pws", pws)?;
    require_positive("ttc", ttc)?;
    let dir = path_dir
        .normalized()
        .ok_or(ScenarioError::InvalidParameter {
            name: "path_dir",
            value: 0.0,
            reason: "must be a non-zero vector",
        })?;
    Ok(subject_pos + dir * (pws * ttc))
}

fn ray(beta_deg: f64, range: f64) -> Vec2 {
    Vec2::from_heading(beta_deg) * range
}

/// Face-to-face collider.
///
/// The pedestrian sits on the bearing ray at the unique range where its
/// distance to the collision point equals the subject's (`d = pws * ttc`),
/// which gives `r = 2 d cos(beta)`, and walks to the collision point at `pws`.
pub fn place_approaching(
    pws: f64,
    ttc: f64,
    beta_deg: f64,
) -> Result<PedestrianInit, ScenarioError> {
    let cp = collision_point(pws, ttc, Vec2::ZERO, Vec2::new(0.0, 1.0))?;
    let d = cp.y;
    let cos_b = beta_deg.to_radians().cos();
    let range = 2.0 * d * cos_b;
    if !(range > 0.0) {
        return Err(ScenarioError::InvalidGeometry {
            beta_deg,
            reason: "bearing at or beyond 90 deg gives a non-positive range",
        });
    }
    let p0 = ray(beta_deg, range);
    // Along-path projection is 2 d cos^2(beta); it only exceeds d below 45 deg.
    if p0.y <= d {
        return Err(ScenarioError::InvalidGeometry {
            beta_deg,
            reason: "approaching pedestrian would not start beyond the collision point",
        });
    }
    let dir = (cp - p0)
        .normalized()
        .ok_or(ScenarioError::InvalidGeometry {
            beta_deg,
            reason: "pedestrian starts on the collision point",
        })?;
    Ok(PedestrianInit {
        initial_position: p0,
        velocity: dir * pws,
        role: Role::Colliding,
    })
}

/// Side-to-side collider that the subject catches up with.
///
/// Starts at `init_distance` along the bearing ray and walks to the collision
/// point at whatever speed makes it arrive exactly at `ttc`.
pub fn place_overtaken(
    pws: f64,
    ttc: f64,
    beta_deg: f64,
    init_distance: f64,
) -> Result<PedestrianInit, ScenarioError> {
    require_positive("overtaken_init_distance", init_distance)?;
    let cp = collision_point(pws, ttc, Vec2::ZERO, Vec2::new(0.0, 1.0))?;
    let p0 = ray(beta_deg, init_distance);
    if p0.y >= cp.y {
        return Err(ScenarioError::InvalidGeometry {
            beta_deg,
            reason: "overtaken pedestrian must start between the subject and the collision point",
        });
    }
    let to_cp = cp - p0;
    let speed = to_cp.norm() / ttc;
    // Treat a speed within rounding of pws as equal: the pedestrian must be strictly slower.
    if speed >= pws * (1.0 - 1e-12) {
        return Err(ScenarioError::InvalidConfig(format!(
            "overtaken pedestrian at {beta_deg} deg / {init_distance} m needs speed {speed:.4} m/s, \
             which is not slower than pws {pws} m/s"
        )));
    }
    let dir = to_cp.normalized().ok_or(ScenarioError::InvalidGeometry {
        beta_deg,
        reason: "pedestrian starts on the collision point",
    })?;
    Ok(PedestrianInit {
        initial_position: p0,
        velocity: dir * speed,
        role: Role::Colliding,
    })
}

/// The subject's nominal straight walk used to keep distractors clear.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NominalPath {
    pub origin: Vec2,
    pub direction: Vec2,
    pub speed: f64,
    pub duration: f64,
}

impl NominalPath {
    pub fn velocity(&self) -> Vec2 {
        self.direction * self.speed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistractorConfig {
    pub speed_min: f64,
    pub speed_max: f64,
    /// Minimum center distance to the nominal subject over the whole trial.
    pub clearance: f64,
    /// Spawn box relative to the spawn pose: lateral half-width and along-path range.
    pub lateral_half_width: f64,
    pub along_min: f64,
    pub along_max: f64,
    pub max_attempts: usize,
}

impl Default for DistractorConfig {
    fn default() -> Self {
        Self {
            speed_min: 0.6,
            speed_max: 1.4,
            clearance: 0.75,
            lateral_half_width: 7.0,
            along_min: 1.0,
            along_max: 16.0,
            max_attempts: 10_000,
        }
    }
}

/// Draws `n` straight-line walkers that never come within `cfg.clearance` of
/// the nominal subject. Positions are in the same frame as `path.origin`.
pub fn place_distractors(
    n: usize,
    seed: u64,
    path: &NominalPath,
    cfg: &DistractorConfig,
    contact_distance: f64,
) -> Result<Vec<PedestrianInit>, ScenarioError> {
    if !(cfg.clearance > contact_distance) {
        return Err(ScenarioError::InvalidParameter {
            name: "clearance",
            value: cfg.clearance,
            reason: "must exceed the contact distance (sum of shoulder radii)",
        });
    }
    if !(cfg.speed_min > 0.0 && cfg.speed_min <= cfg.speed_max) {
        return Err(ScenarioError::InvalidConfig(format!(
            "distractor speed range [{}, {}] is empty or non-positive",
            cfg.speed_min, cfg.speed_max
        )));
    }
    let dir = path
        .direction
        .normalized()
        .ok_or_else(|| ScenarioError::InvalidConfig("nominal path direction is zero".into()))?;
    let side = Vec2::new(dir.y, -dir.x);
    let subject_v = dir * path.speed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for index in 0..n {
        let mut placed = None;
        for _ in 0..cfg.max_attempts {
            let lateral = rng.random_range(-cfg.lateral_half_width..=cfg.lateral_half_width);
            let along = rng.random_range(cfg.along_min..=cfg.along_max);
            let heading = rng.random_range(-180.0..180.0);
            let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
            let pos = path.origin + dir * along + side * lateral;
            // Rotate the sampled heading into the path's frame.
            let local = Vec2::from_heading(heading);
            let vel = (dir * local.y + side * local.x) * speed;
            let approach = crate::geometry::closest_approach_within(
                path.origin,
                subject_v,
                pos,
                vel,
                path.duration,
            );
            if approach.distance > cfg.clearance {
                placed = Some(PedestrianInit {
                    initial_position: pos,
                    velocity: vel,
                    role: Role::Distractor,
                });
                break;
            }
        }
        match placed {
            Some(p) => out.push(p),
            None => {
                return Err(ScenarioError::GenerationFailure {
                    index,
                    clearance: cfg.clearance,
                    attempts: cfg.max_attempts,
                })
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub trial_id: u32,
    /// `None` marks a null trial.
    pub course: Option<CollisionCourse>,
    pub distractor_count: u32,
    pub rng_seed: u64,
    pub start_trigger_distance: f64,
    pub end_trigger_distance: f64,
}

impl TrialSpec {
    pub fn null(trial_id: u32, rng_seed: u64) -> Self {
        Self {
            trial_id,
            course: None,
            distractor_count: DEFAULT_DISTRACTOR_COUNT,
            rng_seed,
            start_trigger_distance: DEFAULT_START_TRIGGER,
            end_trigger_distance: DEFAULT_END_TRIGGER,
        }
    }

    pub fn with_course(trial_id: u32, course: CollisionCourse, rng_seed: u64) -> Self {
        Self {
            course: Some(course),
            ..Self::null(trial_id, rng_seed)
        }
    }

    pub fn is_null(&self) -> bool {
        self.course.is_none()
    }

    pub fn validate(&self, rules: &PlacementRules) -> Result<(), ScenarioError> {
        if !(self.start_trigger_distance > 0.0
            && self.start_trigger_distance < self.end_trigger_distance
            && self.end_trigger_distance.is_finite())
        {
            return Err(ScenarioError::InvalidConfig(format!(
                "trial {}: triggers must satisfy 0 < start ({}) < end ({})",
                self.trial_id, self.start_trigger_distance, self.end_trigger_distance
            )));
        }
        if let Some(course) = &self.course {
            rules.check(course)?;
        }
        Ok(())
    }
}

/// Per-bearing initial distances for overtaken courses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OvertakenDistances {
    #[serde(rename = "20")]
    pub deg20: f64,
    #[serde(rename = "40")]
    pub deg40: f64,
    #[serde(rename = "60")]
    pub deg60: f64,
}

impl Default for OvertakenDistances {
    fn default() -> Self {
        Self {
            deg20: DEFAULT_OVERTAKEN_INIT_DISTANCE,
            deg40: DEFAULT_OVERTAKEN_INIT_DISTANCE,
            deg60: DEFAULT_OVERTAKEN_INIT_DISTANCE,
        }
    }
}

impl OvertakenDistances {
    pub fn for_bearing(&self, beta_deg: f64) -> f64 {
        let mag = beta_deg.abs();
        if mag < 30.0 {
            self.deg20
        } else if mag < 50.0 {
            self.deg40
        } else {
            self.deg60
        }
    }
}

/// Session-level knobs for schedule generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionDesign {
    pub ttc_design: f64,
    pub overtaken_init_distance: OvertakenDistances,
    pub repetitions: usize,
    pub null_trials: usize,
    pub distractor_count: u32,
    pub start_trigger_distance: f64,
    pub end_trigger_distance: f64,
}

impl Default for SessionDesign {
    fn default() -> Self {
        Self {
            ttc_design: DEFAULT_TTC,
            overtaken_init_distance: OvertakenDistances::default(),
            repetitions: REPETITIONS_PER_CONDITION,
            null_trials: NULL_TRIALS,
            distractor_count: DEFAULT_DISTRACTOR_COUNT,
            start_trigger_distance: DEFAULT_START_TRIGGER,
            end_trigger_distance: DEFAULT_END_TRIGGER,
        }
    }
}

/// The ten collision conditions: approaching at +-20/40, overtaken at +-20/40/60.
pub fn collision_conditions() -> Vec<(CourseKind, f64)> {
    let mut out = Vec::with_capacity(10);
    for b in [20.0, 40.0] {
        out.push((CourseKind::Approaching, -b));
        out.push((CourseKind::Approaching, b));
    }
    for b in [20.0, 40.0, 60.0] {
        out.push((CourseKind::Overtaken, -b));
        out.push((CourseKind::Overtaken, b));
    }
    out
}

pub fn generate_session(subject: &SubjectParams, seed: u64) -> Vec<TrialSpec> {
    generate_session_with(&SessionDesign::default(), subject, seed)
}

/// Builds the shuffled schedule: every collision condition `repetitions`
/// times plus `null_trials` null trials. Pure in `(design, seed)`.
pub fn generate_session_with(
    design: &SessionDesign,
    _subject: &SubjectParams,
    seed: u64,
) -> Vec<TrialSpec> {
    let mut courses: Vec<Option<CollisionCourse>> = Vec::new();
    for (kind, beta) in collision_conditions() {
        for _ in 0..design.repetitions {
            courses.push(Some(CollisionCourse {
                kind,
                beta_deg: beta,
                ttc_design: design.ttc_design,
                overtaken_init_distance: design.overtaken_init_distance.for_bearing(beta),
            }));
        }
    }
    courses.extend(std::iter::repeat_n(None, design.null_trials));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    courses.shuffle(&mut rng);
    courses
        .into_iter()
        .enumerate()
        .map(|(i, course)| TrialSpec {
            trial_id: i as u32,
            course,
            distractor_count: design.distractor_count,
            rng_seed: rng.random(),
            start_trigger_distance: design.start_trigger_distance,
            end_trigger_distance: design.end_trigger_distance,
        })
        .collect()
}

/// Mirrors bearings for right-sided field loss so the blind side is negative.
pub fn standardize_side(beta_deg: f64, field_loss: FieldLoss) -> f64 {
    match field_loss {
        FieldLoss::RightHemianopia => -beta_deg,
        FieldLoss::LeftHemianopia | FieldLoss::None => beta_deg,
    }
}
