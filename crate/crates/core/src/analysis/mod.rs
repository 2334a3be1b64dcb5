//! Per-trial outcomes and the statistical pipeline run over them.

pub mod dist;
pub mod hypothesis;
pub mod lmm;
pub mod logistic;
pub mod report;
pub mod stepwise;

pub use hypothesis::{chi_square_2x2, holm_bonferroni, one_sample_t, welch_t, ChiSquare, TTest};
pub use lmm::{lmm_random_intercept, LmmFit};
pub use logistic::{logistic_irls, LogisticFit};
pub use report::{analyze, Report};
pub use stepwise::{lrt_stepwise, Candidate, Design, FitSummary, LrtStep, Stepwise};

use crate::engine::{Event, EventKind, PoseSample, ResponseClass, Side};
use crate::scenario::{standardize_side, CourseKind, FieldLoss, Role};
use crate::store::{Block, SessionData, TrialRecord};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("degenerate table: {0}")]
    DegenerateTable(String),
    #[error("perfect separation: {0}")]
    Separation(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("models are not nested: {0}")]
    NonNested(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed log for trial {trial_id}, event {record}: {reason}")]
    Parse {
        trial_id: u32,
        record: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Nv,
    Hh,
}

impl Group {
    pub fn of(field_loss: FieldLoss) -> Group {
        if field_loss.is_hemianopic() {
            Group::Hh
        } else {
            Group::Nv
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialKind {
    Approaching,
    Overtaken,
    Null,
}

impl From<Option<CourseKind>> for TrialKind {
    fn from(k: Option<CourseKind>) -> Self {
        match k {
            Some(CourseKind::Approaching) => TrialKind::Approaching,
            Some(CourseKind::Overtaken) => TrialKind::Overtaken,
            None => TrialKind::Null,
        }
    }
}

/// One main-block trial reduced to its measures.
///
/// `response_class` is taken from the first press; `miss` means no press at
/// all, which on a null trial is the correct behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub session_id: String,
    pub trial_id: u32,
    pub group: Group,
    pub field_loss: FieldLoss,
    pub kind: TrialKind,
    pub beta_deg: Option<f64>,
    /// Bearing with the blind side mapped to negative values.
    pub beta_std: Option<f64>,
    pub detected: bool,
    /// Seconds from the spawn to the press; only for hits.
    pub rt: Option<f64>,
    pub response_class: ResponseClass,
    /// Contact with the colliding pedestrian.
    pub collided: bool,
    pub distractor_collisions: u32,
    /// Head yaw relative to the path, standardized, deg.
    pub mean_yaw_before: Option<f64>,
    pub mean_yaw_after: Option<f64>,
    pub mean_pitch_before: Option<f64>,
    pub mean_pitch_after: Option<f64>,
    pub trial_mean_speed: f64,
}

fn check_event_order(trial_id: u32, events: &[&Event]) -> Result<(), AnalysisError> {
    let parse = |record: usize, reason: &str| AnalysisError::Parse {
        trial_id,
        record,
        reason: reason.to_owned(),
    };
    match events.first() {
        Some(e) if matches!(e.kind, EventKind::TrialStart { .. }) => {}
        Some(_) => return Err(parse(0, "first event is not trial_start")),
        None => return Err(parse(0, "no events")),
    }
    for (i, w) in events.windows(2).enumerate() {
        if w[1].seq <= w[0].seq || w[1].t < w[0].t {
            return Err(parse(i + 1, "events out of order"));
        }
    }
    if !events
        .iter()
        .any(|e| matches!(e.kind, EventKind::TrialEnd { .. }))
    {
        return Err(parse(events.len(), "missing trial_end"));
    }
    Ok(())
}

fn window_mean(
    samples: &[PoseSample],
    from: f64,
    to: Option<f64>,
    f: impl Fn(&PoseSample) -> f64,
) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in samples {
        if s.t >= from && to.is_none_or(|end| s.t < end) {
            sum += f(s);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Derives the outcome of one main-block trial.
pub fn trial_outcome(
    session_id: &str,
    field_loss: FieldLoss,
    record: &TrialRecord,
) -> Result<TrialOutcome, AnalysisError> {
    let trial_id = record.spec.trial_id;
    let events: Vec<&Event> = record.events().collect();
    check_event_order(trial_id, &events)?;

    let spawn_t = events.iter().find_map(|e| match e.kind {
        EventKind::PedestriansSpawned { .. } => Some(e.t),
        _ => None,
    });
    let press = events.iter().find_map(|e| match e.kind {
        EventKind::DetectPress { response, .. } => Some((e.t, response)),
        _ => None,
    });
    let mut collided = false;
    let mut distractor_collisions = 0;
    for e in &events {
        if let EventKind::Collision { role, .. } = e.kind {
            match role {
                Role::Colliding => collided = true,
                Role::Distractor => distractor_collisions += 1,
            }
        }
    }
    let response_class = press.map_or(ResponseClass::Miss, |(_, r)| r);
    let rt = match (press, spawn_t) {
        (Some((t, r)), Some(s)) if r.is_hit() => Some(t - s),
        _ => None,
    };

    let sign = if field_loss == FieldLoss::RightHemianopia {
        -1.0
    } else {
        1.0
    };
    let yaw = |s: &PoseSample| sign * s.subject.yaw_from_path();
    let pitch = |s: &PoseSample| s.subject.head_pitch;
    let press_t = press.map(|(t, _)| t);
    let samples = &record.samples;
    let (yb, ya, pb, pa, speed) = match spawn_t {
        Some(s0) => {
            // A press before the spawn leaves nothing in the before window.
            let split = press_t.map(|t| t.max(s0));
            (
                window_mean(samples, s0, split, yaw),
                split.and_then(|t| window_mean(samples, t, None, yaw)),
                window_mean(samples, s0, split, pitch),
                split.and_then(|t| window_mean(samples, t, None, pitch)),
                window_mean(samples, s0, None, |s| s.subject.speed),
            )
        }
        None => (
            None,
            None,
            None,
            None,
            window_mean(samples, 0.0, None, |s| s.subject.speed),
        ),
    };

    let course = record.spec.course.as_ref();
    Ok(TrialOutcome {
        session_id: session_id.to_owned(),
        trial_id,
        group: Group::of(field_loss),
        field_loss,
        kind: course.map(|c| c.kind).into(),
        beta_deg: course.map(|c| c.beta_deg),
        beta_std: course.map(|c| standardize_side(c.beta_deg, field_loss)),
        detected: response_class.is_hit(),
        rt,
        response_class,
        collided,
        distractor_collisions,
        mean_yaw_before: yb,
        mean_yaw_after: ya,
        mean_pitch_before: pb,
        mean_pitch_after: pa,
        trial_mean_speed: speed.unwrap_or(0.0),
    })
}

/// Outcomes of every main-block trial of a session, in trial order.
pub fn derive_outcomes(session: &SessionData) -> Result<Vec<TrialOutcome>, AnalysisError> {
    let fl = session.manifest.subject.field_loss;
    let mut out = session
        .block(Block::Main)
        .map(|r| trial_outcome(&session.manifest.session_id, fl, r))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort_by_key(|o| o.trial_id);
    Ok(out)
}

fn sample_at(samples: &[PoseSample], tick: u64) -> Option<&PoseSample> {
    samples
        .binary_search_by_key(&tick, |s| s.tick)
        .ok()
        .map(|i| &samples[i])
}

/// Walking speed between the spawn and the end trigger of one trial.
pub fn trial_walking_speed(record: &TrialRecord) -> Option<f64> {
    let mut spawn = None;
    let mut end = None;
    for e in record.events() {
        match e.kind {
            EventKind::PedestriansSpawned { .. } => spawn = Some(e.tick),
            EventKind::EndTrigger { .. } => end = Some(e.tick),
            _ => {}
        }
    }
    let a = sample_at(&record.samples, spawn?)?;
    let b = sample_at(&record.samples, end?)?;
    let dt = b.t - a.t;
    (dt > 0.0).then(|| (b.subject.position.y - a.subject.position.y) / dt)
}

/// Mean walking speed over completed trials (those that reached the end trigger).
pub fn pws_estimate<'a>(
    records: impl IntoIterator<Item = &'a TrialRecord>,
) -> Result<f64, AnalysisError> {
    let speeds: Vec<f64> = records
        .into_iter()
        .filter_map(trial_walking_speed)
        .collect();
    if speeds.is_empty() {
        return Err(AnalysisError::InsufficientData(
            "no completed preferred-speed trials".into(),
        ));
    }
    Ok(speeds.iter().sum::<f64>() / speeds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKey {
    Session,
    Group,
    Kind,
    BetaStd,
    /// Sign of the standardized bearing; `left` is the blind side for HH.
    Side,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub session_id: Option<String>,
    pub group: Option<Group>,
    pub kind: Option<TrialKind>,
    pub beta_std: Option<f64>,
    pub side: Option<Side>,
    pub n: usize,
    pub detected: usize,
    pub collided: usize,
    pub detection_rate: Option<f64>,
    pub collision_rate: Option<f64>,
}

type CellKey = (
    Option<String>,
    Option<Group>,
    Option<TrialKind>,
    Option<i64>,
    Option<Side>,
);

/// Detection and collision proportions over collision trials, grouped by `keys`.
pub fn rates(outcomes: &[TrialOutcome], keys: &[RateKey]) -> Vec<RateRow> {
    let mut cells: BTreeMap<CellKey, (usize, usize, usize, Option<f64>)> = BTreeMap::new();
    for o in outcomes.iter().filter(|o| o.kind != TrialKind::Null) {
        let beta = o.beta_std.unwrap_or(0.0);
        let key = (
            keys.contains(&RateKey::Session)
                .then(|| o.session_id.clone()),
            keys.contains(&RateKey::Group).then_some(o.group),
            keys.contains(&RateKey::Kind).then_some(o.kind),
            keys.contains(&RateKey::BetaStd)
                .then(|| (beta * 1000.0).round() as i64),
            keys.contains(&RateKey::Side).then_some(if beta < 0.0 {
                Side::Left
            } else {
                Side::Right
            }),
        );
        let cell = cells.entry(key).or_insert((0, 0, 0, None));
        cell.0 += 1;
        cell.1 += o.detected as usize;
        cell.2 += o.collided as usize;
        if keys.contains(&RateKey::BetaStd) {
            cell.3 = Some(beta);
        }
    }
    cells
        .into_iter()
        .map(
            |((session_id, group, kind, _, side), (n, d, c, beta_std))| RateRow {
                session_id,
                group,
                kind,
                beta_std,
                side,
                n,
                detected: d,
                collided: c,
                detection_rate: (n > 0).then(|| d as f64 / n as f64),
                collision_rate: (n > 0).then(|| c as f64 / n as f64),
            },
        )
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadChannel {
    Yaw,
    Pitch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Before,
    After,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBiasRow {
    pub group: Group,
    pub channel: HeadChannel,
    pub window: Window,
    /// Mean over subjects of the per-subject mean, deg.
    pub mean: Option<f64>,
    pub n_subjects: usize,
    pub test: Option<TTest>,
    pub p_holm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// One-sample t against zero with the all-zero sample treated as no effect.
fn bias_test(xs: &[f64]) -> (Option<TTest>, Option<String>) {
    if xs.len() >= 2 && xs.iter().all(|&x| x == 0.0) {
        let t = TTest {
            statistic: 0.0,
            df: (xs.len() - 1) as f64,
            p_value: 1.0,
            estimate: 0.0,
            std_error: 0.0,
            ci95: (0.0, 0.0),
            cohens_d: 0.0,
            n: xs.len(),
        };
        return (Some(t), None);
    }
    match one_sample_t(xs, 0.0) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    }
}

/// Head-rotation bias per group: the four channel/window means tested against
/// zero across subjects, Holm-corrected within each group.
pub fn head_bias(outcomes: &[TrialOutcome]) -> Vec<HeadBiasRow> {
    type Acc = BTreeMap<String, (f64, usize)>;
    let mut per: BTreeMap<(Group, HeadChannel, Window), Acc> = BTreeMap::new();
    for o in outcomes {
        let values = [
            (HeadChannel::Yaw, Window::Before, o.mean_yaw_before),
            (HeadChannel::Yaw, Window::After, o.mean_yaw_after),
            (HeadChannel::Pitch, Window::Before, o.mean_pitch_before),
            (HeadChannel::Pitch, Window::After, o.mean_pitch_after),
        ];
        for (ch, w, v) in values {
            let entry = per.entry((o.group, ch, w)).or_default();
            if let Some(v) = v {
                let s = entry.entry(o.session_id.clone()).or_insert((0.0, 0));
                s.0 += v;
                s.1 += 1;
            }
        }
    }
    let mut rows: Vec<HeadBiasRow> = per
        .into_iter()
        .map(|((group, channel, window), subjects)| {
            let xs: Vec<f64> = subjects.values().map(|(s, n)| s / *n as f64).collect();
            let mean = (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
            let (test, note) = bias_test(&xs);
            HeadBiasRow {
                group,
                channel,
                window,
                mean,
                n_subjects: xs.len(),
                test,
                p_holm: None,
                note,
            }
        })
        .collect();
    for g in [Group::Nv, Group::Hh] {
        let idx: Vec<usize> = (0..rows.len())
            .filter(|&i| rows[i].group == g && rows[i].test.is_some())
            .collect();
        let ps: Vec<f64> = idx
            .iter()
            .map(|&i| rows[i].test.as_ref().unwrap().p_value)
            .collect();
        if let Ok(adj) = holm_bonferroni(&ps) {
            for (k, &i) in idx.iter().enumerate() {
                rows[i].p_holm = Some(adj[k]);
            }
        }
    }
    rows
}

pub fn write_outcomes_csv<W: io::Write>(w: W, outcomes: &[TrialOutcome]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    for o in outcomes {
        wtr.serialize(o)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_outcomes_csv<R: io::Read>(r: R) -> Result<Vec<TrialOutcome>, AnalysisError> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| AnalysisError::Parse {
                trial_id: 0,
                record: i,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn write_rates_csv<W: io::Write>(w: W, rows: &[RateRow]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
