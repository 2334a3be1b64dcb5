//! Headless sessions: a preferred-speed block followed by the main block,
//! driven by a synthetic policy.

use crate::agents::{PolicyParams, Profile, ScanPolicy, SubjectPolicy};
use crate::analysis::{pws_estimate, AnalysisError};
use crate::engine::{EngineConfig, EngineError, TrialEngine};
use crate::scenario::{
    generate_session_with, FieldLoss, ScenarioError, SessionDesign, SubjectParams, TrialSpec,
};
use crate::store::{
    Block, PolicySource, SessionData, SessionManifest, Timestamps, TrialRecord, SCHEMA_VERSION,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Trials in the preferred-speed block.
pub const PWS_TRIALS: usize = 12;
/// Speed assumed for distractor placement before the subject's PWS is known.
pub const PROVISIONAL_PWS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("preferred walking speed: {0}")]
    Pws(#[from] AnalysisError),
    #[error("invalid policy parameters: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSettings {
    pub engine: EngineConfig,
    pub design: SessionDesign,
    pub pws_trials: usize,
    /// Natural walking speed of a synthetic subject is drawn uniformly from this range.
    pub natural_speed_range: (f64, f64),
    /// Overrides the profile's default parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyParams>,
    /// Overrides the profile's field mask; `None` uses the profile's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_loss: Option<FieldLoss>,
    /// Main-block trials; `None` generates the standard schedule per session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<Vec<TrialSpec>>,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            design: SessionDesign::default(),
            pws_trials: PWS_TRIALS,
            natural_speed_range: (0.8, 1.2),
            policy: None,
            field_loss: None,
            trials: None,
        }
    }
}

/// Steps `engine` with `policy` until the trial ends.
pub fn run_trial(
    engine: &mut TrialEngine,
    policy: &mut dyn SubjectPolicy,
) -> Result<(), EngineError> {
    policy.begin_trial(engine.spec());
    while !engine.is_ended() {
        let input = policy.act(&engine.observe());
        engine.step(&input)?;
    }
    Ok(())
}

/// Runs one trial to completion and packages its log.
pub fn run_trial_record(
    cfg: &EngineConfig,
    params: &SubjectParams,
    block: Block,
    spec: TrialSpec,
    policy: &mut dyn SubjectPolicy,
) -> Result<TrialRecord, EngineError> {
    let mut engine = TrialEngine::new(cfg.clone(), params.clone(), spec.clone())?;
    run_trial(&mut engine, policy)?;
    let log = engine.into_log();
    Ok(TrialRecord::new(block, spec, log.events, log.samples))
}

pub fn session_id(profile: Profile, seed: u64, index: u32) -> String {
    format!("{}-s{}-{:03}", profile.name(), seed, index)
}

/// Schedule of null trials for the preferred-speed block.
pub fn pws_schedule(design: &SessionDesign, n: usize, seed: u64) -> Vec<TrialSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| TrialSpec {
            distractor_count: design.distractor_count,
            start_trigger_distance: design.start_trigger_distance,
            end_trigger_distance: design.end_trigger_distance,
            ..TrialSpec::null(i as u32, rng.random())
        })
        .collect()
}

/// Simulates session `index` of a batch seeded with `seed`.
///
/// Every random choice is drawn from a stream derived from `(seed, index)`,
/// so sessions can be produced in any order or in parallel.
pub fn simulate_session(
    settings: &SessionSettings,
    profile: Profile,
    seed: u64,
    index: u32,
) -> Result<SessionData, SessionError> {
    settings.engine.validate()?;
    let params = settings
        .policy
        .clone()
        .unwrap_or_else(|| profile.default_params());
    params.validate().map_err(SessionError::Policy)?;
    let field_loss = settings.field_loss.unwrap_or(profile.field_loss());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (lo, hi) = settings.natural_speed_range;
    let natural_speed = if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    };
    let pws_seed: u64 = rng.random();
    let main_seed: u64 = rng.random();

    let provisional = SubjectParams::new(PROVISIONAL_PWS, field_loss);
    provisional.validate()?;
    let pws_trials = pws_schedule(&settings.design, settings.pws_trials, pws_seed);
    let mut records = Vec::with_capacity(pws_trials.len() + 32);
    let mut policy = ScanPolicy::new(params.clone(), provisional.clone(), natural_speed)
        .with_max_steer(settings.engine.max_steer_rate);
    for spec in &pws_trials {
        records.push(run_trial_record(
            &settings.engine,
            &provisional,
            Block::Pws,
            spec.clone(),
            &mut policy,
        )?);
    }
    let pws = pws_estimate(records.iter())?;

    let subject = SubjectParams::new(pws, field_loss);
    subject.validate()?;
    let trials = match &settings.trials {
        Some(t) => t.clone(),
        None => generate_session_with(&settings.design, &subject, main_seed),
    };
    for spec in &trials {
        spec.validate(&settings.engine.placement)?;
    }
    let mut policy = ScanPolicy::new(params.clone(), subject.clone(), natural_speed)
        .with_max_steer(settings.engine.max_steer_rate);
    for spec in &trials {
        records.push(run_trial_record(
            &settings.engine,
            &subject,
            Block::Main,
            spec.clone(),
            &mut policy,
        )?);
    }

    let manifest = SessionManifest {
        schema_version: SCHEMA_VERSION,
        session_id: session_id(profile, seed, index),
        seed,
        subject,
        engine: settings.engine.clone(),
        policy: PolicySource::Synthetic {
            profile,
            params,
            natural_speed,
        },
        trial_digest: SessionManifest::compute_digest(&pws_trials, &trials),
        pws_trials,
        trials,
        timestamps: Timestamps::default(),
        notes: Vec::new(),
        extra: Default::default(),
    };
    Ok(SessionData::new(manifest, records))
}
