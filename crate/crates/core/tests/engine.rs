use pedtrial_core::agents::{Profile, ScanPolicy, ScriptedWalker};
use pedtrial_core::engine::{EngineConfig, EventKind, SubjectInput, TrialEngine, TrialLog};
use pedtrial_core::scenario::{
    collision_conditions, CollisionCourse, CourseKind, FieldLoss, Role, SubjectParams, TrialSpec,
};
use pedtrial_core::session::run_trial;
use proptest::prelude::*;

fn course(i: usize) -> Option<CollisionCourse> {
    let conditions = collision_conditions();
    conditions.get(i).map(|&(kind, beta)| match kind {
        CourseKind::Approaching => CollisionCourse::approaching(beta),
        CourseKind::Overtaken => CollisionCourse::overtaken(beta),
    })
}

fn spec(i: usize, seed: u64) -> TrialSpec {
    match course(i) {
        Some(c) => TrialSpec::with_course(0, c, seed),
        None => TrialSpec::null(0, seed),
    }
}

fn run_scan(profile: Profile, spec: TrialSpec, pws: f64) -> TrialLog {
    let subject = SubjectParams::new(pws, profile.field_loss());
    let mut engine = TrialEngine::new(EngineConfig::default(), subject.clone(), spec).unwrap();
    let mut policy = ScanPolicy::new(profile.default_params(), subject, pws);
    run_trial(&mut engine, &mut policy).unwrap();
    engine.into_log()
}

fn profile() -> impl Strategy<Value = Profile> {
    prop_oneof![
        Just(Profile::Nv),
        Just(Profile::HhLeft),
        Just(Profile::HhRight)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identical_inputs_give_identical_logs(p in profile(), i in 0usize..11, seed in any::<u64>(), pws in 0.8..1.1f64) {
        let a = run_scan(p, spec(i, seed), pws);
        let b = run_scan(p, spec(i, seed), pws);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn event_stream_is_well_formed(p in profile(), i in 0usize..11, seed in any::<u64>(), pws in 0.8..1.1f64) {
        let log = run_scan(p, spec(i, seed), pws);
        let events = &log.events;
        let starts = matches!(events.first().map(|e| &e.kind), Some(EventKind::TrialStart { .. }));
        let ends = matches!(events.last().map(|e| &e.kind), Some(EventKind::TrialEnd { .. }));
        prop_assert!(starts && ends);
        for w in events.windows(2) {
            prop_assert!(w[0].seq < w[1].seq);
            prop_assert!(w[0].t <= w[1].t);
        }
        let spawns = events.iter().filter(|e| matches!(e.kind, EventKind::PedestriansSpawned { .. })).count();
        prop_assert_eq!(spawns, 1);
        let presses = events.iter().filter(|e| matches!(e.kind, EventKind::DetectPress { .. })).count();
        prop_assert!(presses <= 1);
        let mut ids: Vec<u32> = events
            .iter()
            .filter_map(|e| match e.kind { EventKind::Collision { pedestrian_id, .. } => Some(pedestrian_id), _ => None })
            .collect();
        let n = ids.len();
        ids.dedup();
        prop_assert_eq!(ids.len(), n, "one collision event per pedestrian");
        for w in log.samples.windows(2) {
            prop_assert_eq!(w[1].tick, w[0].tick + 1);
        }
    }

    #[test]
    fn scripted_walker_meets_the_target_at_ttc(i in 0usize..10, seed in any::<u64>(), pws in 0.8..1.15f64) {
        let subject = SubjectParams::new(pws, FieldLoss::None);
        let cfg = EngineConfig::default();
        let dt = cfg.dt;
        let mut engine = TrialEngine::new(cfg, subject, spec(i, seed)).unwrap();
        run_trial(&mut engine, &mut ScriptedWalker::new(pws)).unwrap();
        let spawn = engine.spawn_t().unwrap();
        let hit = engine.log().events.iter().find_map(|e| match e.kind {
            EventKind::Collision { role: Role::Colliding, closest_t, min_distance, .. } => Some((closest_t, min_distance)),
            _ => None,
        });
        let (closest, d) = hit.expect("colliding pedestrian reached");
        prop_assert!((closest - spawn - 6.0).abs() <= dt);
        prop_assert!(d < pws * dt);
    }
}

#[test]
fn null_trials_never_collide_with_a_straight_walker() {
    for seed in 0..200u64 {
        let subject = SubjectParams::new(1.0, FieldLoss::None);
        let mut engine =
            TrialEngine::new(EngineConfig::default(), subject, TrialSpec::null(0, seed)).unwrap();
        run_trial(&mut engine, &mut ScriptedWalker::new(1.0)).unwrap();
        assert!(
            !engine
                .log()
                .events
                .iter()
                .any(|e| matches!(e.kind, EventKind::Collision { .. })),
            "seed {seed}"
        );
    }
}

#[test]
fn non_finite_inputs_are_rejected_without_side_effects() {
    let subject = SubjectParams::new(1.0, FieldLoss::None);
    let mut engine =
        TrialEngine::new(EngineConfig::default(), subject, TrialSpec::null(0, 1)).unwrap();
    engine.step(&SubjectInput::walk(1.0)).unwrap();
    let before = engine.state().clone();
    let bad = SubjectInput {
        steer_rate: f64::NAN,
        ..SubjectInput::walk(1.0)
    };
    assert!(engine.step(&bad).is_err());
    assert_eq!(engine.state(), &before);
}

#[test]
fn abort_ends_the_trial() {
    let subject = SubjectParams::new(1.0, FieldLoss::None);
    let mut engine =
        TrialEngine::new(EngineConfig::default(), subject, TrialSpec::null(0, 1)).unwrap();
    engine.step(&SubjectInput::walk(1.0)).unwrap();
    engine.abort();
    assert!(engine.is_ended());
    assert!(matches!(
        engine.log().events.last().unwrap().kind,
        EventKind::TrialEnd { .. }
    ));
    assert!(engine.step(&SubjectInput::walk(1.0)).is_err());
}
