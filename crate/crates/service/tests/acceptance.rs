//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod support;

use nalgebra::{DMatrix, DVector};
use pedtrial::live::{read_inputs, replay, INPUTS_FILE};
use pedtrial::protocol::{ClientMessage, InputFrame, Mode, SessionConfig};
use pedtrial_core::agents::{Profile, ScanPolicy, ScriptedWalker};
use pedtrial_core::analysis::dist::student_t_two_sided;
use pedtrial_core::analysis::report::analyze;
use pedtrial_core::analysis::{
    chi_square_2x2, derive_outcomes, holm_bonferroni, lmm_random_intercept, logistic_irls, Group,
    HeadChannel, TrialKind, Window,
};
use pedtrial_core::engine::{
    visible, EngineConfig, EventKind, ResponseClass, SubjectPose, TrialEngine,
};
use pedtrial_core::scenario::{
    collision_conditions, place_approaching, place_overtaken, CollisionCourse, CourseKind,
    FieldLoss, Role, SessionDesign, SubjectParams, TrialSpec,
};
use pedtrial_core::session::{run_trial, simulate_session, SessionSettings};
use pedtrial_core::store;
use pedtrial_core::Vec2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(id: u32, name: &str, limit: Duration, f: fn() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let result = match result {
        Ok(d) if elapsed > limit => Err(format!(
            "{d}; took {:.2} s, limit {} s",
            elapsed.as_secs_f64(),
            limit.as_secs()
        )),
        r => r,
    };
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!(
        "{tag} criterion {id}: {name} [{:.2} s] {detail}",
        elapsed.as_secs_f64()
    );
    result.is_ok()
}

fn main() {
    let criteria: [(u32, &str, u64, fn() -> Check); 8] = [
        (1, "geometry oracle", 1, geometry),
        (2, "time-to-collision invariant", 30, ttc_invariant),
        (3, "visibility equivalence", 5, visibility),
        (4, "blind-side impossibility", 60, blind_side),
        (5, "qualitative direction suite", 120, qualitative),
        (6, "statistics oracles", 10, statistics),
        (7, "determinism and replay", 120, determinism),
        (8, "store round trip", 120, round_trip),
    ];
    let mut failed = 0;
    for (id, name, secs, f) in criteria {
        if !run(id, name, Duration::from_secs(secs), f) {
            failed += 1;
        }
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// 1 ------------------------------------------------------------------------

/// Far root of |r (sin b, cos b) - (0, d)| = d by bisection. The near root
/// is r = 0.
fn approaching_range_oracle(v: f64, ttc: f64, beta_deg: f64) -> f64 {
    let d = v * ttc;
    let (s, c) = beta_deg.to_radians().sin_cos();
    let f = |r: f64| ((r * s).powi(2) + (r * c - d).powi(2)).sqrt() - d;
    let (mut lo, mut hi) = (d * 1e-6, 4.0 * d);
    assert!(f(lo) < 0.0 && f(hi) > 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn geometry() -> Check {
    let mut worst: f64 = 0.0;
    for (beta, expected) in [
        (20.0, 10.1487),
        (-20.0, 10.1487),
        (40.0, 8.2733),
        (-40.0, 8.2733),
    ] {
        let init = place_approaching(0.9, 6.0, beta).map_err(|e| e.to_string())?;
        let r = init.initial_position.norm();
        let oracle = approaching_range_oracle(0.9, 6.0, beta);
        ensure((r - oracle).abs() < 1e-6, || {
            format!("beta {beta}: range {r} vs oracle {oracle}")
        })?;
        ensure((r - expected).abs() < 5e-5, || {
            format!("beta {beta}: range {r} vs {expected}")
        })?;
        let at_ttc = init.initial_position + init.velocity * 6.0;
        ensure(at_ttc.distance(Vec2::new(0.0, 5.4)) < 1e-9, || {
            format!("beta {beta}: misses the collision point")
        })?;
        worst = worst.max((r - oracle).abs());
    }
    let init = place_overtaken(0.9, 6.0, 20.0, 2.0).map_err(|e| e.to_string())?;
    let p0 = Vec2::new(
        2.0 * 20f64.to_radians().sin(),
        2.0 * 20f64.to_radians().cos(),
    );
    let oracle = (Vec2::new(0.0, 5.4) - p0).norm() / 6.0;
    let speed = init.speed();
    ensure((speed - oracle).abs() < 1e-6, || {
        format!("overtaken speed {speed} vs oracle {oracle}")
    })?;
    ensure((speed - 0.5977).abs() < 5e-5, || {
        format!("overtaken speed {speed} vs 0.5977")
    })?;
    Ok(format!(
        "ranges 10.1487/8.2733 m, max oracle gap {worst:.1e}; overtaken speed {speed:.4} m/s, gap {:.1e}",
        (speed - oracle).abs()
    ))
}

// 2 ------------------------------------------------------------------------

fn walk(spec: TrialSpec, pws: f64) -> Vec<pedtrial_core::engine::Event> {
    let cfg = EngineConfig::default();
    let params = SubjectParams::new(pws, FieldLoss::None);
    let mut engine = TrialEngine::new(cfg, params, spec).unwrap();
    run_trial(&mut engine, &mut ScriptedWalker::new(pws)).unwrap();
    engine.into_log().events
}

fn ttc_invariant() -> Check {
    let dt = EngineConfig::default().dt;
    let runs: Vec<(f64, usize)> = collision_conditions()
        .into_par_iter()
        .flat_map_iter(|(kind, beta)| (0..20u64).map(move |seed| (kind, beta, seed)))
        .map(|(kind, beta, seed)| {
            // The collision point must fall between the start and end
            // triggers, 7 m apart by default, so pws * 6 s stays below 7 m.
            let pws = 0.8 + 0.0175 * seed as f64;
            let course = match kind {
                CourseKind::Approaching => CollisionCourse::approaching(beta),
                CourseKind::Overtaken => CollisionCourse::overtaken(beta),
            };
            let events = walk(TrialSpec::with_course(0, course, seed), pws);
            let spawn = events
                .iter()
                .find(|e| matches!(e.kind, EventKind::PedestriansSpawned { .. }))
                .map(|e| e.t);
            let hits: Vec<f64> = events
                .iter()
                .filter(|e| {
                    matches!(
                        e.kind,
                        EventKind::Collision {
                            role: Role::Colliding,
                            ..
                        }
                    )
                })
                .map(|e| e.t)
                .collect();
            let others = events
                .iter()
                .filter(|e| {
                    matches!(
                        e.kind,
                        EventKind::Collision {
                            role: Role::Distractor,
                            ..
                        }
                    )
                })
                .count();
            match (spawn, hits.as_slice()) {
                (Some(s), [t]) => (t - s, others),
                _ => (f64::NAN, others),
            }
        })
        .collect();
    let on_time = runs
        .iter()
        .filter(|(t, _)| (t - 6.0).abs() <= 2.0 * dt)
        .count();
    let worst = runs
        .iter()
        .map(|(t, _)| (t - 6.0).abs())
        .fold(0.0, f64::max);

    let null_collisions: usize = (0..1000u64)
        .into_par_iter()
        .map(|seed| {
            let pws = 0.8 + 0.035 * (seed % 10) as f64;
            walk(TrialSpec::null(0, seed), pws)
                .iter()
                .filter(|e| matches!(e.kind, EventKind::Collision { .. }))
                .count()
        })
        .sum();
    let detail = format!(
        "{on_time}/200 collision events within 2 dt of 6.0 s (worst {worst:.4} s); {null_collisions} collisions in 1000 null trials"
    );
    ensure(on_time == 200 && null_collisions == 0, || detail.clone())?;
    Ok(detail)
}

// 3 ------------------------------------------------------------------------

/// Field membership from the field definitions, on exact half-degree arithmetic.
fn field_contains(loss: FieldLoss, alpha: f64, half: f64) -> bool {
    let inside = alpha.abs() <= half;
    match loss {
        FieldLoss::None => inside,
        FieldLoss::LeftHemianopia => inside && alpha >= 0.0,
        FieldLoss::RightHemianopia => inside && alpha <= 0.0,
    }
}

fn visibility() -> Check {
    let fields = [
        FieldLoss::None,
        FieldLoss::LeftHemianopia,
        FieldLoss::RightHemianopia,
    ];
    let yaws = [-60.0, -30.0, 0.0, 30.0, 60.0];
    let mut agree = 0;
    let mut cells = 0;
    for loss in fields {
        let params = SubjectParams::new(1.0, loss);
        for yaw in yaws {
            let pose = SubjectPose {
                head_yaw: yaw,
                ..SubjectPose::default()
            };
            // Half-degree bearings keep every cell off the field edges.
            for k in 0..360 {
                let bearing = -179.5 + k as f64;
                let p = Vec2::new(bearing.to_radians().sin(), bearing.to_radians().cos()) * 5.0;
                let mut alpha = bearing - yaw;
                if alpha > 180.0 {
                    alpha -= 360.0;
                } else if alpha <= -180.0 {
                    alpha += 360.0;
                }
                cells += 1;
                agree += (visible(&pose, p, &params)
                    == field_contains(loss, alpha, params.fov_half_angle))
                    as usize;
            }
        }
    }
    let mut periphery_hidden = true;
    for loss in fields {
        let params = SubjectParams::new(1.0, loss);
        for beta in [-60.0f64, 60.0] {
            let p = Vec2::new(beta.to_radians().sin(), beta.to_radians().cos()) * 5.0;
            periphery_hidden &= !visible(&SubjectPose::default(), p, &params);
        }
    }
    let detail = format!("{agree}/{cells} cells agree; +-60 deg hidden at zero yaw in all fields: {periphery_hidden}");
    ensure(agree == 5400 && cells == 5400 && periphery_hidden, || {
        detail.clone()
    })?;
    Ok(detail)
}

// 4 ------------------------------------------------------------------------

fn blind_side() -> Check {
    let mut params = Profile::HhLeft.default_params();
    params.scan_amplitude = 0.0;
    params.scan_amplitude_jitter = 0.0;
    let settings = SessionSettings {
        policy: Some(params),
        ..SessionSettings::default()
    };
    // A press on the seeing side answers a visible distractor, not the target.
    let per_session: Vec<(usize, usize, usize)> = (0..50u32)
        .into_par_iter()
        .map(|i| {
            let s = simulate_session(&settings, Profile::HhLeft, 404, i).unwrap();
            let outcomes = derive_outcomes(&s).unwrap();
            let far_blind: Vec<_> = outcomes
                .iter()
                .filter(|o| o.beta_std.is_some_and(|b| b <= -40.0))
                .collect();
            let hits = far_blind
                .iter()
                .filter(|o| o.response_class == ResponseClass::HitCorrect)
                .count();
            let wrong = far_blind
                .iter()
                .filter(|o| o.response_class == ResponseClass::HitWrongSide)
                .count();
            (far_blind.len(), hits, wrong)
        })
        .collect();
    let n: usize = per_session.iter().map(|p| p.0).sum();
    let detected: usize = per_session.iter().map(|p| p.1).sum();
    let wrong: usize = per_session.iter().map(|p| p.2).sum();
    let detail = format!(
        "{detected}/{n} blind-side targets at |beta| >= 40 detected ({wrong} seeing-side presses at distractors)"
    );
    ensure(detected == 0 && n > 0, || detail.clone())?;
    Ok(detail)
}

// 5 ------------------------------------------------------------------------

fn qualitative() -> Check {
    let settings = SessionSettings::default();
    let jobs: Vec<(Profile, u32)> = (0..100)
        .map(|i| (Profile::Nv, i))
        .chain((0..50).map(|i| (Profile::HhLeft, i)))
        .chain((0..50).map(|i| (Profile::HhRight, i)))
        .collect();
    let outcomes: Vec<_> = jobs
        .par_iter()
        .map(|&(p, i)| derive_outcomes(&simulate_session(&settings, p, 2024, i).unwrap()).unwrap())
        .flatten()
        .collect();
    let report = analyze(&outcomes);

    let rate = |g: Group| {
        report
            .rates_by_group
            .iter()
            .find(|r| r.group == Some(g))
            .and_then(|r| r.collision_rate)
            .unwrap_or(f64::NAN)
    };
    let (hh, nv) = (rate(Group::Hh), rate(Group::Nv));
    let a = hh > nv;

    let hh_cells: Vec<_> = report
        .rates_by_condition
        .iter()
        .filter(|r| r.group == Some(Group::Hh))
        .collect();
    let top = hh_cells
        .iter()
        .max_by(|x, y| x.collision_rate.partial_cmp(&y.collision_rate).unwrap())
        .unwrap();
    let top_rate = top.collision_rate.unwrap();
    let runner_up = hh_cells
        .iter()
        .filter(|r| !std::ptr::eq(**r, *top))
        .filter_map(|r| r.collision_rate)
        .fold(0.0, f64::max);
    let b = top.kind == Some(TrialKind::Overtaken)
        && top.beta_std == Some(-60.0)
        && top_rate > runner_up;

    let median = |g: Group, k: TrialKind| {
        report
            .median_rt
            .iter()
            .find(|m| m.group == g && m.kind == k)
            .and_then(|m| m.median)
            .unwrap_or(f64::NAN)
    };
    let rts: BTreeMap<&str, (f64, f64)> = [("nv", Group::Nv), ("hh", Group::Hh)]
        .into_iter()
        .map(|(n, g)| {
            (
                n,
                (
                    median(g, TrialKind::Overtaken),
                    median(g, TrialKind::Approaching),
                ),
            )
        })
        .collect();
    let c = rts.values().all(|(o, a)| o < a);

    let yaw = |w: Window| {
        report
            .head_bias
            .iter()
            .find(|r| r.group == Group::Hh && r.channel == HeadChannel::Yaw && r.window == w)
            .and_then(|r| r.mean)
            .unwrap_or(f64::NAN)
    };
    let (before, after) = (yaw(Window::Before), yaw(Window::After));
    let d = [before, after]
        .iter()
        .all(|m| *m < 0.0 && (1.0..=8.0).contains(&m.abs()));

    let detail = format!(
        "(a) collisions HH {:.1}% vs NV {:.1}% {}; (b) HH max at {:?} {:?} = {:.1}% (next {:.1}%) {}; \
         (c) median RT overtaken/approaching NV {:.2}/{:.2} s, HH {:.2}/{:.2} s {}; \
         (d) HH yaw before {before:.2}, after {after:.2} deg {}",
        100.0 * hh,
        100.0 * nv,
        ok(a),
        top.kind.unwrap(),
        top.beta_std.unwrap(),
        100.0 * top_rate,
        100.0 * runner_up,
        ok(b),
        rts["nv"].0,
        rts["nv"].1,
        rts["hh"].0,
        rts["hh"].1,
        ok(c),
        ok(d),
    );
    ensure(a && b && c && d, || detail.clone())?;
    Ok(detail)
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAILED"
    }
}

// 6 ------------------------------------------------------------------------

fn bernoulli_loglik(x: &DMatrix<f64>, y: &[f64], beta: &[f64]) -> f64 {
    (0..x.nrows())
        .map(|i| {
            let eta: f64 = (0..x.ncols()).map(|j| x[(i, j)] * beta[j]).sum();
            // log(1 + e^eta) without overflow.
            let softplus = eta.max(0.0) + (-eta.abs()).exp().ln_1p();
            y[i] * eta - softplus
        })
        .sum()
}

/// Maximizes `f` over a box by repeated grid refinement around the best point.
fn grid_max(
    dim: usize,
    center: Vec<f64>,
    half_width: f64,
    rounds: usize,
    f: impl Fn(&[f64]) -> f64,
) -> (Vec<f64>, f64) {
    const K: i64 = 10;
    let mut center = center;
    let mut w = half_width;
    let mut best = (center.clone(), f(&center));
    for _ in 0..rounds {
        let side = (2 * K + 1) as usize;
        let total = side.pow(dim as u32);
        for idx in 0..total {
            let mut rem = idx;
            let point: Vec<f64> = (0..dim)
                .map(|d| {
                    let k = (rem % side) as i64 - K;
                    rem /= side;
                    center[d] + w * k as f64 / K as f64
                })
                .collect();
            let v = f(&point);
            if v > best.1 {
                best = (point, v);
            }
        }
        center = best.0.clone();
        w *= 0.5;
    }
    best
}

fn logistic_fixtures() -> Vec<(DMatrix<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    let x1: Vec<f64> = (0..20).map(|i| -2.0 + 4.0 * i as f64 / 19.0).collect();
    let y1 = vec![
        0., 0., 0., 1., 0., 0., 1., 0., 0., 1., 1., 0., 1., 1., 0., 1., 1., 1., 0., 1.,
    ];
    out.push((
        DMatrix::from_fn(20, 2, |i, j| if j == 0 { 1.0 } else { x1[i] }),
        y1,
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x2: Vec<f64> = (0..100).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y2 = x2
        .iter()
        .map(|x| (rng.random::<f64>() < 1.0 / (1.0 + (-(0.5 + 1.2 * x)).exp())) as u8 as f64)
        .collect();
    out.push((
        DMatrix::from_fn(100, 2, |i, j| if j == 0 { 1.0 } else { x2[i] }),
        y2,
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x3: Vec<(f64, f64)> = (0..150)
        .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
        .collect();
    let y3 = x3
        .iter()
        .map(|(a, b)| {
            (rng.random::<f64>() < 1.0 / (1.0 + (-(-0.3 + 0.8 * a - 1.0 * b)).exp())) as u8 as f64
        })
        .collect();
    out.push((
        DMatrix::from_fn(150, 3, |i, j| match j {
            0 => 1.0,
            1 => x3[i].0,
            _ => x3[i].1,
        }),
        y3,
    ));
    out
}

/// Grid maxima of the three logistic fixtures, frozen from `grid_max`.
const LOGISTIC_GRID_LOGLIK: [f64; 3] = [-11.862827734156, -45.795721638683, -79.270992993740];

struct LmmFixture {
    x: DMatrix<f64>,
    y: Vec<f64>,
    groups: Vec<usize>,
}

fn lmm_fixture() -> LmmFixture {
    let b = [0.8, -0.5, 0.3, -1.1, 0.6, -0.1];
    let e = [
        0.12, -0.31, 0.45, -0.08, 0.27, -0.52, 0.09, 0.33, -0.19, 0.04, 0.61, -0.27, -0.11, 0.38,
        -0.44, 0.17, -0.06, 0.29, -0.35, 0.22, -0.13, 0.47, 0.02, -0.24, 0.31, 0.08, -0.41, 0.19,
        -0.03, 0.26,
    ];
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut groups = Vec::new();
    for (g, bg) in b.iter().enumerate() {
        for j in 0..5 {
            let xi = (j as f64 - 2.0) * 0.5 + g as f64 * 0.1;
            x.push(xi);
            y.push(1.0 + 0.7 * xi + bg + e[g * 5 + j]);
            groups.push(g);
        }
    }
    let n = x.len();
    LmmFixture {
        x: DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] }),
        y,
        groups,
    }
}

/// Marginal log likelihood with the fixed effects at their GLS estimate,
/// from the dense covariance matrix.
fn lmm_dense(f: &LmmFixture, s2b: f64, s2e: f64) -> Option<(f64, DVector<f64>)> {
    let n = f.y.len();
    let v = DMatrix::from_fn(n, n, |i, j| {
        (if f.groups[i] == f.groups[j] { s2b } else { 0.0 }) + if i == j { s2e } else { 0.0 }
    });
    let chol = v.cholesky()?;
    let y = DVector::from_column_slice(&f.y);
    let vi_x = chol.solve(&f.x);
    let vi_y = chol.solve(&y);
    let beta = (f.x.transpose() * &vi_x)
        .cholesky()?
        .solve(&(f.x.transpose() * vi_y));
    let r = &y - &f.x * &beta;
    let quad = r.dot(&chol.solve(&r));
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some((
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad),
        beta,
    ))
}

/// Grid optimum of the balanced fixture: (beta0, beta1, sigma2_b, sigma2_e), frozen.
const LMM_GRID: [f64; 4] = [
    1.0338122382699149,
    0.7194177135870053,
    0.4418317491406724,
    0.10217784774512177,
];

fn statistics() -> Check {
    let mut notes = Vec::new();
    let mut gaps = Vec::new();
    for (k, (x, y)) in logistic_fixtures().iter().enumerate() {
        let fit = logistic_irls(x, y).map_err(|e| format!("fixture {k}: {e}"))?;
        let (_, grid) = grid_max(x.ncols(), vec![0.0; x.ncols()], 8.0, 40, |b| {
            bernoulli_loglik(x, y, b)
        });
        let gap = (fit.loglik - grid).abs();
        ensure(gap < 1e-6, || {
            format!("fixture {k}: IRLS loglik {} vs grid {grid}", fit.loglik)
        })?;
        ensure((grid - LOGISTIC_GRID_LOGLIK[k]).abs() < 1e-9, || {
            format!(
                "fixture {k}: grid loglik {grid} drifted from frozen {}",
                LOGISTIC_GRID_LOGLIK[k]
            )
        })?;
        gaps.push(gap);
    }
    notes.push(format!(
        "IRLS vs grid loglik max gap {:.1e}",
        gaps.iter().cloned().fold(0.0, f64::max)
    ));

    let fx = lmm_fixture();
    let fit = lmm_random_intercept(&fx.x, &fx.y, &fx.groups).map_err(|e| e.to_string())?;
    let (best, _) = grid_max(2, vec![-2.0, -2.0], 6.0, 40, |p| {
        lmm_dense(&fx, p[0].exp(), p[1].exp()).map_or(f64::NEG_INFINITY, |r| r.0)
    });
    let (s2b, s2e) = (best[0].exp(), best[1].exp());
    let (_, beta) = lmm_dense(&fx, s2b, s2e).unwrap();
    let oracle = [beta[0], beta[1], s2b, s2e];
    let got = [
        fit.coefficients[0],
        fit.coefficients[1],
        fit.sigma2_b,
        fit.sigma2_e,
    ];
    let lmm_gap = got
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(lmm_gap < 1e-4, || format!("lmm {got:?} vs grid {oracle:?}"))?;
    let drift = oracle
        .iter()
        .zip(&LMM_GRID)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(drift < 1e-6, || {
        format!("lmm grid {oracle:?} drifted from frozen {LMM_GRID:?}")
    })?;
    notes.push(format!("LMM vs dense grid max gap {lmm_gap:.1e}"));

    let p = student_t_two_sided(1.0, 1.0);
    ensure((p - 0.5).abs() < 1e-12, || {
        format!("t(1, df 1) two-sided p = {p}")
    })?;
    notes.push(format!("p(t=1, df=1) = {p}"));

    let holm = [
        (
            vec![0.0625, 0.25, 0.125, 0.03125],
            vec![0.1875, 0.25, 0.25, 0.125],
        ),
        (vec![0.5, 0.75], vec![1.0, 1.0]),
        (vec![0.01], vec![0.01]),
        (vec![0.25, 0.25, 0.5], vec![0.75, 0.75, 0.75]),
    ];
    for (input, expected) in &holm {
        let got = holm_bonferroni(input).map_err(|e| e.to_string())?;
        ensure(&got == expected, || {
            format!("holm {input:?} -> {got:?}, expected {expected:?}")
        })?;
    }
    notes.push(format!("{} Holm fixtures exact", holm.len()));

    let chi = chi_square_2x2(50, 389, 8, 431).map_err(|e| e.to_string())?;
    let (a, b, c, d) = (50.0, 389.0, 8.0, 431.0);
    let hand = (a + b + c + d) * (a * d - b * c) * (a * d - b * c)
        / ((a + b) * (c + d) * (a + c) * (b + d));
    ensure(
        (chi.statistic - 32.57).abs() <= 0.01 && (chi.statistic - hand).abs() < 1e-9,
        || format!("chi-square {} vs hand formula {hand}", chi.statistic),
    )?;
    notes.push(format!("chi-square {:.3}", chi.statistic));
    Ok(notes.join("; "))
}

// 7 ------------------------------------------------------------------------

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().display().to_string(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for out in ["first", "second"] {
        let status = Command::new(env!("CARGO_BIN_EXE_pedtrial"))
            .args([
                "simulate",
                "--profile",
                "nv",
                "--sessions",
                "1",
                "--seed",
                "7",
                "--out",
                out,
            ])
            .current_dir(dir.path())
            .env_remove("PEDTRIAL_DT")
            .env_remove("PEDTRIAL_TTC")
            .env_remove("PEDTRIAL_DISTRACTORS")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || {
            String::from_utf8_lossy(&status.stderr).into_owned()
        })?;
    }
    let a = tree(&dir.path().join("first"));
    let b = tree(&dir.path().join("second"));
    ensure(!a.is_empty() && a == b, || {
        "simulate --seed 7 runs differ".into()
    })?;

    let store_root = dir.path().join("live");
    let (events_a, events_b, trials) = tokio::runtime::Runtime::new().unwrap().block_on(async {
        use support::ws::{connect, hello, recv, run_policy, send, Server};
        let server = Server::start(Some(store_root.clone())).await;
        let config = SessionConfig {
            seed: 7,
            mode: Mode::Lockstep,
            field_loss: FieldLoss::LeftHemianopia,
            pws: Some(1.0),
            state_divisor: Some(1),
            ..SessionConfig::default()
        };
        let mut ws = connect(server.addr).await;
        let original = hello(&mut ws, config).await;
        let subject = SubjectParams::new(1.0, FieldLoss::LeftHemianopia);
        let mut policy = ScanPolicy::new(Profile::HhLeft.default_params(), subject, 1.0);
        run_policy(&mut ws, &mut policy).await;
        while recv(&mut ws).await.is_some() {}

        let inputs =
            read_inputs(&store::session_dir(&store_root, &original).join(INPUTS_FILE)).unwrap();
        let mut ws = connect(server.addr).await;
        let mut replayed = None;
        for rec in &inputs {
            send(&mut ws, &rec.message).await;
            if replayed.is_none() {
                if let Some(pedtrial::protocol::ServerMessage::SessionAck { session_id, .. }) =
                    recv(&mut ws).await
                {
                    replayed = Some(session_id);
                }
            }
        }
        while recv(&mut ws).await.is_some() {}
        server.stop().await;
        let load = |id: &str| {
            let s = store::read_session(&store::session_dir(&store_root, id)).unwrap();
            s.trials
                .iter()
                .map(|t| t.events.clone())
                .collect::<Vec<_>>()
        };
        let a = load(&original);
        (a.clone(), load(&replayed.unwrap()), a.len())
    });
    ensure(trials == 32 && events_a == events_b, || {
        format!("served replay differs ({trials} trials)")
    })?;

    // A realtime session replayed offline from its input log.
    let cfg = SessionConfig {
        seed: 7,
        field_loss: FieldLoss::RightHemianopia,
        pws: Some(1.0),
        trials: Some(
            pedtrial_core::scenario::generate_session(&SubjectParams::new(1.0, FieldLoss::None), 7)
                [..4]
                .to_vec(),
        ),
        ..SessionConfig::default()
    };
    let (mut session, _) = pedtrial::live::LiveSession::open(
        "rt",
        cfg,
        EngineConfig::default(),
        SessionDesign::default(),
    )
    .map_err(|e| format!("{e:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    while !session.is_finished() {
        if !session.is_running() {
            session.handle(ClientMessage::StartTrial {}).unwrap();
        }
        for _ in 0..rng.random_range(0..3) {
            session.advance().unwrap();
        }
        if rng.random_bool(0.2) {
            session
                .handle(ClientMessage::Input(InputFrame {
                    tick: 0,
                    steer_rate: rng.random_range(-3.0..3.0),
                    speed_target: rng.random_range(0.9..1.2),
                    head_yaw_target: rng.random_range(-30.0..30.0),
                    head_pitch_target: 0.0,
                }))
                .unwrap();
        }
    }
    let again = replay(
        "rt",
        session.inputs(),
        EngineConfig::default(),
        SessionDesign::default(),
    )
    .map_err(|e| format!("{e:?}"))?;
    let same = again.records() == session.records();
    ensure(same, || "realtime replay differs".into())?;
    Ok(format!(
        "simulate --seed 7 twice: {} identical files; served lockstep replay: {trials} trials with identical events; \
         realtime replay of {} inputs identical",
        a.len(),
        session.inputs().len()
    ))
}

// 8 ------------------------------------------------------------------------

fn round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let jobs: Vec<(Profile, u64, u32)> = (0..50)
        .map(|i| {
            let profile = [Profile::Nv, Profile::HhLeft, Profile::HhRight][i % 3];
            (
                profile,
                rng.random_range(0..1_000_000),
                rng.random_range(0..1000),
            )
        })
        .collect();
    let failures: Vec<String> = jobs
        .par_iter()
        .enumerate()
        .filter_map(|(k, &(profile, seed, index))| {
            let session =
                simulate_session(&SessionSettings::default(), profile, seed, index).unwrap();
            let a = dir.path().join(format!("a{k}"));
            let b = dir.path().join(format!("b{k}"));
            store::write_session(&a, &session).unwrap();
            let back = store::read_session(&a).unwrap();
            if back != session {
                return Some(format!(
                    "{}: read differs from written",
                    session.manifest.session_id
                ));
            }
            store::write_session(&b, &back).unwrap();
            (tree(&a) != tree(&b))
                .then(|| format!("{}: rewrite differs", session.manifest.session_id))
        })
        .collect();
    let detail = format!(
        "{}/50 sessions equal after write, read, write",
        50 - failures.len()
    );
    ensure(failures.is_empty(), || {
        format!("{detail}: {}", failures.join(", "))
    })?;
    Ok(detail)
}
