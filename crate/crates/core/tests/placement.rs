use pedtrial_core::scenario::{
    collision_point, place_approaching, place_overtaken, CollisionCourse, PlacementRules, Role,
};
use pedtrial_core::Vec2;
use proptest::prelude::*;

fn bearing() -> impl Strategy<Value = f64> {
    prop_oneof![-44.0..-1.0f64, 1.0..44.0f64]
}

proptest! {
    #[test]
    fn approaching_range_follows_the_law_of_cosines(pws in 0.5..1.6f64, ttc in 2.0..10.0f64, beta in bearing()) {
        let init = place_approaching(pws, ttc, beta).unwrap();
        let d = pws * ttc;
        let r = init.initial_position.norm();
        // |P0 - C|^2 = r^2 + d^2 - 2 r d cos(beta), equal to d^2 on a collision course.
        let gap = r * r + d * d - 2.0 * r * d * beta.to_radians().cos();
        prop_assert!((gap.sqrt() - d).abs() < 1e-9 * d);
        prop_assert!((r - 2.0 * d * beta.to_radians().cos()).abs() < 1e-9 * d);
        prop_assert_eq!(init.role, Role::Colliding);
    }

    #[test]
    fn every_placement_reaches_the_collision_point_at_ttc(
        pws in 0.6..1.5f64,
        ttc in 3.0..9.0f64,
        beta in bearing(),
        init_distance in 0.8..2.5f64,
    ) {
        let cp = collision_point(pws, ttc, Vec2::ZERO, Vec2::new(0.0, 1.0)).unwrap();
        let approaching = place_approaching(pws, ttc, beta).unwrap();
        let end = approaching.initial_position + approaching.velocity * ttc;
        prop_assert!(end.distance(cp) < 1e-9);
        prop_assert!((approaching.speed() - pws).abs() < 1e-12);

        if let Ok(overtaken) = place_overtaken(pws, ttc, beta, init_distance) {
            let end = overtaken.initial_position + overtaken.velocity * ttc;
            prop_assert!(end.distance(cp) < 1e-9);
            prop_assert!(overtaken.speed() < pws);
            prop_assert!((overtaken.initial_position.norm() - init_distance).abs() < 1e-12);
        }
    }

    #[test]
    fn placements_are_mirror_symmetric(pws in 0.6..1.5f64, ttc in 3.0..9.0f64, beta in bearing()) {
        let right = place_approaching(pws, ttc, beta).unwrap();
        let left = place_approaching(pws, ttc, -beta).unwrap();
        prop_assert!(left.initial_position.distance(right.initial_position.mirror_x()) < 1e-12);
        prop_assert!(left.velocity.distance(right.velocity.mirror_x()) < 1e-12);

        let right = place_overtaken(pws, ttc, beta, 2.0);
        let left = place_overtaken(pws, ttc, -beta, 2.0);
        prop_assert_eq!(right.is_ok(), left.is_ok());
        if let (Ok(r), Ok(l)) = (right, left) {
            prop_assert!(l.initial_position.distance(r.initial_position.mirror_x()) < 1e-12);
            prop_assert!(l.velocity.distance(r.velocity.mirror_x()) < 1e-12);
        }
    }
}

#[test]
fn default_courses_place_at_the_nominal_speed() {
    let rules = PlacementRules::default();
    for beta in [-40.0, -20.0, 20.0, 40.0] {
        let a = CollisionCourse::approaching(beta)
            .place(0.9, &rules)
            .unwrap();
        assert!((a.speed() - 0.9).abs() < 1e-12);
    }
    for beta in [-60.0, -40.0, -20.0, 20.0, 40.0, 60.0] {
        let o = CollisionCourse::overtaken(beta).place(0.9, &rules).unwrap();
        assert!(o.speed() < 0.9, "beta {beta}: {}", o.speed());
    }
}

#[test]
fn approaching_rejects_wide_bearings() {
    assert!(place_approaching(0.9, 6.0, 60.0).is_err());
    assert!(place_approaching(0.9, 6.0, 90.0).is_err());
    assert!(place_approaching(0.9, 6.0, -50.0).is_err());
}

#[test]
fn overtaken_must_be_slower_than_the_subject() {
    // Starting almost level with the subject at a wide bearing needs a fast walker.
    assert!(place_overtaken(0.9, 6.0, 80.0, 5.0).is_err());
    assert!(place_overtaken(0.9, 6.0, 20.0, 0.0).is_err());
}
