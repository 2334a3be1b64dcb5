use pedtrial_core::engine::{visible, SubjectPose};
use pedtrial_core::scenario::{FieldLoss, SubjectParams};
use pedtrial_core::Vec2;
use proptest::prelude::*;

/// Bearing of `p` seen from `pose`, relative to gaze, in (-180, 180]. Works
/// from atan2 rather than the library's heading helpers.
fn relative(pose: &SubjectPose, p: Vec2) -> f64 {
    let d = p - pose.position;
    let bearing = d.x.atan2(d.y).to_degrees();
    let mut a = bearing - pose.body_heading - pose.head_yaw;
    while a > 180.0 {
        a -= 360.0;
    }
    while a <= -180.0 {
        a += 360.0;
    }
    a
}

fn field() -> impl Strategy<Value = FieldLoss> {
    prop_oneof![
        Just(FieldLoss::None),
        Just(FieldLoss::LeftHemianopia),
        Just(FieldLoss::RightHemianopia)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn matches_the_set_membership_oracle(
        loss in field(),
        fov in 20.0..90.0f64,
        x in -20.0..20.0f64,
        y in -20.0..20.0f64,
        px in -20.0..20.0f64,
        py in -20.0..20.0f64,
        heading in -180.0..180.0f64,
        yaw in -90.0..90.0f64,
    ) {
        let pose = SubjectPose { position: Vec2::new(x, y), body_heading: heading, head_yaw: yaw, ..SubjectPose::default() };
        let p = Vec2::new(px, py);
        prop_assume!(p.distance(pose.position) > 1e-3);
        let mut params = SubjectParams::new(1.0, loss);
        params.fov_half_angle = fov;
        let a = relative(&pose, p);
        // Skip cells within rounding of a field edge.
        prop_assume!((a.abs() - fov).abs() > 1e-6 && a.abs() > 1e-6);
        let expected = a.abs() <= fov
            && match loss {
                FieldLoss::None => true,
                FieldLoss::LeftHemianopia => a > 0.0,
                FieldLoss::RightHemianopia => a < 0.0,
            };
        prop_assert_eq!(visible(&pose, p, &params), expected);
    }

    #[test]
    fn hemifields_mirror_each_other(px in -20.0..20.0f64, py in -20.0..20.0f64, yaw in -60.0..60.0f64) {
        let p = Vec2::new(px, py);
        prop_assume!(p.norm() > 1e-3 && px.abs() > 1e-9);
        let pose = SubjectPose { head_yaw: yaw, ..SubjectPose::default() };
        let mirrored = SubjectPose { head_yaw: -yaw, ..SubjectPose::default() };
        let left = SubjectParams::new(1.0, FieldLoss::LeftHemianopia);
        let right = SubjectParams::new(1.0, FieldLoss::RightHemianopia);
        prop_assert_eq!(visible(&pose, p, &left), visible(&mirrored, p.mirror_x(), &right));
    }

    #[test]
    fn hemianopic_fields_partition_the_full_field(px in -20.0..20.0f64, py in -20.0..20.0f64, yaw in -60.0..60.0f64) {
        let p = Vec2::new(px, py);
        prop_assume!(p.norm() > 1e-3);
        let pose = SubjectPose { head_yaw: yaw, ..SubjectPose::default() };
        let a = relative(&pose, p);
        prop_assume!(a.abs() > 1e-6);
        let full = visible(&pose, p, &SubjectParams::new(1.0, FieldLoss::None));
        let left = visible(&pose, p, &SubjectParams::new(1.0, FieldLoss::LeftHemianopia));
        let right = visible(&pose, p, &SubjectParams::new(1.0, FieldLoss::RightHemianopia));
        prop_assert_eq!(full, left || right);
        prop_assert!(!(left && right));
    }
}

#[test]
fn field_edges_are_inclusive() {
    let pose = SubjectPose::default();
    let params = SubjectParams::new(1.0, FieldLoss::None);
    let edge = Vec2::from_heading(params.fov_half_angle) * 5.0;
    assert!(visible(&pose, edge, &params));
    let outside = Vec2::from_heading(params.fov_half_angle + 0.01) * 5.0;
    assert!(!visible(&pose, outside, &params));
    // The vertical meridian belongs to both hemifields.
    let ahead = Vec2::new(0.0, 5.0);
    assert!(visible(
        &pose,
        ahead,
        &SubjectParams::new(1.0, FieldLoss::LeftHemianopia)
    ));
    assert!(visible(
        &pose,
        ahead,
        &SubjectParams::new(1.0, FieldLoss::RightHemianopia)
    ));
}
