use std::f64::consts::FRAC_PI_2;

use panfore::geometry::{
    camera_step, chain, compose_steps, step_pose, vehicle_transform, Extrinsics, Odometry, Pose2, RigidTransform,
};
use proptest::prelude::*;

fn max_diff(a: &RigidTransform, b: &RigidTransform) -> f64 {
    (a.matrix() - b.matrix()).amax()
}

fn odo() -> impl Strategy<Value = Odometry> {
    (0.0f64..15.0, -1.0f64..1.0, 0.02f64..0.5).prop_map(|(v, w, dt)| Odometry::new(v, w, dt).unwrap())
}

#[test]
fn quarter_circle_is_exact() {
    let p = step_pose(&Odometry::new(FRAC_PI_2, FRAC_PI_2, 1.0).unwrap());
    assert!((p.x - 1.0).abs() < 1e-12);
    assert!((p.y - 1.0).abs() < 1e-12);
    assert!((p.theta - FRAC_PI_2).abs() < 1e-12);
}

#[test]
fn hundred_steps_follow_the_arc() {
    let o = Odometry::new(0.1, 0.01, 1.0).unwrap();
    let ext = Extrinsics::forward_camera(1.4);
    let steps = vec![camera_step(&o, &ext); 100];
    let chained = chain(&steps).unwrap();
    // one reading covering the whole arc
    let whole = camera_step(&Odometry::new(0.1, 0.01, 100.0).unwrap(), &ext);
    assert!(max_diff(&chained, &whole) < 1e-9);

    let theta: f64 = 1.0;
    let r = 10.0;
    let arc = vehicle_transform(Pose2 { x: r * theta.sin(), y: r * (1.0 - theta.cos()), theta });
    let composed = vehicle_transform(compose_steps(&vec![o; 100]));
    assert!(max_diff(&composed, &arc) < 1e-9);
}

#[test]
fn circular_formula_meets_straight_limit() {
    for &w in &[2e-8, 5e-8, 9e-8] {
        let (v, dt) = (7.0, 1.0);
        let p = step_pose(&Odometry::new(v, w, dt).unwrap());
        assert!((p.x - v * dt).abs() < 1e-6 * v * dt);
        assert!(p.y.abs() < 1e-6 * v * dt);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn chain_then_inverse_chain_is_identity(readings in prop::collection::vec(odo(), 1..40)) {
        let ext = Extrinsics::forward_camera(1.4);
        let steps: Vec<RigidTransform> = readings.iter().map(|o| camera_step(o, &ext)).collect();
        let forward = chain(&steps).unwrap();
        let inverses: Vec<RigidTransform> = steps.iter().rev().map(|t| t.inverse()).collect();
        let back = chain(&inverses).unwrap();
        prop_assert!(max_diff(&(back * forward), &RigidTransform::identity()) < 1e-9);
        prop_assert!(forward.is_valid());
    }

    #[test]
    fn two_transform_chain_inverts(a in odo(), b in odo()) {
        let ext = Extrinsics::forward_camera(1.4);
        let (a, b) = (camera_step(&a, &ext), camera_step(&b, &ext));
        let ab = chain(&[a, b]).unwrap();
        let inv = chain(&[b.inverse(), a.inverse()]).unwrap();
        prop_assert!(max_diff(&(inv * ab), &RigidTransform::identity()) < 1e-9);
    }

    #[test]
    fn composed_steps_match_chained_vehicle_transforms(readings in prop::collection::vec(odo(), 1..20)) {
        let chained = readings.iter().fold(RigidTransform::identity(), |acc, o| acc * vehicle_transform(step_pose(o)));
        let p = compose_steps(&readings);
        prop_assert!(max_diff(&vehicle_transform(p), &chained) < 1e-9);
    }
}
