use approx::assert_relative_eq;
use featalign::geometry::*;
use nalgebra::{Matrix3, Vector3, Vector6};
use proptest::prelude::*;
use std::f64::consts::PI;

fn cam() -> Camera {
    Camera::new(500.0, 480.0, 320.0, 240.0, 640, 480).unwrap()
}

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-r..r).prop_map(Vector3::from)
}

fn rotvec(max_angle: f64) -> impl Strategy<Value = Vector3<f64>> {
    (prop::array::uniform3(-1.0..1.0f64), 0.0..max_angle).prop_filter_map("nonzero axis", |(a, ang)| {
        let a = Vector3::from(a);
        (a.norm() > 1e-3).then(|| a.normalize() * ang)
    })
}

fn pose_strategy() -> impl Strategy<Value = Pose> {
    (rotvec(PI - 1e-3), vec3(2.0)).prop_map(|(w, t)| Pose::new(so3_exp(&w), t))
}

fn tangent(max_rot: f64, max_t: f64) -> impl Strategy<Value = Tangent> {
    (vec3(max_t), rotvec(max_rot)).prop_map(|(v, w)| Tangent::from_parts(v, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn se3_round_trip(d in tangent(PI - 1e-3, 5.0)) {
        let back = se3_log(&se3_exp(&d));
        prop_assert!((back.0 - d.0).norm() < 1e-9, "{:?} vs {:?}", back.0, d.0);
    }

    #[test]
    fn group_action_is_consistent(p in pose_strategy(), d in tangent(PI - 1e-3, 2.0), x in vec3(5.0)) {
        let a = transform(&left_update(&p, &d), &x);
        let b = transform(&se3_exp(&d), &transform(&p, &x));
        prop_assert!((a - b).norm() < 1e-10);
    }

    #[test]
    fn update_then_undo(p in pose_strategy(), d in tangent(1.0, 1.0)) {
        let back = left_update(&left_update(&p, &d), &-d);
        prop_assert!(back.rotation.angle_to(&p.rotation) < 1e-9);
        prop_assert!((back.translation - p.translation).norm() < 1e-9);
    }

    #[test]
    fn so3_round_trip_small(w in rotvec(1.0)) {
        prop_assert!((so3_log(&so3_exp(&w)) - w).norm() < 1e-10);
    }

    #[test]
    fn exp_stays_on_the_group(w in rotvec(10.0)) {
        let r = so3_exp(&w);
        prop_assert!(r.orthogonality_error() < 1e-9);
        prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn projection_jacobian_matches_central_differences(x in vec3(1.0), z in 0.5..5.0f64) {
        let pc = Vector3::new(x.x, x.y, z);
        let j = projection_jacobian(&cam(), &pc).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let fd = (project(&cam(), &(pc + e)).unwrap() - project(&cam(), &(pc - e)).unwrap()) / (2.0 * h);
            for r in 0..2 {
                let (a, n) = (j[(r, k)], fd[r]);
                prop_assert!((a - n).abs() <= 1e-5 * a.abs().max(n.abs()) + 1e-7, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn pose_point_jacobian_matches_central_differences(p in pose_strategy(), x in vec3(1.0), z in 1.0..6.0f64) {
        // place the point in front of the camera
        let pc = Vector3::new(x.x, x.y, z);
        let world = p.inverse().rotation.matrix() * pc + p.inverse().translation;
        let j = pose_point_jacobian(&cam(), &p, &world).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut e = Vector6::zeros();
            e[k] = h;
            let f = |d: Vector6<f64>| project(&cam(), &transform(&left_update(&p, &Tangent(d)), &world)).unwrap();
            let fd = (f(e) - f(-e)) / (2.0 * h);
            for r in 0..2 {
                let (a, n) = (j[(r, k)], fd[r]);
                prop_assert!((a - n).abs() <= 1e-5 * a.abs().max(n.abs()) + 1e-6, "col {k}: {a} vs {n}");
            }
        }
    }
}

#[test]
fn log_round_trip_example() {
    let w = Vector3::new(0.1, -0.2, 0.05);
    assert!((so3_log(&so3_exp(&w)) - w).norm() < 1e-10);
    let w = Vector3::new(0.3, 0.0, 0.0);
    assert!((so3_log(&so3_exp(&w)) - w).norm() < 1e-10);
}

#[test]
fn se3_round_trip_small_angle_large_translation() {
    for angle in [1e-9, 1e-6, 1e-4, 1.5e-4, 1e-3, 9.9e-3, 1e-2, 1.01e-2, 0.1] {
        let w = Vector3::new(0.3, -0.8, 0.52).normalize() * angle;
        let d = Tangent::from_parts(Vector3::new(4.9, -3.7, 2.5), w);
        let back = se3_log(&se3_exp(&d));
        assert!((back.0 - d.0).norm() < 1e-12, "angle {angle}: {}", (back.0 - d.0).norm());
    }
}

#[test]
fn log_near_pi_keeps_axis() {
    for eps in [1e-3, 1e-6, 1e-9] {
        let w = Vector3::new(1.0, 2.0, -2.0).normalize() * (PI - eps);
        let back = so3_log(&so3_exp(&w));
        // axis defined up to sign at π exactly; away from it it is unique
        assert!((back - w).norm() < 1e-6 || (back + w).norm() < 1e-6, "{back:?}");
        assert!(back.norm() <= PI + 1e-12);
    }
}

#[test]
fn chained_updates_stay_orthonormal() {
    let mut p = Pose::identity();
    let d = Tangent::from_parts(Vector3::new(0.01, -0.02, 0.03), Vector3::new(0.123, -0.045, 0.067));
    for _ in 0..10_000 {
        p = left_update(&p, &d);
    }
    assert!(p.rotation.orthogonality_error() < 1e-9);
    assert!((p.rotation.matrix().determinant() - 1.0).abs() < 1e-9);
}

#[test]
fn optical_axis_roll_column_vanishes() {
    let c = Camera::new(300.0, 300.0, 0.0, 0.0, 100, 100).unwrap();
    let j = pose_point_jacobian(&c, &Pose::identity(), &Vector3::new(0.0, 0.0, 4.0)).unwrap();
    assert_relative_eq!(j[(0, 5)], 0.0);
    assert_relative_eq!(j[(1, 5)], 0.0);
    assert_relative_eq!(j[(0, 0)], 300.0 / 4.0);
}

#[test]
fn behind_camera_is_an_error() {
    let c = cam();
    assert!(matches!(project(&c, &Vector3::new(0.0, 0.0, 1e-5)), Err(GeometryError::BehindCamera { .. })));
    assert!(pose_point_jacobian(&c, &Pose::identity(), &Vector3::new(0.0, 0.0, -1.0)).is_err());
}

#[test]
fn pose_json_round_trip_and_normalization() {
    let p = Pose::new(so3_exp(&Vector3::new(0.3, -1.2, 2.0)), Vector3::new(1.0, 2.0, 3.0));
    let s = serde_json::to_string(&p).unwrap();
    let back: Pose = serde_json::from_str(&s).unwrap();
    assert!(back.rotation.angle_to(&p.rotation) < 1e-12);
    assert_eq!(back.translation, p.translation);
    // slightly off-unit quaternions are normalized, far-off ones rejected
    let ok: Pose = serde_json::from_str(r#"{"q": [1.0005, 0, 0, 0], "t": [0, 0, 0]}"#).unwrap();
    assert!(ok.rotation.angle_to(&Rotation::identity()) < 1e-12);
    assert!(serde_json::from_str::<Pose>(r#"{"q": [1.01, 0, 0, 0], "t": [0, 0, 0]}"#).is_err());
}

#[test]
fn rotation_rejects_reflections() {
    let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
    assert!(Rotation::new(m).is_err());
}
