use nalgebra::{Unit, UnitQuaternion};
use proptest::prelude::*;

use posefuse::geometry::{CameraIntrinsics, CameraPose, PoseSet, Sim3, Vec3};
use posefuse::metrics::registration_error;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = UnitQuaternion<f64>> {
    (vec3(1.0), -3.1..3.1f64).prop_filter_map("axis", |(axis, angle)| {
        Unit::try_new(axis, 1e-3).map(|a| UnitQuaternion::from_axis_angle(&a, angle))
    })
}

fn sim3() -> impl Strategy<Value = Sim3> {
    ((0.2..5.0f64), rotation(), vec3(3.0)).prop_map(|(s, r, t)| Sim3::new(s, r, t))
}

fn poses() -> impl Strategy<Value = PoseSet> {
    prop::collection::vec(vec3(4.0), 2..6).prop_map(|centers| {
        let intr = CameraIntrinsics::centered(50.0, 32, 32);
        let cams = centers
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let c = c + Vec3::new(0.0, 0.0, 5.0);
                CameraPose::look_at(format!("c{i}"), c, Vec3::zeros(), Vec3::z(), intr)
            })
            .collect();
        PoseSet::new("p", cams).unwrap()
    })
}

fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
    (a - b).norm() <= tol * (1.0 + a.norm().max(b.norm()))
}

proptest! {
    #[test]
    fn composition_is_associative(a in sim3(), b in sim3(), c in sim3(), p in vec3(2.0)) {
        let lhs = a.compose(&b).compose(&c).transform_point(&p);
        let rhs = a.compose(&b.compose(&c)).transform_point(&p);
        prop_assert!(close(&lhs, &rhs, 1e-9));
    }

    #[test]
    fn composition_applies_right_operand_first(a in sim3(), b in sim3(), p in vec3(2.0)) {
        let lhs = a.compose(&b).transform_point(&p);
        let rhs = a.transform_point(&b.transform_point(&p));
        prop_assert!(close(&lhs, &rhs, 1e-9));
    }

    #[test]
    fn inverse_and_identity_laws(a in sim3(), p in vec3(2.0)) {
        prop_assert!(close(&a.compose(&a.inverse()).transform_point(&p), &p, 1e-9));
        prop_assert!(close(&a.inverse().compose(&a).transform_point(&p), &p, 1e-9));
        prop_assert!(close(&Sim3::identity().compose(&a).transform_point(&p), &a.transform_point(&p), 1e-12));
    }

    #[test]
    fn moved_pose_keeps_its_view_of_moved_points(a in sim3(), p in vec3(1.0)) {
        let cam = CameraPose::look_at("c", Vec3::new(0.5, -4.0, 2.0), Vec3::zeros(), Vec3::z(), CameraIntrinsics::centered(50.0, 32, 32));
        let moved = a.apply_pose(&cam);
        let before = cam.to_camera(&p);
        let after = moved.to_camera(&a.transform_point(&p)) / a.scale;
        prop_assert!(close(&before, &after, 1e-9));
    }

    #[test]
    fn registration_error_ignores_shared_rigid_motion(set in poses(), r in rotation(), t in vec3(3.0), noise in sim3()) {
        let g = Sim3::rigid(r, t);
        let est = set.transformed(&Sim3::new(1.0 + 0.01 * (noise.scale - 1.0), noise.rotation.powf(0.01), noise.translation * 0.01));
        let before = registration_error(&est, &set).unwrap();
        let after = registration_error(&est.transformed(&g), &set.transformed(&g)).unwrap();
        prop_assert!((before.dtheta_x - after.dtheta_x).abs() < 1e-6);
        prop_assert!((before.dtheta_y - after.dtheta_y).abs() < 1e-6);
        prop_assert!((before.dtheta_z - after.dtheta_z).abs() < 1e-6);
        prop_assert!((before.dp - after.dp).abs() < 1e-9 * (1.0 + before.dp));
    }
}
