//! Pose algebra against a 4×4 homogeneous-matrix oracle.

use dvgt::geo3d::{quat_geodesic_deg, CameraModel, EgoPose, Quat};
use nalgebra::{Matrix4, Vector4};
use proptest::prelude::*;

fn matrix(p: &EgoPose) -> Matrix4<f64> {
    let r = p.rotation();
    let mut m = Matrix4::identity();
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = r[i][j];
        }
        m[(i, 3)] = p.t[i];
    }
    m
}

fn pose_strategy() -> impl Strategy<Value = EgoPose> {
    (prop::array::uniform4(-1.0f64..1.0), prop::array::uniform3(-20.0f64..20.0))
        .prop_filter("non-degenerate quaternion", |(q, _)| q.iter().map(|v| v * v).sum::<f64>() > 0.05)
        .prop_map(|(q, t)| EgoPose::from_parts(t, Quat::new(q[0], q[1], q[2], q[3])))
}

fn assert_mat_close(a: &Matrix4<f64>, b: &Matrix4<f64>, tol: f64) {
    let d = (a - b).abs().max();
    assert!(d < tol, "matrices differ by {d}\n{a}\n{b}");
}

proptest! {
    #[test]
    fn compose_matches_matrix_product(a in pose_strategy(), b in pose_strategy()) {
        assert_mat_close(&matrix(&a.compose(&b)), &(matrix(&a) * matrix(&b)), 1e-9);
    }

    #[test]
    fn inverse_round_trip(p in pose_strategy()) {
        let id = p.compose(&p.inverse());
        assert_mat_close(&matrix(&id), &Matrix4::identity(), 1e-9);
        assert_mat_close(&matrix(&p.inverse()), &matrix(&p).try_inverse().unwrap(), 1e-9);
    }

    #[test]
    fn compose_is_associative(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
        let l = a.compose(&b).compose(&c);
        let r = a.compose(&b.compose(&c));
        assert_mat_close(&matrix(&l), &matrix(&r), 1e-9);
    }

    #[test]
    fn transform_points_matches_matrix(p in pose_strategy(), x in prop::array::uniform3(-50.0f64..50.0)) {
        let got = p.transform_point(x);
        let want = matrix(&p) * Vector4::new(x[0], x[1], x[2], 1.0);
        for i in 0..3 {
            prop_assert!((got[i] - want[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn matrix_round_trip_preserves_quaternion(p in pose_strategy()) {
        let back = Quat::from_matrix(&p.rotation());
        let q = p.q();
        for (a, b) in back.as_array().iter().zip(q.as_array()) {
            prop_assert!((a - b).abs() < 1e-9, "{back:?} vs {q:?}");
        }
    }

    #[test]
    fn geodesic_symmetric_and_triangle(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
        let (qa, qb, qc) = (a.q(), b.q(), c.q());
        let ab = quat_geodesic_deg(&qa, &qb);
        prop_assert!((ab - quat_geodesic_deg(&qb, &qa)).abs() < 1e-12);
        prop_assert!((0.0..=180.0).contains(&ab));
        prop_assert!(quat_geodesic_deg(&qa, &qc) <= ab + quat_geodesic_deg(&qb, &qc) + 1e-6);
    }

    #[test]
    fn unproject_inverts_project(u in 0.0f64..48.0, v in 0.0f64..32.0, depth in 0.1f64..200.0) {
        let cam = CameraModel::new(30.0, 31.0, 24.5, 15.5, 48, 32, EgoPose::IDENTITY).unwrap();
        let x = cam.unproject(u, v, depth).unwrap();
        let (pu, pv) = cam.project(x).unwrap();
        let back = cam.unproject(pu, pv, x[2]).unwrap();
        for i in 0..3 {
            prop_assert!((back[i] - x[i]).abs() < 1e-9);
        }
    }
}

#[test]
fn identity_and_translation_transforms() {
    let pts = vec![[1.0, 2.0, 3.0], [-4.0, 0.5, 9.0]];
    assert_eq!(EgoPose::IDENTITY.transform_points(&pts), pts);
    let moved = EgoPose::translation([1.0, -1.0, 0.5]).transform_points(&pts);
    assert_eq!(moved, vec![[2.0, 1.0, 3.5], [-3.0, -0.5, 9.5]]);
}
