use nalgebra::Vector3;
use nrreg_core::geometry::RigidTransform;
use nrreg_core::metrics::{classification_metrics, registration_metrics, summarize, MetricsReport, PointError};
use nrreg_core::nicp::WarpField;
use nrreg_core::synth::{generate_scene, SceneSpec, WarpKind};
use proptest::prelude::*;

fn arb_errors() -> impl Strategy<Value = Vec<PointError>> {
    prop::collection::vec(
        (0.0f64..0.2, prop::option::of(0.0f64..0.6)).prop_map(|(epe, relative)| PointError { epe, relative }),
        1..80,
    )
}

proptest! {
    #[test]
    fn strict_accuracy_never_exceeds_relaxed(errors in arb_errors()) {
        let m = summarize(&errors).unwrap();
        prop_assert!(m.acc_s <= m.acc_r);
        for v in [m.acc_s, m.acc_r, m.outlier_ratio] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn summary_ignores_point_order(errors in arb_errors(), rot in 0usize..80) {
        let mut shuffled = errors.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let (a, b) = (summarize(&errors).unwrap(), summarize(&shuffled).unwrap());
        prop_assert!((a.epe - b.epe).abs() < 1e-12);
        prop_assert_eq!((a.acc_s, a.acc_r, a.outlier_ratio), (b.acc_s, b.acc_r, b.outlier_ratio));
    }

    #[test]
    fn classification_bounds(labels in prop::collection::vec(any::<bool>(), 1..60), mask in prop::collection::vec(any::<bool>(), 60)) {
        let predicted: Vec<usize> = (0..labels.len()).filter(|&i| mask[i]).collect();
        let (p, r) = classification_metrics(&predicted, &labels);
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
        let all: Vec<usize> = (0..labels.len()).collect();
        prop_assert_eq!(classification_metrics(&all, &labels).1, 1.0);
    }
}

#[test]
fn exact_estimate_scores_perfectly() {
    let scene = generate_scene(&SceneSpec::new(200, WarpKind::ArticulatedTwoPart, 3)).unwrap();
    let m = registration_metrics(&scene.source, &scene.gt_warp, &scene.gt_warp).unwrap();
    assert_eq!((m.epe, m.acc_s, m.acc_r, m.outlier_ratio), (0.0, 1.0, 1.0, 0.0));
}

#[test]
fn identity_estimate_error_is_motion_length() {
    let scene = generate_scene(&SceneSpec::new(150, WarpKind::GlobalRigid, 4)).unwrap();
    let id = WarpField::identity(scene.gt_warp.graph.clone());
    let m = registration_metrics(&scene.source, &id, &scene.gt_warp).unwrap();
    let mean_motion = scene
        .source
        .points()
        .iter()
        .map(|p| (scene.gt_warp.warp_point(p) - p).norm())
        .sum::<f64>()
        / 150.0;
    assert!((m.epe - mean_motion).abs() < 1e-12);
    // every point is off by exactly its own motion: relative error 1
    assert_eq!(m.outlier_ratio, 1.0);
}

#[test]
fn pooled_report_weights_by_points() {
    let scene = generate_scene(&SceneSpec::new(100, WarpKind::GlobalRigid, 5)).unwrap();
    let shifted = WarpField::new(
        scene.gt_warp.graph.clone(),
        scene
            .gt_warp
            .transforms
            .iter()
            .map(|t| t.compose(&RigidTransform::from_axis_angle(&Vector3::zeros(), Vector3::new(0.01, 0.0, 0.0))))
            .collect(),
    )
    .unwrap();
    let a = registration_metrics(&scene.source, &scene.gt_warp, &scene.gt_warp).unwrap();
    let b = registration_metrics(&scene.source, &shifted, &scene.gt_warp).unwrap();
    let pooled = MetricsReport::pooled(&[a, b]).unwrap();
    assert!((pooled.epe - 0.5 * (a.epe + b.epe)).abs() < 1e-12);
    assert_eq!(pooled.point_count, 200);
}
