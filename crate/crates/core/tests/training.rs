use nrreg_core::scnet::arch::Architecture;
use nrreg_core::scnet::{GraphParams, ScNetModel};
use nrreg_core::synth::{generate_scene, SceneSpec, WarpKind};
use nrreg_core::training::{gradient_check, loss_log_csv, train, TrainConfig, TrainingSet};

#[test]
fn analytic_gradients_match_differences() {
    for seed in 0..8 {
        let report = gradient_check(seed).unwrap();
        assert!(report.max_relative_error < 1e-4, "seed {seed}: {report:?}");
        assert!(report.loss.is_finite());
    }
}

fn small_set() -> TrainingSet {
    let scenes = (0..4)
        .map(|s| generate_scene(&SceneSpec::new(60, WarpKind::SmoothGraph, 100 + s)).unwrap().corr)
        .collect();
    TrainingSet::new(scenes, GraphParams::default()).unwrap()
}

fn run(data: &TrainingSet, config: &TrainConfig) -> (ScNetModel, String) {
    let mut model = ScNetModel::new(Architecture::micro(16, 1, 1), 3).unwrap();
    let (log, _) = train(&mut model, data, config, |_| {}).unwrap();
    (model, loss_log_csv(&log))
}

#[test]
fn training_is_deterministic() {
    let data = small_set();
    let config = TrainConfig {
        epochs: 3,
        learning_rate: 1e-3,
        augment: true,
        ..TrainConfig::default()
    };
    let (a, log_a) = run(&data, &config);
    let (b, log_b) = run(&data, &config);
    assert_eq!(a.params, b.params);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.lines().count(), 4);
    let (c, _) = run(&data, &TrainConfig { seed: 1, ..config });
    assert_ne!(a.params, c.params);
}

#[test]
fn checkpoint_round_trip_keeps_optimizer_state() {
    let data = small_set();
    let mut model = ScNetModel::new(Architecture::micro(16, 1, 1), 5).unwrap();
    let config = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let (_, state) = train(&mut model, &data, &config, |_| {}).unwrap();
    let bytes = model.to_bytes(Some(&state));
    let (loaded, restored) = ScNetModel::load(&bytes, &model.arch).unwrap();
    assert_eq!(restored.as_ref(), Some(&state));
    for (a, b) in model.params.iter().zip(&loaded.params) {
        assert_eq!(*b, *a as f32 as f64);
    }
    assert!(ScNetModel::load(&bytes, &Architecture::micro(8, 1, 1)).is_err());
}
