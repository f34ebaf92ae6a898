use ktraj::datakit::build_dataset;
use ktraj::gradcheck;
use ktraj::par::Exec;
use ktraj::pipeline::Model;
use ktraj::trainer::{
    history_csv, read_history, train_joint, TrainConfig, HISTORY_FILE, LEARNED_TRAJECTORY_FILE,
};

fn tiny() -> TrainConfig {
    let sets: Vec<String> = [
        "epochs=3",
        "warmup_epochs=1",
        "data.grid=16",
        "limits.matrix=16",
        "data.n_train=2",
        "data.n_val=1",
        "data.n_test=1",
        "data.coils=2",
        "trajectory.shots=2",
        "trajectory.samples_per_shot=40",
        "trajectory.n_control=4",
        "field.hidden=4",
        "recon.levels=2",
        "recon.base_channels=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    TrainConfig::resolve(None, &sets).unwrap()
}

#[test]
fn sequential_and_parallel_training_agree_bitwise() {
    let cfg = tiny();
    let data = build_dataset(&cfg.data, cfg.seed).unwrap();
    let a = train_joint(&data, &cfg, None, Exec::Sequential).unwrap();
    let b = train_joint(&data, &cfg, None, Exec::Parallel).unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert_eq!(a.final_model, b.final_model);
}

#[test]
fn training_writes_reloadable_artifacts() {
    let cfg = tiny();
    let data = build_dataset(&cfg.data, cfg.seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train_joint(&data, &cfg, Some(dir.path()), Exec::default()).unwrap();
    assert_eq!(out.history.len(), 2 * cfg.epochs);
    assert!(out.best_epoch >= cfg.warmup_epochs);
    assert!(dir.path().join(LEARNED_TRAJECTORY_FILE).exists());
    let rows = read_history(&dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(history_csv(&rows), history_csv(&out.history));
    assert_eq!(Model::load(dir.path()).unwrap(), out.best_model);
}

#[test]
fn warm_up_epochs_carry_no_penalty() {
    let cfg = tiny();
    let data = build_dataset(&cfg.data, cfg.seed).unwrap();
    let out = train_joint(&data, &cfg, None, Exec::default()).unwrap();
    for r in out.history.iter().filter(|r| r.epoch < cfg.warmup_epochs) {
        assert_eq!(r.loss.total, r.loss.image_loss);
    }
}

#[test]
fn every_gradient_suite_passes() {
    for r in gradcheck::run_all(0).unwrap() {
        assert!(
            r.passed,
            "{} metric {} tol {}",
            r.name, r.metric, r.tolerance
        );
    }
}
