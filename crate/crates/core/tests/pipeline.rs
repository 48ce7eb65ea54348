//! End-to-end library paths: synthesis → training → checkpoints → scoring.

use structpose::checkpoint::Checkpoint;
use structpose::config::TrainConfig;
use structpose::data::PoseDataset;
use structpose::evaluation::{evaluate_lift, evaluate_pose};
use structpose::lifting3d::{load_lifter, save_lifter, train_lifter, PairedData};
use structpose::synthdata::{generate_dataset, generate_pairs, write_dataset, SkeletonSpec, SynthConfig};
use structpose::training::{predict_landmarks, resume_loop, train_loop, LoopOptions, TrainState, load_generator};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        input_size: 32,
        width: 8,
        disc_width: 8,
        batch_size: 8,
        epochs: 2,
        seed: 4,
        ..Default::default()
    }
}

fn datasets(cfg: &TrainConfig) -> (PoseDataset, PoseDataset) {
    let spec = SkeletonSpec::mpii16();
    let synth = SynthConfig { seed: 21, ..Default::default() };
    let tr = generate_dataset(&spec, &synth, 24, 0).unwrap();
    let va = generate_dataset(&spec, &synth, 8, 500).unwrap();
    (
        PoseDataset::from_samples(&tr, &synth, cfg, &spec).unwrap(),
        PoseDataset::from_samples(&va, &synth, cfg, &spec).unwrap(),
    )
}

fn same_bits(a: &TrainState, b: &TrainState) -> bool {
    a.generator
        .params
        .iter()
        .zip(b.generator.params.iter())
        .all(|(x, y)| x.1.data().iter().zip(y.1.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let cfg = small_cfg();
    let (tr, va) = datasets(&cfg);
    let opts = LoopOptions::default();
    let full = train_loop(&cfg, &tr, Some(&va), &opts).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.spck");
    let half = train_loop(&TrainConfig { epochs: 1, ..cfg.clone() }, &tr, Some(&va), &opts).unwrap();
    half.to_checkpoint().save(&path).unwrap();
    let mut st = TrainState::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    st.cfg.epochs = 2;
    let resumed = resume_loop(st, &tr, Some(&va), &opts).unwrap();

    assert_eq!(full.history, resumed.history);
    assert!(same_bits(&full, &resumed));
}

#[test]
fn training_writes_loadable_models_and_history() {
    let cfg = small_cfg();
    let (tr, va) = datasets(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let opts = LoopOptions {
        out_dir: Some(dir.path().to_path_buf()),
        verbose: false,
    };
    let st = train_loop(&cfg, &tr, Some(&va), &opts).unwrap();
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + st.history.len());
    let (model, loaded_cfg) = load_generator(&dir.path().join("model.spck")).unwrap();
    assert_eq!(loaded_cfg, cfg);
    let a = predict_landmarks(&model, &va).unwrap();
    let b = predict_landmarks(&st.best_generator(), &va).unwrap();
    assert_eq!(a, b);
    let r = evaluate_pose(&a, &va, Some(&SkeletonSpec::mpii16())).unwrap();
    assert!((0.0..=1.0).contains(&r.pck.mean));
}

#[test]
fn datasets_survive_a_disk_round_trip() {
    let spec = SkeletonSpec::mpii16();
    let synth = SynthConfig { seed: 2, ..Default::default() };
    let cfg = small_cfg();
    let samples = generate_dataset(&spec, &synth, 6, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &samples, &spec, &synth).unwrap();
    let disk = PoseDataset::load_dir(dir.path(), &cfg).unwrap();
    let mem = PoseDataset::from_samples(&samples, &synth, &cfg, &spec).unwrap();
    assert_eq!(disk.len(), mem.len());
    for (a, b) in disk.examples().iter().zip(mem.examples()) {
        assert_eq!(a.landmarks, b.landmarks);
        assert_eq!(a.pose, b.pose);
    }
}

#[test]
fn lifter_round_trips_through_disk() {
    let spec = SkeletonSpec::mpii16();
    let cfg = TrainConfig {
        joints: spec.joints(),
        epochs: 2,
        lifter_width: 16,
        disc3d_width: 16,
        seed: 1,
        ..Default::default()
    };
    let tr = PairedData::new(&generate_pairs(&spec, 64, 0.3, 1), &spec, cfg.input_noise, 1).unwrap();
    let te = PairedData::new(&generate_pairs(&spec, 16, 0.3, 2), &spec, 0.0, 2).unwrap();
    let out = train_lifter(&cfg, &spec, &tr, Some(&te), true, false).unwrap();
    assert_eq!(out.history.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lifter.spck");
    save_lifter(&out.model, &cfg, &spec, &path).unwrap();
    let (model, c, s) = load_lifter(&path).unwrap();
    assert_eq!((c, s), (cfg, spec.clone()));
    let a = out.model.lift_batch(&te.poses2d).unwrap();
    let b = model.lift_batch(&te.poses2d).unwrap();
    assert_eq!(a, b);
    let r = evaluate_lift(&a, &te, &spec).unwrap();
    assert!(r.protocol2.mean <= r.protocol1.mean + 1e-9);
}
