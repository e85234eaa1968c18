mod common;

use std::fs;

use eln_core::checkpoint::Checkpoint;
use eln_core::experiment::{
    ablate, evaluate_run, gen_data, parse_config_str, plot_run, run_stage, stage_hash, EvalReport, RunDir,
};
use eln_core::training::Stage;
use eln_core::Error;

fn all_stages(cfg: &eln_core::experiment::ExperimentConfig, dir: &RunDir) {
    for s in [Stage::Pretrain, Stage::Stage1, Stage::Stage2] {
        run_stage(cfg, 0, dir, s).unwrap();
    }
}

#[test]
fn stage2_without_stage1_is_a_prerequisite_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_experiment(tmp.path());
    let dir = RunDir::new(tmp.path().join("run"));
    run_stage(&cfg, 0, &dir, Stage::Pretrain).unwrap();
    let err = run_stage(&cfg, 0, &dir, Stage::Stage2).unwrap_err();
    assert!(matches!(err, Error::Prerequisite { .. }), "{err}");
    assert!(err.to_string().contains("stage1"), "{err}");
    assert!(matches!(evaluate_run(&cfg, 0, &RunDir::new(tmp.path().join("empty")), None), Err(Error::Prerequisite { .. })));
}

#[test]
fn full_run_writes_the_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_experiment(tmp.path());
    let dir = RunDir::new(tmp.path().join("run"));
    all_stages(&cfg, &dir);
    let report = evaluate_run(&cfg, 0, &dir, None).unwrap();
    assert_eq!(report.stage, Stage::Stage2);
    assert_eq!(report.decoder_ce.len(), 3);
    assert!(report.localization.methods.contains_key("eln"));
    for f in ["config.resolved.json", "provenance.json", "metrics.jsonl", "eval.json"] {
        assert!(dir.root.join(f).is_file(), "{f}");
    }
    let lines = fs::read_to_string(dir.metrics()).unwrap().lines().count();
    assert_eq!(lines, 12);
    let plots = plot_run(&dir).unwrap();
    assert_eq!(plots.len(), 2);
    assert!(plots.iter().all(|p| image::open(p).is_ok()));
}

#[test]
fn completed_stages_are_skipped_and_mismatches_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_experiment(tmp.path());
    let dir = RunDir::new(tmp.path().join("run"));
    run_stage(&cfg, 0, &dir, Stage::Pretrain).unwrap();
    let bytes = fs::read(dir.checkpoint(Stage::Pretrain)).unwrap();
    run_stage(&cfg, 0, &dir, Stage::Pretrain).unwrap();
    assert_eq!(fs::read(dir.checkpoint(Stage::Pretrain)).unwrap(), bytes);
    let mut other = cfg.clone();
    other.stages.pretrain = 5;
    assert!(matches!(run_stage(&other, 0, &dir, Stage::Pretrain), Err(Error::Checkpoint(_))));
}

#[test]
fn resuming_mid_stage_reproduces_the_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_experiment(tmp.path());
    cfg.stages.stage2 = 5;
    let a = RunDir::new(tmp.path().join("a"));
    let b = RunDir::new(tmp.path().join("b"));
    all_stages(&cfg, &a);
    all_stages(&cfg, &b);
    // drop the finished stage so only the step-4 checkpoint remains
    fs::remove_file(b.checkpoint(Stage::Stage2)).unwrap();
    assert_eq!(Checkpoint::load(&b.latest()).unwrap().iteration, 4);
    run_stage(&cfg, 0, &b, Stage::Stage2).unwrap();
    assert_eq!(fs::read(a.metrics()).unwrap(), fs::read(b.metrics()).unwrap());
    assert_eq!(fs::read(a.checkpoint(Stage::Stage2)).unwrap(), fs::read(b.checkpoint(Stage::Stage2)).unwrap());
}

#[test]
fn zero_length_stage2_keeps_the_stage1_model() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_experiment(tmp.path());
    cfg.stages.stage2 = 0;
    let dir = RunDir::new(tmp.path().join("run"));
    all_stages(&cfg, &dir);
    let s1 = Checkpoint::load(&dir.checkpoint(Stage::Stage1)).unwrap();
    let s2 = Checkpoint::load(&dir.checkpoint(Stage::Stage2)).unwrap();
    for (k, v) in s1.tensors.iter().filter(|(k, _)| !k.contains('/')) {
        assert_eq!(s2.tensors[k], *v, "{k}");
    }
}

#[test]
fn ablation_runs_every_variant_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_experiment(tmp.path());
    cfg.seeds = vec![0, 1, 2];
    let summary = ablate(&cfg, tmp.path()).unwrap();
    assert!(summary.failures.is_empty(), "{:?}", summary.failures);
    assert_eq!(summary.rows.len(), 2);
    let mut evals = Vec::new();
    for v in ["method-eln", "mask-none"] {
        for s in 0..3 {
            let p = tmp.path().join(v).join(format!("seed-{s}")).join("eval.json");
            evals.push(serde_json::from_str::<EvalReport>(&fs::read_to_string(&p).unwrap()).unwrap());
        }
    }
    assert_eq!(evals.len(), 6);
    // one shared stage-1 directory per seed
    let shared = fs::read_dir(tmp.path()).unwrap().filter(|e| {
        e.as_ref().unwrap().file_name().to_string_lossy().starts_with("stage1-")
    });
    assert_eq!(shared.count(), 3);
    for (row, chunk) in summary.rows.iter().zip(evals.chunks(3)) {
        let mean = chunk.iter().map(|r| r.segmentation.miou).sum::<f64>() / 3.0;
        assert!((row.miou_mean - mean).abs() < 1e-12);
        assert_eq!(row.seeds, 3);
    }
    let csv = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("variant,seeds,miou_mean,miou_std"));
}

#[test]
fn folder_datasets_train_like_generated_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let base = common::tiny_experiment(tmp.path());
    gen_data(&base, &tmp.path().join("data")).unwrap();
    assert!(tmp.path().join("data/train/manifest.json").is_file());
    let mut cfg = base.clone();
    cfg.data.folder = Some(tmp.path().join("data/train"));
    cfg.data.validation_folder = Some(tmp.path().join("data/validation"));
    let data = eln_core::experiment::prepare_data(&cfg, 0).unwrap();
    assert_eq!(data.split.labeled.len() + data.split.unlabeled.len(), 8);
    assert_eq!(data.validation.len(), 4);
    run_stage(&cfg, 0, &RunDir::new(tmp.path().join("run")), Stage::Pretrain).unwrap();

    let mut missing = cfg.clone();
    missing.data.validation_folder = None;
    assert!(matches!(eln_core::experiment::prepare_data(&missing, 0), Err(Error::Config(_))));
}

#[test]
fn stage_hash_tracks_relevant_settings_only() {
    let cfg = parse_config_str("").unwrap();
    let mut later = cfg.clone();
    later.stages.stage2 = 7;
    assert_eq!(stage_hash(&cfg, 0, Stage::Stage1), stage_hash(&later, 0, Stage::Stage1));
    assert_ne!(stage_hash(&cfg, 0, Stage::Stage2), stage_hash(&later, 0, Stage::Stage2));
}
