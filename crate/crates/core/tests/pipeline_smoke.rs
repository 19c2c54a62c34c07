use unitsep_core::pipeline::{ExperimentConfig, SYSTEMS};
use unitsep_core::{Error, Execution};

fn smoke(dir: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset("smoke").unwrap();
    c.output_dir = Some(dir.to_path_buf());
    c
}

#[test]
fn smoke_preset_runs_end_to_end_and_reuses_finished_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let config = smoke(tmp.path());
    let first = unitsep_core::pipeline::run_experiment(&config, Execution::default()).unwrap();
    let systems: Vec<&str> = first.table.iter().map(|r| r.system.as_str()).collect();
    assert_eq!(systems, SYSTEMS);
    assert!(first.reused.is_empty());
    for f in ["report/table3.csv", "report/table4.csv", "report/summary.txt", "metrics/reports.jsonl", "codebook.cb"] {
        assert!(tmp.path().join(f).is_file(), "{f} missing");
    }
    assert!(!tmp.path().join("report/overlap_ratio.svg").exists());
    let oracle = first.table.iter().find(|r| r.system == "oracle").unwrap();
    assert_eq!(oracle.unit_accuracy.unwrap().mean, 1.0);

    let second = unitsep_core::pipeline::run_experiment(&config, Execution::default()).unwrap();
    assert_eq!(second.reused, ["codebook", "quantize", "asr", "refiner", "evaluate"]);
    assert_eq!(second.table, first.table);

    // a changed refiner config reruns the refiner and evaluation only
    let mut changed = config.clone();
    changed.refiner.train.steps = 4;
    let third = unitsep_core::pipeline::run_experiment(&changed, Execution::default()).unwrap();
    assert_eq!(third.reused, ["codebook", "quantize", "asr"]);
}

#[test]
fn separate_directories_with_equal_seeds_agree() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = unitsep_core::pipeline::run_experiment(&smoke(a.path()), Execution::Parallel).unwrap();
    let rb = unitsep_core::pipeline::run_experiment(&smoke(b.path()), Execution::Sequential).unwrap();
    assert_eq!(ra.table, rb.table);
}

#[test]
fn oracle_only_skips_the_learned_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = smoke(tmp.path());
    config.oracle_only = true;
    config.plots = true;
    let out = unitsep_core::pipeline::run_experiment(&config, Execution::default()).unwrap();
    let systems: Vec<&str> = out.table.iter().map(|r| r.system.as_str()).collect();
    assert_eq!(systems, ["mixture", "oracle"]);
    assert!(!tmp.path().join("checkpoints/asr.ckpt").exists());
    assert!(tmp.path().join("report/overlap_ratio.svg").is_file());
}

#[test]
fn locked_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let _held = unitsep_core::pipeline::lock_dir(tmp.path()).unwrap();
    let err = unitsep_core::pipeline::run_experiment(&smoke(tmp.path()), Execution::default()).unwrap_err();
    assert!(matches!(err, Error::Locked(_)));
}

#[test]
fn stage_failures_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = smoke(tmp.path());
    config.discretizer.units = 100_000;
    let err = unitsep_core::pipeline::run_experiment(&config, Execution::default()).unwrap_err();
    match err {
        Error::Stage { stage, .. } => assert_eq!(stage, "codebook"),
        other => panic!("unexpected error {other}"),
    }
}
