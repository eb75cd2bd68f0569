//! End-to-end runs through the library entry point.

mod common;

use cvt_core::evaluation::Protocol;
use cvt_core::trainer::Method;
use cvt_experiment::runner::{run_dir, SUMMARY_FILE};
use cvt_experiment::{run_experiment, ExperimentConfig};

fn tiny(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg: ExperimentConfig = toml::from_str(common::TINY).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&tiny(a.path())).unwrap();
    run_experiment(&tiny(b.path())).unwrap();
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), SUMMARY_FILE), read(b.path(), SUMMARY_FILE));
    let run = |d: &std::path::Path| run_dir(d, Method::Cvt, 0);
    for t in 1..=5 {
        let f = format!("checkpoints/task_{t}.tar");
        assert_eq!(read(&run(a.path()), &f), read(&run(b.path()), &f));
    }
    assert_eq!(
        read(&run(a.path()), "training_log.jsonl"),
        read(&run(b.path()), "training_log.jsonl")
    );
}

#[test]
fn ablations_share_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.methods = vec![Method::CvtNoFc, Method::ErBaseline];
    cfg.save_checkpoints = false;
    let summary = run_experiment(&cfg).unwrap();
    assert_eq!(summary.methods.len(), 2);
    let manifest = |m| std::fs::read(run_dir(dir.path(), m, 0).join("split_manifest.json")).unwrap();
    assert_eq!(manifest(Method::CvtNoFc), manifest(Method::ErBaseline));
    assert!(!run_dir(dir.path(), Method::ErBaseline, 0).join("checkpoints").exists());
}

#[test]
fn sgd_baseline_is_far_better_with_task_identity() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.methods = vec![Method::SgdBaseline];
    cfg.synthetic.train_per_class = 60;
    let summary = run_experiment(&cfg).unwrap();
    let m = summary.method(Method::SgdBaseline).unwrap();
    let free = m.protocol(Protocol::TaskFree).unwrap().overall_accuracy.mean;
    let aware = m.protocol(Protocol::TaskAware).unwrap().overall_accuracy.mean;
    assert!(aware - free >= 20.0, "task-free {free}, task-aware {aware}");
    let results: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run_dir(dir.path(), Method::SgdBaseline, 0).join("results.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(results["examples_seen"], 600);
    assert_eq!(results["steps"], 60);
    assert_eq!(results["config"]["methods"][0], "sgd_baseline");
}
