//! Multi-seed, multi-method experiment orchestration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cvt_core::data::{make_task_splits, stream_batches, Dataset, ImageBatch, SplitManifest};
use cvt_core::evaluation::{accumulation_logits, accuracy_from_logits, AccuracyMatrix, Protocol, ProtocolResults};
use cvt_core::model::CvtModel;
use cvt_core::trainer::{run_stream, Learner, Method, RunOutput};

use crate::config::ExperimentConfig;
use crate::error::ExperimentError;
use crate::summary::{MethodSummary, RunResult, Summary};

pub const SUMMARY_FILE: &str = "summary.json";

/// Directory holding one run's files.
pub fn run_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(method.as_str()).join(format!("seed_{seed}"))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Loads the dataset named by the config and checks it fits the model.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    let dataset = Dataset::load(&cfg.dataset, cfg.synthetic)?;
    let m = &cfg.model;
    if dataset.num_classes() != m.num_classes
        || dataset.channels != m.in_channels
        || dataset.height != m.image_size
        || dataset.width != m.image_size
    {
        return Err(ExperimentError::Config(format!(
            "dataset has {} classes of {}x{}x{} images, model expects {} of {}x{}x{}",
            dataset.num_classes(),
            dataset.channels,
            dataset.height,
            dataset.width,
            m.num_classes,
            m.in_channels,
            m.image_size,
            m.image_size
        )));
    }
    Ok(dataset)
}

/// Trains one method with one seed, evaluating every protocol at each task
/// boundary, and writes the run's files under `dir`.
pub fn run_one(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    method: Method,
    seed: u64,
    dir: &Path,
) -> Result<RunResult, ExperimentError> {
    fs::create_dir_all(dir)?;
    let split = make_task_splits(dataset, cfg.num_tasks, seed)?;
    write_json(&dir.join("split_manifest.json"), &SplitManifest::from_split(&split))?;
    let model = CvtModel::new(cfg.model.clone(), seed)?;
    let parameters = model.count_parameters();
    let mut learner = Learner::new(model, cfg.train_config(seed, method))?;
    let tests: Vec<(ImageBatch, Vec<usize>)> = split.iter().map(|t| dataset.test_set(t)).collect();
    let mut matrices = vec![AccuracyMatrix::new(); cfg.protocols.len()];

    let stream = stream_batches(dataset, &split, cfg.train.stream_batch_size, seed)?;
    let outcome = run_stream(&mut learner, stream, |learner, task_id| {
        let seen: Vec<usize> = split[..task_id].iter().flat_map(|t| t.class_ids.iter().copied()).collect();
        let mut rows = vec![Vec::with_capacity(task_id); cfg.protocols.len()];
        for (task, (images, labels)) in split[..task_id].iter().zip(&tests) {
            let logits = accumulation_logits(&mut learner.model, images)?;
            for (row, protocol) in rows.iter_mut().zip(&cfg.protocols) {
                let candidates = match protocol {
                    Protocol::TaskFree => &seen,
                    Protocol::TaskAware => &task.class_ids,
                };
                row.push(accuracy_from_logits(&logits, labels, candidates)?);
            }
        }
        for (m, row) in matrices.iter_mut().zip(rows) {
            m.push_row(row)?;
        }
        Ok(())
    });
    let (output, abort) = match outcome {
        Ok(out) => (out, None),
        Err(abort) => (abort.partial, Some(abort.error)),
    };
    write_outputs(cfg, dir, &output)?;

    let mut results = Vec::new();
    for (protocol, matrix) in cfg.protocols.iter().zip(matrices) {
        if matrix.tasks() == 0 {
            continue;
        }
        fs::write(dir.join(format!("accuracy_{protocol}.csv")), matrix.to_csv())?;
        results.push(ProtocolResults::from_matrix(*protocol, seed, matrix)?);
    }
    let run = RunResult {
        method,
        seed,
        parameters,
        steps: output.log.len(),
        examples_seen: output.examples_seen,
        results,
        aborted: abort.as_ref().map(|e| e.to_string()),
        config: cfg.clone(),
    };
    write_json(&dir.join("results.json"), &run)?;
    match abort {
        None => Ok(run),
        Some(source) => Err(ExperimentError::Abort {
            method: method.to_string(),
            seed,
            source,
        }),
    }
}

fn write_outputs(cfg: &ExperimentConfig, dir: &Path, output: &RunOutput) -> Result<(), ExperimentError> {
    let mut log = std::io::BufWriter::new(fs::File::create(dir.join("training_log.jsonl"))?);
    for record in &output.log {
        serde_json::to_writer(&mut log, record)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    if cfg.save_checkpoints {
        let ckpt = dir.join("checkpoints");
        fs::create_dir_all(&ckpt)?;
        for c in &output.checkpoints {
            fs::write(ckpt.join(format!("task_{}.tar", c.task_id)), &c.bytes)?;
        }
    }
    Ok(())
}

/// Runs every configured method for every seed, then writes the aggregated
/// `summary.json` to the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary, ExperimentError> {
    run_experiment_with_progress(cfg, |_| {})
}

/// As [`run_experiment`], reporting each finished run.
pub fn run_experiment_with_progress(
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(&RunResult),
) -> Result<Summary, ExperimentError> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    write_json(&out.join("resolved_config.json"), cfg)?;
    let mut methods = Vec::new();
    for &method in &cfg.methods {
        let mut runs = Vec::new();
        for &seed in &cfg.seeds {
            let run = run_one(cfg, &dataset, method, seed, &run_dir(out, method, seed))?;
            progress(&run);
            runs.push(run);
        }
        methods.extend(MethodSummary::from_runs(&runs));
    }
    let summary = Summary {
        config: cfg.clone(),
        methods,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
