//! Task-free and task-aware inference, the accuracy matrix, overall accuracy
//! and forgetting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{CvtError, Result};
use crate::model::CvtModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Prediction over every class seen so far.
    TaskFree,
    /// Prediction restricted to the evaluated task's classes.
    TaskAware,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::TaskFree, Protocol::TaskAware];

    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::TaskFree => "task_free",
            Protocol::TaskAware => "task_aware",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = CvtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task_free" => Ok(Protocol::TaskFree),
            "task_aware" => Ok(Protocol::TaskAware),
            _ => Err(CvtError::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

/// Index of the largest logit among `candidates` (first one wins ties).
pub fn argmax_over(logits: &[f64], candidates: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for &c in candidates {
        if best.is_none_or(|b| logits[c] > logits[b]) {
            best = Some(c);
        }
    }
    best
}

/// Percentage of rows whose masked argmax equals the label.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize], candidates: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(CvtError::Empty("test set".into()));
    }
    if logits.rows() != labels.len() {
        return Err(CvtError::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if let Some(&c) = candidates.iter().find(|&&c| c >= logits.cols()) {
        return Err(CvtError::Shape(format!("candidate class {c} beyond {} logits", logits.cols())));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax_over(logits.row(i), candidates) == Some(y))
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Accumulation-head logits for a set of images, computed in inference mode
/// in chunks.
pub fn accumulation_logits(model: &mut CvtModel, images: &ImageBatch) -> Result<Tensor> {
    const CHUNK: usize = 250;
    let classes = model.config().num_classes;
    let mut data = Vec::with_capacity(images.len() * classes);
    let mut start = 0;
    while start < images.len() {
        let end = (start + CHUNK).min(images.len());
        let mut chunk = ImageBatch::new(images.channels, images.height, images.width);
        for i in start..end {
            chunk.push(images.image(i));
        }
        let out = model.predict(&chunk.to_tensor())?;
        data.extend_from_slice(out.logits_accumulation.data());
        start = end;
    }
    Tensor::from_vec(&[images.len(), classes], data)
}

/// Accuracy (percent) of the accumulation head on one task's test set.
/// Task-free prediction ranges over `seen_classes`; task-aware over
/// `task_classes`.
pub fn evaluate_task(
    model: &mut CvtModel,
    images: &ImageBatch,
    labels: &[usize],
    protocol: Protocol,
    task_classes: &[usize],
    seen_classes: &[usize],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(CvtError::Empty("test set".into()));
    }
    let logits = accumulation_logits(model, images)?;
    let candidates = match protocol {
        Protocol::TaskFree => seen_classes,
        Protocol::TaskAware => task_classes,
    };
    accuracy_from_logits(&logits, labels, candidates)
}

/// Lower-triangular grid: `rows[i][t]` is the accuracy on task `t` after
/// training through task `i` (both 0-based here), defined for `t <= i`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMetrics {
    /// 1-based task index.
    pub task: usize,
    #[serde(rename = "A_i")]
    pub accuracy: f64,
    /// Absent after the first task.
    #[serde(rename = "F_i")]
    pub forgetting: Option<f64>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the row for the next completed task; it must hold exactly one
    /// entry per task seen so far, each in `[0, 100]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(CvtError::Shape(format!(
                "row {} needs {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(CvtError::Precondition(format!("accuracy {v} outside [0, 100]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `a_{i,t}` with 1-based indices; `None` when undefined (`t > i`).
    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        if i == 0 || t == 0 || t > i {
            return None;
        }
        self.rows.get(i - 1).map(|r| r[t - 1])
    }

    /// Mean of the last row.
    pub fn overall_accuracy(&self) -> Result<f64> {
        let last = self
            .rows
            .last()
            .ok_or_else(|| CvtError::Empty("accuracy matrix has no rows".into()))?;
        Ok(last.iter().sum::<f64>() / last.len() as f64)
    }

    /// Average over earlier tasks of the largest drop from any earlier
    /// measurement to the final one; `None` for fewer than two tasks.
    pub fn forgetting(&self) -> Option<f64> {
        let big_t = self.rows.len();
        if big_t < 2 {
            return None;
        }
        let last = &self.rows[big_t - 1];
        let total: f64 = (0..big_t - 1)
            .map(|t| {
                (t..big_t - 1)
                    .map(|i| self.rows[i][t] - last[t])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum();
        Some(total / (big_t - 1) as f64)
    }

    /// The matrix restricted to the first `tasks` rows.
    pub fn truncated(&self, tasks: usize) -> Self {
        Self {
            rows: self.rows[..tasks.min(self.rows.len())].to_vec(),
        }
    }

    /// `A_i` and `F_i` after every boundary, each computed from rows `<= i` only.
    pub fn per_boundary(&self) -> Vec<BoundaryMetrics> {
        (1..=self.rows.len())
            .map(|i| {
                let m = self.truncated(i);
                BoundaryMetrics {
                    task: i,
                    accuracy: m.overall_accuracy().expect("non-empty"),
                    forgetting: m.forgetting(),
                }
            })
            .collect()
    }

    /// CSV with one line per row; undefined entries are left blank.
    pub fn to_csv(&self) -> String {
        let n = self.rows.len();
        let mut out = String::from("after_task");
        for t in 1..=n {
            out.push_str(&format!(",task_{t}"));
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&(i + 1).to_string());
            for t in 0..n {
                out.push(',');
                if let Some(v) = row.get(t) {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Results of one protocol for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResults {
    pub protocol: Protocol,
    pub seed: u64,
    pub accuracy_matrix: AccuracyMatrix,
    pub overall_accuracy: f64,
    pub forgetting: Option<f64>,
    pub per_boundary: Vec<BoundaryMetrics>,
}

impl ProtocolResults {
    pub fn from_matrix(protocol: Protocol, seed: u64, matrix: AccuracyMatrix) -> Result<Self> {
        Ok(Self {
            protocol,
            seed,
            overall_accuracy: matrix.overall_accuracy()?,
            forgetting: matrix.forgetting(),
            per_boundary: matrix.per_boundary(),
            accuracy_matrix: matrix,
        })
    }
}
