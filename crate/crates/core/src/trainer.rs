//! Single-pass online training: one optimizer step per stream batch, with
//! rehearsal from memory, focus activation and the dual-classifier objective.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{augment_two_views, AugmentConfig, ImageBatch, StreamBatch};
use crate::error::{CvtError, Result};
use crate::graph::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::layers::Mode;
use crate::losses::{accumulation_row_weights, ContrastiveParams, LossWeights, StreamReduction};
use crate::model::CvtModel;
use crate::replay::{MemoryBatch, MemoryBuffer};

/// Named training recipes: the full method, its ablations and two baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cvt,
    CvtNoFc,
    CvtScl,
    CvtNoDual,
    SgdBaseline,
    ErBaseline,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Cvt,
        Method::CvtNoFc,
        Method::CvtScl,
        Method::CvtNoDual,
        Method::SgdBaseline,
        Method::ErBaseline,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Cvt => "cvt",
            Method::CvtNoFc => "cvt_no_fc",
            Method::CvtScl => "cvt_scl",
            Method::CvtNoDual => "cvt_no_dual",
            Method::SgdBaseline => "sgd_baseline",
            Method::ErBaseline => "er_baseline",
        }
    }

    pub fn ablation(&self) -> Ablation {
        let base = Ablation::default();
        match self {
            Method::Cvt => base,
            Method::CvtNoFc => Ablation { no_fc: true, ..base },
            Method::CvtScl => Ablation {
                scl_instead_of_fc: true,
                ..base
            },
            Method::CvtNoDual => Ablation {
                no_dual_classifier: true,
                ..base
            },
            Method::SgdBaseline => Ablation {
                no_fc: true,
                no_dual_classifier: true,
                no_replay: true,
                ..base
            },
            Method::ErBaseline => Ablation {
                no_fc: true,
                no_dual_classifier: true,
                ..base
            },
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = CvtError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| CvtError::Config(format!("unknown method {s:?}")))
    }
}

/// Switches removing parts of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the contrastive term entirely.
    pub no_fc: bool,
    /// Contrastive term without focuses.
    pub scl_instead_of_fc: bool,
    /// Train only the accumulation head, on stream and memory.
    pub no_dual_classifier: bool,
    /// No rehearsal memory at all.
    pub no_replay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stream_batch_size: usize,
    pub memory_batch_size: usize,
    pub buffer_capacity: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub contrastive: ContrastiveParams,
    pub weights: LossWeights,
    pub stream_reduction: StreamReduction,
    pub augment: AugmentConfig,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stream_batch_size: 10,
            memory_batch_size: 10,
            buffer_capacity: 200,
            learning_rate: 0.03,
            momentum: 0.0,
            weight_decay: 1e-4,
            contrastive: ContrastiveParams::default(),
            weights: LossWeights::default(),
            stream_reduction: StreamReduction::Sum,
            augment: AugmentConfig::default(),
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stream_batch_size == 0 {
            return Err(CvtError::Config("stream batch size must be positive".into()));
        }
        if self.memory_batch_size == 0 && !self.ablation.no_replay {
            return Err(CvtError::Config("memory batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(CvtError::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CvtError::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(CvtError::Config(format!("invalid weight decay {}", self.weight_decay)));
        }
        if self.ablation.no_fc && self.ablation.scl_instead_of_fc {
            return Err(CvtError::Config("no_fc and scl_instead_of_fc are exclusive".into()));
        }
        self.contrastive.validate()?;
        self.weights.validate()
    }

    /// Memory capacity actually used.
    pub fn effective_capacity(&self) -> usize {
        if self.ablation.no_replay {
            0
        } else {
            self.buffer_capacity
        }
    }
}

/// SGD with optional momentum and L2 weight decay added to the gradient.
/// Parameters without a gradient are left untouched.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, no_decay: &[ParamId]) {
        for (id, grad) in grads.params() {
            if !store.is_trainable(*id) {
                continue;
            }
            let wd = if no_decay.contains(id) { 0.0 } else { self.weight_decay };
            let w = store.get_mut(*id).data_mut();
            if self.momentum == 0.0 {
                for (w, g) in w.iter_mut().zip(grad.data()) {
                    *w -= self.learning_rate * (g + wd * *w);
                }
                continue;
            }
            if self.velocity.len() <= id.0 {
                self.velocity.resize(id.0 + 1, None);
            }
            let v = self.velocity[id.0].get_or_insert_with(|| vec![0.0; w.len()]);
            for ((w, g), v) in w.iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + wd * *w;
                *w -= self.learning_rate * *v;
            }
        }
    }
}

/// Graph handles of the loss components for one batch.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub accumulation: Var,
    pub injection: Option<Var>,
    pub contrastive: Option<Var>,
}

/// Builds the training objective on `g` for a stream batch joined with a
/// memory batch (memory rows first). Randomness for augmentation and dropout
/// comes from `rng`.
pub fn build_objective(
    model: &mut CvtModel,
    config: &TrainConfig,
    g: &mut Graph,
    stream_images: &ImageBatch,
    stream_labels: &[usize],
    memory: &MemoryBatch,
    rng: &mut impl Rng,
) -> Result<ObjectiveTerms> {
    if stream_labels.is_empty() {
        return Err(CvtError::Empty("stream batch".into()));
    }
    let ab = config.ablation;
    let mut joined = memory.images.clone();
    joined.extend(stream_images);
    let labels: Vec<usize> = memory.labels.iter().chain(stream_labels).copied().collect();
    let num_classes = model.config().num_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(CvtError::Config(format!("label {bad} outside {num_classes} classes")));
    }

    let contrastive = if ab.no_fc {
        None
    } else {
        let pair = augment_two_views(&joined, &labels, &config.augment, rng)?;
        let e = model.embed(g, &pair.views, Mode::Train, rng)?;
        let focuses = if ab.scl_instead_of_fc {
            None
        } else {
            model.focuses.graph_rows(g, &model.store)?
        };
        let focuses = focuses.as_ref().map(|(v, c)| (*v, c.as_slice()));
        Some(g.contrastive(e.z, &pair.labels, focuses, config.contrastive)?)
    };

    let e = model.embed(g, &joined.to_tensor(), Mode::Train, rng)?;
    let (inj, acc) = model.classify(g, e.pooled)?;
    let row_weights = accumulation_row_weights(
        memory.len(),
        stream_labels.len(),
        config.weights,
        config.stream_reduction,
    );
    let accumulation = g.cross_entropy(acc, &labels, &row_weights)?;
    let injection = if ab.no_dual_classifier {
        None
    } else {
        let stream_logits = g.slice_rows(inj, memory.len(), stream_labels.len())?;
        Some(g.cross_entropy(stream_logits, stream_labels, &vec![1.0; stream_labels.len()])?)
    };

    let mut terms = vec![(accumulation, 1.0)];
    terms.extend(injection.map(|v| (v, 1.0)));
    terms.extend(contrastive.map(|v| (v, config.weights.gamma)));
    let total = g.weighted_sum(&terms)?;
    Ok(ObjectiveTerms {
        total,
        accumulation,
        injection,
        contrastive,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub task_id: usize,
    pub loss_total: f64,
    #[serde(rename = "loss_A")]
    pub loss_accumulation: f64,
    #[serde(rename = "loss_I")]
    pub loss_injection: Option<f64>,
    #[serde(rename = "loss_FC")]
    pub loss_contrastive: Option<f64>,
    pub active_classes: usize,
    pub buffer_fill: usize,
}

/// Model, memory, optimizer and randomness of one training run.
#[derive(Debug)]
pub struct Learner {
    pub model: CvtModel,
    pub buffer: MemoryBuffer,
    optimizer: Sgd,
    rng: ChaCha8Rng,
    config: TrainConfig,
    steps: usize,
}

impl Learner {
    pub fn new(model: CvtModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let c = model.config();
        let buffer = MemoryBuffer::new(
            config.effective_capacity(),
            c.in_channels,
            c.image_size,
            c.image_size,
            config.seed.wrapping_add(0x5eed_b0ff),
        );
        Ok(Self::resume(model, buffer, config, 0))
    }

    /// Continues from a restored model and memory.
    pub fn resume(model: CvtModel, buffer: MemoryBuffer, config: TrainConfig, steps: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(steps as u64);
        Self {
            model,
            buffer,
            optimizer: Sgd::new(config.learning_rate, config.momentum, config.weight_decay),
            rng,
            config,
            steps,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Sample memory, activate focuses, build and differentiate the
    /// objective, take one SGD step, then offer the batch to memory.
    pub fn train_step(&mut self, batch: &StreamBatch) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(CvtError::Empty("stream batch".into()));
        }
        let memory = self.buffer.sample(self.config.memory_batch_size);
        self.model.focuses.activate(&batch.labels)?;
        let mut g = Graph::new();
        let terms = build_objective(
            &mut self.model,
            &self.config,
            &mut g,
            &batch.images,
            &batch.labels,
            &memory,
            &mut self.rng,
        )?;
        let value = |v: Var| g.value(v).item();
        let report = StepReport {
            step: self.steps,
            task_id: batch.task_id,
            loss_total: value(terms.total),
            loss_accumulation: value(terms.accumulation),
            loss_injection: terms.injection.map(value),
            loss_contrastive: terms.contrastive.map(value),
            active_classes: self.model.focuses.active_classes().len(),
            buffer_fill: self.buffer.len(),
        };
        let checks = [
            ("loss_A", Some(report.loss_accumulation)),
            ("loss_I", report.loss_injection),
            ("loss_FC", report.loss_contrastive),
            ("loss_total", Some(report.loss_total)),
        ];
        for (component, v) in checks {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(CvtError::NonFinite {
                    component,
                    step: self.steps,
                });
            }
        }
        let grads = g.backward(terms.total);
        let focus = self.model.focuses.param;
        self.optimizer.step(&mut self.model.store, &grads, &[focus]);
        self.buffer.reservoir_update(batch);
        self.steps += 1;
        Ok(StepReport {
            buffer_fill: self.buffer.len(),
            ..report
        })
    }
}

/// Serialized model and memory at the end of a task.
#[derive(Debug, Clone)]
pub struct TaskCheckpoint {
    pub task_id: usize,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub log: Vec<StepReport>,
    pub checkpoints: Vec<TaskCheckpoint>,
    /// Distinct training examples consumed.
    pub examples_seen: usize,
}

/// A run stopped by an error, with everything recorded before it.
#[derive(Debug)]
pub struct RunAbort {
    pub error: CvtError,
    pub partial: RunOutput,
}

impl fmt::Display for RunAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training aborted after {} steps: {}", self.partial.log.len(), self.error)
    }
}

impl std::error::Error for RunAbort {}

/// Consumes the stream once, calling `on_boundary(learner, task_id)` and
/// storing a checkpoint whenever a task ends. Any example arriving twice is
/// an error.
pub fn run_stream<I, F>(learner: &mut Learner, stream: I, mut on_boundary: F) -> std::result::Result<RunOutput, Box<RunAbort>>
where
    I: IntoIterator<Item = StreamBatch>,
    F: FnMut(&mut Learner, usize) -> Result<()>,
{
    let mut out = RunOutput::default();
    let mut seen = HashSet::new();
    let mut current: Option<usize> = None;
    let mut finish_task = |learner: &mut Learner, task: usize, out: &mut RunOutput| -> Result<()> {
        on_boundary(learner, task)?;
        out.checkpoints.push(TaskCheckpoint {
            task_id: task,
            bytes: save_checkpoint(&learner.model, Some(&learner.buffer))?,
        });
        Ok(())
    };
    let result = (|| -> Result<()> {
        for batch in stream {
            if let Some(task) = current.filter(|&t| t != batch.task_id) {
                finish_task(learner, task, &mut out)?;
            }
            current = Some(batch.task_id);
            for &id in &batch.sample_ids {
                if !seen.insert((batch.task_id, id)) {
                    return Err(CvtError::Precondition(format!("example {id} revisited")));
                }
            }
            out.examples_seen = seen.len();
            out.log.push(learner.train_step(&batch)?);
        }
        if let Some(task) = current {
            finish_task(learner, task, &mut out)?;
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(out),
        Err(error) => Err(Box::new(RunAbort { error, partial: out })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), m.as_str());
        }
        assert!("cvt_plus".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            ablation: Ablation {
                no_fc: true,
                scl_instead_of_fc: true,
                ..Ablation::default()
            },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            stream_batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            contrastive: ContrastiveParams { tau: 0.0, mu: 2.0 },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sgd_applies_decay_and_skips_exempt() {
        let mut store = ParamStore::new();
        let a = store.add("a", crate::Tensor::full(&[1, 2], 1.0));
        let b = store.add("b", crate::Tensor::full(&[1, 2], 1.0));
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let vb = g.param(&store, b);
        let s = g.add(va, vb).unwrap();
        let ones = g.constant(crate::Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap());
        let total = g.matmul(s, ones, false).unwrap();
        let grads = g.backward(total);
        let mut opt = Sgd::new(0.1, 0.0, 0.5);
        opt.step(&mut store, &grads, &[b]);
        assert!((store.get(a).data()[0] - (1.0 - 0.1 * 1.5)).abs() < 1e-12);
        assert!((store.get(b).data()[0] - 0.9).abs() < 1e-12);
    }
}
