//! Training objectives: supervised contrastive (SCL), focal contrastive (FC),
//! the injection and accumulation cross-entropy terms, and their total.
//!
//! The focal contrastive loss over an augmented batch `I` with unit-norm rows
//! `z_i` and active focuses `O` is
//!
//! ```text
//! L_FC = sum_i  -1/|P(i) ∪ o_{y_i}|  sum_{p in P(i) ∪ o_{y_i}}
//!            delta_p * log( exp(z_i·z_p/tau) / sum_{j in A(i) ∪ O} exp(z_i·z_j/tau) )
//! ```
//!
//! where `A(i)` is every other row of the batch, `P(i)` the rows of `A(i)`
//! sharing the anchor's label, and `delta_p` is `mu` for the focus and `1`
//! for sample positives. With no active focuses it is exactly the SCL loss.

use serde::{Deserialize, Serialize};

use crate::error::{CvtError, Result};
use crate::graph::softmax_in_place;
use crate::tensor::Tensor;

/// Unit-norm tolerance for contrastive inputs.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveParams {
    /// Temperature.
    pub tau: f64,
    /// Weight of focus positives.
    pub mu: f64,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        Self { tau: 0.1, mu: 2.0 }
    }
}

impl ContrastiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CvtError::Config(format!("temperature must be > 0, got {}", self.tau)));
        }
        if !(self.mu > 1.0 && self.mu.is_finite()) {
            return Err(CvtError::Config(format!("focus weight must be > 1, got {}", self.mu)));
        }
        Ok(())
    }
}

/// Coefficients of the accumulation loss (`alpha`, `beta`) and of the
/// contrastive term in the total (`gamma`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CvtError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the stream term of the accumulation loss is reduced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamReduction {
    /// Memory term is a mean, stream term a sum.
    #[default]
    Sum,
    /// Both terms are means.
    Mean,
}

/// Embeddings, labels and active focuses for one contrastive evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch<'a> {
    pub z: &'a Tensor,
    pub labels: &'a [usize],
    /// Active focus rows (possibly zero rows), same width as `z`.
    pub focuses: &'a Tensor,
    /// Class of each focus row.
    pub focus_classes: &'a [usize],
    /// Size of the label space; every label and focus class must be below it.
    pub num_classes: usize,
    pub params: ContrastiveParams,
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub value: f64,
    pub grad_z: Tensor,
    pub grad_focuses: Tensor,
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(CvtError::Precondition(format!(
                "{what} row {i} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

fn check_inputs(z: &Tensor, labels: &[usize], focuses: &Tensor, classes: &[usize]) -> Result<()> {
    if z.rows() != labels.len() {
        return Err(CvtError::Shape(format!(
            "{} embeddings for {} labels",
            z.rows(),
            labels.len()
        )));
    }
    if focuses.rows() != classes.len() {
        return Err(CvtError::Shape(format!(
            "{} focuses for {} focus classes",
            focuses.rows(),
            classes.len()
        )));
    }
    if focuses.rows() > 0 && focuses.cols() != z.cols() {
        return Err(CvtError::Shape(format!(
            "focus width {} differs from embedding width {}",
            focuses.cols(),
            z.cols()
        )));
    }
    for (k, c) in classes.iter().enumerate() {
        if classes[..k].contains(c) {
            return Err(CvtError::Shape(format!("duplicate focus for class {c}")));
        }
    }
    Ok(())
}

/// Supervised contrastive loss (no focuses). Anchors without positives
/// contribute zero.
pub fn scl_loss(z: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    if z.rows() < 2 {
        return Err(CvtError::Precondition("contrastive loss needs at least 2 rows".into()));
    }
    if !(tau > 0.0) {
        return Err(CvtError::Config(format!("temperature must be > 0, got {tau}")));
    }
    check_unit_rows(z, "embedding")?;
    let none = Tensor::zeros(&[0, z.cols()]);
    check_inputs(z, labels, &none, &[])?;
    // mu never enters without focuses
    let params = ContrastiveParams { tau, mu: 2.0 };
    Ok(contrastive_core(z, labels, &none, &[], params, false).value)
}

/// Focal contrastive loss with validation of every documented precondition.
pub fn fc_loss(batch: &ContrastiveBatch<'_>) -> Result<f64> {
    Ok(fc_loss_checked(batch, false)?.value)
}

/// [`fc_loss`] together with its gradients w.r.t. the embeddings and focuses.
pub fn fc_loss_and_grad(batch: &ContrastiveBatch<'_>) -> Result<ContrastiveOutput> {
    fc_loss_checked(batch, true)
}

fn fc_loss_checked(batch: &ContrastiveBatch<'_>, grad: bool) -> Result<ContrastiveOutput> {
    batch.params.validate()?;
    if batch.z.rows() < 2 {
        return Err(CvtError::Precondition("contrastive loss needs at least 2 rows".into()));
    }
    check_inputs(batch.z, batch.labels, batch.focuses, batch.focus_classes)?;
    if let Some(c) = batch
        .labels
        .iter()
        .chain(batch.focus_classes)
        .find(|&&c| c >= batch.num_classes)
    {
        return Err(CvtError::Shape(format!(
            "class {c} outside label space of {}",
            batch.num_classes
        )));
    }
    check_unit_rows(batch.z, "embedding")?;
    check_unit_rows(batch.focuses, "focus")?;
    Ok(contrastive_core(
        batch.z,
        batch.labels,
        batch.focuses,
        batch.focus_classes,
        batch.params,
        grad,
    ))
}

/// Loss and gradients for the autograd tape. Shapes are validated; unit norms
/// are guaranteed by the caller normalizing rows in the graph.
pub(crate) fn fc_loss_with_grad(
    z: &Tensor,
    labels: &[usize],
    focuses: &Tensor,
    focus_classes: &[usize],
    params: ContrastiveParams,
) -> Result<ContrastiveOutput> {
    params.validate()?;
    check_inputs(z, labels, focuses, focus_classes)?;
    Ok(contrastive_core(z, labels, focuses, focus_classes, params, true))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Shared evaluation of the (focal) contrastive objective. Similarities are
/// max-subtracted before exponentiation.
fn contrastive_core(
    z: &Tensor,
    labels: &[usize],
    focuses: &Tensor,
    focus_classes: &[usize],
    params: ContrastiveParams,
    want_grad: bool,
) -> ContrastiveOutput {
    let n = z.rows();
    let nf = focuses.rows();
    let dim = z.cols();
    let inv_tau = 1.0 / params.tau;
    let mut grad_z = Tensor::zeros(&[n, dim]);
    let mut grad_f = Tensor::zeros(&[nf, dim]);
    let mut total = 0.0;

    // candidate k < n is sample k, k >= n is focus k - n
    let candidate = |k: usize| -> &[f64] {
        if k < n {
            z.row(k)
        } else {
            focuses.row(k - n)
        }
    };

    let mut logits = vec![0.0; n + nf];
    for i in 0..n {
        let zi = z.row(i);
        let own_focus = focus_classes.iter().position(|&c| c == labels[i]).map(|f| n + f);
        let sample_pos = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        let count = sample_pos + usize::from(own_focus.is_some());
        if count == 0 {
            continue;
        }

        for (k, l) in logits.iter_mut().enumerate() {
            *l = if k == i {
                f64::NEG_INFINITY
            } else {
                dot(zi, candidate(k)) * inv_tau
            };
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_denominator = max + sum_exp.ln();

        let weight_of = |k: usize| -> f64 {
            if Some(k) == own_focus {
                params.mu
            } else if k < n && k != i && labels[k] == labels[i] {
                1.0
            } else {
                0.0
            }
        };
        let inv_count = 1.0 / count as f64;
        let mut anchor_loss = 0.0;
        let mut delta_sum = 0.0;
        for (k, &l) in logits.iter().enumerate() {
            let w = weight_of(k);
            if w > 0.0 {
                anchor_loss -= w * (l - log_denominator);
                delta_sum += w;
            }
        }
        total += anchor_loss * inv_count;

        if want_grad {
            let mut probs = logits.clone();
            softmax_in_place(&mut probs);
            for k in 0..n + nf {
                if k == i {
                    continue;
                }
                let d_logit = inv_count * (delta_sum * probs[k] - weight_of(k)) * inv_tau;
                if d_logit == 0.0 {
                    continue;
                }
                let ck = candidate(k);
                for (g, c) in grad_z.row_mut(i).iter_mut().zip(ck) {
                    *g += d_logit * c;
                }
                let target = if k < n {
                    grad_z.row_mut(k)
                } else {
                    grad_f.row_mut(k - n)
                };
                for (g, a) in target.iter_mut().zip(zi) {
                    *g += d_logit * a;
                }
            }
        }
    }

    ContrastiveOutput {
        value: total,
        grad_z,
        grad_focuses: grad_f,
    }
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(CvtError::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(CvtError::Precondition(format!(
            "label {y} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Cross-entropy `-log softmax(logits_i)[y_i]` of every row.
pub fn cross_entropy_rows(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[labels[i]]
        })
        .collect())
}

/// `sum_i w_i * CE_i` and its gradient w.r.t. the logits.
pub fn weighted_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, Tensor)> {
    check_labels(logits, labels)?;
    if weights.len() != labels.len() {
        return Err(CvtError::Shape("one weight per row required".into()));
    }
    let mut grad = logits.clone();
    let mut value = 0.0;
    for i in 0..logits.rows() {
        let row = grad.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        value += weights[i] * (lse - row[labels[i]]);
        softmax_in_place(row);
        row[labels[i]] -= 1.0;
        row.iter_mut().for_each(|g| *g *= weights[i]);
    }
    Ok((value, grad))
}

/// Injection loss: summed cross-entropy over stream rows only.
pub fn injection_loss(logits_stream: &Tensor, labels_stream: &[usize]) -> Result<f64> {
    Ok(cross_entropy_rows(logits_stream, labels_stream)?.iter().sum())
}

/// Per-row weights of the accumulation loss for a joined `[memory; stream]`
/// batch: `alpha / |memory|` on memory rows, `beta` (or `beta / |stream|`)
/// on stream rows. An empty memory batch contributes nothing.
pub fn accumulation_row_weights(
    memory_rows: usize,
    stream_rows: usize,
    weights: LossWeights,
    reduction: StreamReduction,
) -> Vec<f64> {
    let mem_w = if memory_rows == 0 {
        0.0
    } else {
        weights.alpha / memory_rows as f64
    };
    let stream_w = match reduction {
        StreamReduction::Sum => weights.beta,
        StreamReduction::Mean if stream_rows > 0 => weights.beta / stream_rows as f64,
        StreamReduction::Mean => 0.0,
    };
    std::iter::repeat_n(mem_w, memory_rows)
        .chain(std::iter::repeat_n(stream_w, stream_rows))
        .collect()
}

/// Accumulation loss: `alpha * mean(CE over memory) + beta * sum(CE over stream)`.
pub fn accumulation_loss(
    logits_memory: &Tensor,
    labels_memory: &[usize],
    logits_stream: &Tensor,
    labels_stream: &[usize],
    weights: LossWeights,
    reduction: StreamReduction,
) -> Result<f64> {
    let mem = cross_entropy_rows(logits_memory, labels_memory)?;
    let stream = cross_entropy_rows(logits_stream, labels_stream)?;
    let w = accumulation_row_weights(mem.len(), stream.len(), weights, reduction);
    Ok(mem.iter().chain(&stream).zip(&w).map(|(l, w)| l * w).sum())
}

/// `L_A + L_I + gamma * L_FC`.
pub fn total_loss(accumulation: f64, injection: f64, focal: f64, gamma: f64) -> f64 {
    accumulation + injection + gamma * focal
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn identical_pair_has_zero_scl() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(scl_loss(&z, &[3, 3], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn rejects_non_unit_rows() {
        let z = Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(scl_loss(&z, &[0, 0], 1.0), Err(CvtError::Precondition(_))));
    }

    #[test]
    fn anchors_without_positives_contribute_nothing() {
        let z = Tensor::from_rows(&[unit(&[1.0, 0.2]), unit(&[0.3, 1.0])]).unwrap();
        assert_eq!(scl_loss(&z, &[0, 1], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn focus_class_outside_label_space_is_structural_error() {
        let z = Tensor::from_rows(&[unit(&[1.0, 0.0]), unit(&[0.0, 1.0])]).unwrap();
        let f = Tensor::from_rows(&[unit(&[1.0, 1.0])]).unwrap();
        let batch = ContrastiveBatch {
            z: &z,
            labels: &[0, 1],
            focuses: &f,
            focus_classes: &[7],
            num_classes: 4,
            params: ContrastiveParams::default(),
        };
        assert!(matches!(fc_loss(&batch), Err(CvtError::Shape(_))));
    }

    #[test]
    fn params_validation() {
        assert!(ContrastiveParams { tau: 0.0, mu: 2.0 }.validate().is_err());
        assert!(ContrastiveParams { tau: 0.1, mu: 1.0 }.validate().is_err());
        assert!(LossWeights { alpha: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn uniform_logits_give_b_ln_c() {
        let logits = Tensor::zeros(&[4, 5]);
        let l = injection_loss(&logits, &[0, 1, 2, 4]).unwrap();
        assert!((l - 4.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_drives_cross_entropy_to_zero() {
        let logits = Tensor::from_rows(&[vec![20.0, 0.0, 0.0], vec![0.0, 0.0, 20.0]]).unwrap();
        let rows = cross_entropy_rows(&logits, &[0, 2]).unwrap();
        assert!(rows.iter().all(|&l| (0.0..1e-8).contains(&l)));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(injection_loss(&logits, &[3]).is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.5), 4.5);
        assert_eq!(total_loss(1.0, 2.0, 1e9, 0.0), 3.0);
    }

    #[test]
    fn empty_memory_leaves_only_stream_sum() {
        let stream = Tensor::from_rows(&[vec![0.5, -0.1], vec![0.0, 2.0]]).unwrap();
        let mem = Tensor::zeros(&[0, 2]);
        let w = LossWeights::default();
        let got = accumulation_loss(&mem, &[], &stream, &[1, 0], w, StreamReduction::Sum).unwrap();
        let expected = injection_loss(&stream, &[1, 0]).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn mean_reduction_divides_stream_term() {
        let stream = Tensor::from_rows(&[vec![0.5, -0.1], vec![0.0, 2.0]]).unwrap();
        let mem = Tensor::zeros(&[0, 2]);
        let w = LossWeights::default();
        let sum = accumulation_loss(&mem, &[], &stream, &[1, 0], w, StreamReduction::Sum).unwrap();
        let mean = accumulation_loss(&mem, &[], &stream, &[1, 0], w, StreamReduction::Mean).unwrap();
        assert!((sum / 2.0 - mean).abs() < 1e-15);
    }
}
