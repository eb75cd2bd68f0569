//! Analytic gradients against central finite differences (float64).

use cvt_core::data::{AugmentConfig, ImageBatch};
use cvt_core::graph::{Graph, ParamStore};
use cvt_core::layers::Mode;
use cvt_core::losses::{fc_loss, fc_loss_and_grad, weighted_cross_entropy, ContrastiveBatch, ContrastiveParams};
use cvt_core::model::{AttentionNorm, CvtConfig, CvtModel, ExternalAttention};
use cvt_core::replay::MemoryBatch;
use cvt_core::trainer::{build_objective, Method, TrainConfig};
use cvt_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error with a floor on the denominator so that near-zero
/// gradients are compared absolutely.
fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

fn unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let v: Vec<f64> = (0..cols).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    Tensor::from_vec(&[rows, cols], data).unwrap()
}

struct Case {
    z: Tensor,
    labels: Vec<usize>,
    focuses: Tensor,
    focus_classes: Vec<usize>,
    classes: usize,
    params: ContrastiveParams,
}

impl Case {
    fn random(rng: &mut impl Rng, with_focuses: bool) -> Self {
        let n = rng.random_range(2..=8);
        let classes = rng.random_range(1..=4);
        let dim = rng.random_range(2..=5);
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let focus_classes: Vec<usize> = if with_focuses {
            (0..classes).filter(|_| rng.random_bool(0.7)).collect()
        } else {
            Vec::new()
        };
        Self {
            z: unit_rows(n, dim, rng),
            labels,
            focuses: unit_rows(focus_classes.len(), dim, rng),
            focus_classes,
            classes,
            params: ContrastiveParams {
                tau: rng.random_range(0.1..1.0),
                mu: rng.random_range(1.1..4.0),
            },
        }
    }

    fn value(&self, z: &Tensor, f: &Tensor) -> f64 {
        fc_loss(&ContrastiveBatch {
            z,
            labels: &self.labels,
            focuses: f,
            focus_classes: &self.focus_classes,
            num_classes: self.classes,
            params: self.params,
        })
        .unwrap()
    }
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    const EPS: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for trial in 0..60 {
        let case = Case::random(&mut rng, trial % 3 != 0);
        let out = fc_loss_and_grad(&ContrastiveBatch {
            z: &case.z,
            labels: &case.labels,
            focuses: &case.focuses,
            focus_classes: &case.focus_classes,
            num_classes: case.classes,
            params: case.params,
        })
        .unwrap();
        for k in 0..case.z.len() {
            let mut plus = case.z.clone();
            plus.data_mut()[k] += EPS;
            let mut minus = case.z.clone();
            minus.data_mut()[k] -= EPS;
            let fd = (case.value(&plus, &case.focuses) - case.value(&minus, &case.focuses)) / (2.0 * EPS);
            worst = worst.max(rel_err(out.grad_z.data()[k], fd, 1e-2));
        }
        for k in 0..case.focuses.len() {
            let mut plus = case.focuses.clone();
            plus.data_mut()[k] += EPS;
            let mut minus = case.focuses.clone();
            minus.data_mut()[k] -= EPS;
            let fd = (case.value(&case.z, &plus) - case.value(&case.z, &minus)) / (2.0 * EPS);
            worst = worst.max(rel_err(out.grad_focuses.data()[k], fd, 1e-2));
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn weighted_cross_entropy_gradient_matches_finite_differences() {
    const EPS: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let (n, c) = (rng.random_range(1..6), rng.random_range(2..6));
        let logits = Tensor::from_vec(&[n, c], (0..n * c).map(|_| 3.0 * gaussian(&mut rng)).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let (_, grad) = weighted_cross_entropy(&logits, &labels, &weights).unwrap();
        for k in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[k] += EPS;
            let mut m = logits.clone();
            m.data_mut()[k] -= EPS;
            let fd = (weighted_cross_entropy(&p, &labels, &weights).unwrap().0
                - weighted_cross_entropy(&m, &labels, &weights).unwrap().0)
                / (2.0 * EPS);
            worst = worst.max(rel_err(grad.data()[k], fd, 1e-2));
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

/// Scalar test loss of an attention layer: weighted cross-entropy of its
/// output rows against fixed labels.
fn attention_loss(
    att: &ExternalAttention,
    store: &mut ParamStore,
    x: &Tensor,
    batch: usize,
    labels: &[usize],
) -> (f64, Graph, cvt_core::graph::Var) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = att.forward(&mut g, store, xv, batch, Mode::Train).unwrap();
    let w = vec![1.0; labels.len()];
    let loss = g.cross_entropy(out.out, labels, &w).unwrap();
    (g.value(loss).item(), g, loss)
}

#[test]
fn external_attention_gradients_match_finite_differences() {
    const EPS: f64 = 1e-5;
    for norm in [AttentionNorm::Batch, AttentionNorm::Identity] {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let (batch, tokens, dim, key_dim, heads) = (3, 4, 6, 4, 2);
        let att = ExternalAttention::new(&mut store, "att", dim, key_dim, heads, tokens, norm, &mut rng);
        for v in store.get_mut(att.bias).data_mut() {
            *v = 0.5 * gaussian(&mut rng);
        }
        let x = Tensor::from_vec(
            &[batch * tokens, dim],
            (0..batch * tokens * dim).map(|_| gaussian(&mut rng)).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..batch * tokens).map(|_| rng.random_range(0..dim)).collect();
        let (_, g, loss) = attention_loss(&att, &mut store, &x, batch, &labels);
        let grads = g.backward(loss);
        let mut worst: f64 = 0.0;
        for id in [att.query.weight, att.query.bias.unwrap(), att.key, att.bias] {
            let analytic = grads.param(id).expect("attention parameter has a gradient").clone();
            for k in 0..store.get(id).len() {
                store.get_mut(id).data_mut()[k] += EPS;
                let up = attention_loss(&att, &mut store, &x, batch, &labels).0;
                store.get_mut(id).data_mut()[k] -= 2.0 * EPS;
                let down = attention_loss(&att, &mut store, &x, batch, &labels).0;
                store.get_mut(id).data_mut()[k] += EPS;
                let fd = (up - down) / (2.0 * EPS);
                worst = worst.max(rel_err(analytic.data()[k], fd, 1e-2));
            }
        }
        assert!(worst <= 1e-4, "{norm:?}: worst relative error {worst:e}");
    }
}

fn tiny_config() -> CvtConfig {
    CvtConfig {
        stem_channels: 4,
        stage_dims: vec![8, 12],
        heads_per_stage: vec![2, 2],
        key_dims: vec![4, 4],
        blocks_per_stage: vec![1, 1],
        embed_dim: 12,
        projection_dim: 6,
        num_classes: 4,
        ..CvtConfig::default()
    }
}

fn random_images(n: usize, rng: &mut impl Rng) -> ImageBatch {
    let mut b = ImageBatch::new(3, 16, 16);
    for _ in 0..n {
        let img: Vec<u8> = (0..3 * 16 * 16).map(|_| rng.random()).collect();
        b.push(&img);
    }
    b
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    const EPS: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut model = CvtModel::new(tiny_config(), 3).unwrap();
    model.focuses.activate(&[0, 1, 2]).unwrap();
    let cfg = TrainConfig {
        augment: AugmentConfig::default(),
        ablation: Method::Cvt.ablation(),
        ..TrainConfig::default()
    };
    let stream = random_images(3, &mut rng);
    let stream_labels = vec![0, 1, 1];
    let memory = MemoryBatch {
        images: random_images(2, &mut rng),
        labels: vec![2, 0],
        slots: vec![0, 1],
    };
    let eval = |model: &mut CvtModel| {
        let mut g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(1234);
        let terms = build_objective(model, &cfg, &mut g, &stream, &stream_labels, &memory, &mut r).unwrap();
        (g, terms)
    };
    let (g, terms) = eval(&mut model);
    assert!(terms.injection.is_some() && terms.contrastive.is_some());
    let grads = g.backward(terms.total);
    let ids: Vec<_> = model.store.trainable_ids().collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in ids {
        let Some(analytic) = grads.param(id).cloned() else {
            // only focus rows of inactive classes may lack a gradient
            assert_eq!(id, model.focuses.param, "{} has no gradient", model.store.name(id));
            continue;
        };
        let len = model.store.get(id).len();
        for k in [0, len / 2, len - 1] {
            model.store.get_mut(id).data_mut()[k] += EPS;
            let (g1, t1) = eval(&mut model);
            model.store.get_mut(id).data_mut()[k] -= 2.0 * EPS;
            let (g2, t2) = eval(&mut model);
            model.store.get_mut(id).data_mut()[k] += EPS;
            let fd = (g1.value(t1.total).item() - g2.value(t2.total).item()) / (2.0 * EPS);
            let e = rel_err(analytic.data()[k], fd, 1e-2);
            assert!(e <= 1e-3, "{}[{k}]: analytic {} vs numeric {fd}", model.store.name(id), analytic.data()[k]);
            worst = worst.max(e);
            checked += 1;
        }
    }
    assert!(checked > 100);
    eprintln!("full objective: {checked} entries, worst relative error {worst:e}");
}
