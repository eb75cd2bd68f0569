//! Overall accuracy, forgetting and the two inference protocols against
//! brute-force evaluation.

use cvt_core::evaluation::{accuracy_from_logits, AccuracyMatrix};
use cvt_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let t = rng.random_range(1..=8);
    (1..=t)
        .map(|i| (0..i).map(|_| rng.random_range(0.0..=100.0)).collect())
        .collect()
}

/// `a[i][t]` with 1-based indices, straight from the definitions.
fn brute_force(a: &[Vec<f64>]) -> (f64, Option<f64>) {
    let big_t = a.len();
    let at = |i: usize, t: usize| a[i - 1][t - 1];
    let mut acc = 0.0;
    for t in 1..=big_t {
        acc += at(big_t, t);
    }
    let acc = acc / big_t as f64;
    if big_t < 2 {
        return (acc, None);
    }
    let mut f = 0.0;
    for t in 1..big_t {
        let mut best = f64::NEG_INFINITY;
        for i in t..big_t {
            let drop = at(i, t) - at(big_t, t);
            if drop > best {
                best = drop;
            }
        }
        f += best;
    }
    (acc, Some(f / (big_t - 1) as f64))
}

#[test]
fn metrics_match_brute_force_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let rows = random_matrix(&mut rng);
        let (acc, forgetting) = brute_force(&rows);
        let m = AccuracyMatrix::from_rows(rows).unwrap();
        assert_eq!(m.overall_accuracy().unwrap(), acc);
        assert_eq!(m.forgetting(), forgetting);
    }
}

#[test]
fn worked_example() {
    let m = AccuracyMatrix::from_rows(vec![vec![80.0], vec![60.0, 70.0]]).unwrap();
    assert_eq!(m.overall_accuracy().unwrap(), 65.0);
    assert_eq!(m.forgetting(), Some(20.0));
}

#[test]
fn per_boundary_values_only_use_earlier_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let rows = random_matrix(&mut rng);
        let m = AccuracyMatrix::from_rows(rows.clone()).unwrap();
        for b in m.per_boundary() {
            let (acc, f) = brute_force(&rows[..b.task]);
            assert_eq!(b.accuracy, acc);
            assert_eq!(b.forgetting, f);
        }
    }
}

#[test]
fn random_logits_on_two_class_task_give_half_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 20_000;
    let logits = Tensor::from_vec(&[n, 10], (0..n * 10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| if rng.random_bool(0.5) { 3 } else { 7 }).collect();
    let acc = accuracy_from_logits(&logits, &labels, &[3, 7]).unwrap();
    let sigma = 100.0 * (0.25 / n as f64).sqrt();
    assert!((acc - 50.0).abs() <= 3.0 * sigma, "accuracy {acc}");
}

#[test]
fn true_class_max_logit_gives_full_accuracy() {
    let labels = [0, 4, 2, 2, 9];
    let mut data = vec![0.0; labels.len() * 10];
    for (i, &y) in labels.iter().enumerate() {
        data[i * 10 + y] = 5.0;
    }
    let logits = Tensor::from_vec(&[labels.len(), 10], data).unwrap();
    let all: Vec<usize> = (0..10).collect();
    assert_eq!(accuracy_from_logits(&logits, &labels, &all).unwrap(), 100.0);
}

proptest! {
    #[test]
    fn task_aware_dominates_task_free(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut classes: Vec<usize> = (0..10).collect();
        classes.shuffle(&mut rng);
        let seen_count = rng.random_range(2..=10);
        let seen = &classes[..seen_count];
        let task_size = rng.random_range(1..=seen_count);
        let task = &seen[seen_count - task_size..];
        let n = rng.random_range(1..40);
        let logits = Tensor::from_vec(&[n, 10], (0..n * 10).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| task[rng.random_range(0..task.len())]).collect();
        let aware = accuracy_from_logits(&logits, &labels, task).unwrap();
        let free = accuracy_from_logits(&logits, &labels, seen).unwrap();
        prop_assert!(aware >= free);
    }

    #[test]
    fn overall_accuracy_ignores_last_row_order(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = random_matrix(&mut rng);
        let a = AccuracyMatrix::from_rows(rows.clone()).unwrap().overall_accuracy().unwrap();
        rows.last_mut().unwrap().shuffle(&mut rng);
        let b = AccuracyMatrix::from_rows(rows).unwrap().overall_accuracy().unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}
