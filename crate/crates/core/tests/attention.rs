//! External attention: row-stochastic maps, the uniform case and a
//! hand-evaluated 2x2 example.

use cvt_core::graph::{Graph, ParamStore};
use cvt_core::layers::Mode;
use cvt_core::model::{AttentionNorm, ExternalAttention};
use cvt_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for norm in [AttentionNorm::Batch, AttentionNorm::Identity] {
        for mode in [Mode::Train, Mode::Eval] {
            for (batch, tokens, dim, key_dim, heads) in [(2, 4, 6, 4, 2), (3, 16, 8, 8, 4), (1, 9, 4, 2, 1)] {
                let mut store = ParamStore::new();
                let att = ExternalAttention::new(&mut store, "a", dim, key_dim, heads, tokens, norm, &mut rng);
                for v in store.get_mut(att.bias).data_mut() {
                    *v = rng.random_range(-2.0..2.0);
                }
                let mut g = Graph::new();
                let x = g.constant(random_input(batch * tokens, dim, &mut rng));
                let out = att.forward(&mut g, &mut store, x, batch, mode).unwrap();
                assert_eq!(out.maps.len(), heads);
                for map in &out.maps {
                    let m = g.value(*map);
                    assert_eq!(m.shape(), &[batch * tokens, att.slots()]);
                    for r in 0..m.rows() {
                        let s: f64 = m.row(r).iter().sum();
                        assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
                        assert!(m.row(r).iter().all(|&p| p >= 0.0));
                    }
                }
            }
        }
    }
}

#[test]
fn constant_logits_give_uniform_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for norm in [AttentionNorm::Batch, AttentionNorm::Identity] {
        let mut store = ParamStore::new();
        let att = ExternalAttention::new(&mut store, "a", 4, 4, 2, 5, norm, &mut rng);
        store.get_mut(att.key).data_mut().fill(0.0);
        let mut g = Graph::new();
        let x = g.constant(random_input(10, 4, &mut rng));
        let out = att.forward(&mut g, &mut store, x, 2, Mode::Train).unwrap();
        for map in out.maps {
            for &p in g.value(map).data() {
                assert!((p - 1.0 / 5.0).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn two_by_two_hand_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let att = ExternalAttention::new(&mut store, "a", 2, 2, 1, 2, AttentionNorm::Identity, &mut rng);
    let identity = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    *store.get_mut(att.query.weight) = identity.clone();
    *store.get_mut(att.value.weight) = identity.clone();
    store.get_mut(att.query.bias.unwrap()).data_mut().fill(0.0);
    store.get_mut(att.value.bias.unwrap()).data_mut().fill(0.0);
    *store.get_mut(att.key) = identity.clone();
    *store.get_mut(att.bias) = Tensor::from_vec(&[2, 2], vec![0.0, 0.5, 0.0, 0.0]).unwrap();

    let mut g = Graph::new();
    let x = g.constant(identity);
    let out = att.forward(&mut g, &mut store, x, 1, Mode::Eval).unwrap();
    // row 0: softmax([1, 0.5] / sqrt 2); row 1: softmax([0, 1] / sqrt 2)
    let expected = [0.587479000840, 0.412520999160, 0.330238450673, 0.669761549327];
    for (got, want) in g.value(out.maps[0]).data().iter().zip(expected) {
        assert!((got - want).abs() < 1e-6);
    }
    // values are the identity, so the output equals the attention map
    for (got, want) in g.value(out.out).data().iter().zip(expected) {
        assert!((got - want).abs() < 1e-6);
    }
}

#[test]
fn wrong_token_count_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let att = ExternalAttention::new(&mut store, "a", 4, 4, 2, 4, AttentionNorm::Identity, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(random_input(6, 4, &mut rng));
    assert!(att.forward(&mut g, &mut store, x, 2, Mode::Eval).is_err());
}
