use std::rc::Rc;

use hei_core::nn::{
    adam_step, check_gradients, finite_difference_check, AdamConfig, AdamState, Graph, ParameterStore, Tensor,
    LAYER_NORM_EPS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn softmax_of_constant_row_is_uniform() {
    let mut g = Graph::new();
    let x = g.input(Tensor::filled(&[2, 5], 3.7));
    let y = g.softmax(x);
    for v in g.value(y).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn softmax_survives_huge_inputs() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, 3], vec![1e300, -1e300, 0.0]).unwrap());
    let y = g.softmax(x);
    assert!(g.value(y).is_finite());
    assert_eq!(g.value(y).data()[0], 1.0);
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut g = Graph::new();
    let x = g.input(random(&[3, 4, 7], 1).map(|v| 5.0 * v + 2.0));
    let gain = g.input(Tensor::filled(&[7], 1.0));
    let bias = g.input(Tensor::zeros(&[7]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    let xv = g.value(x).clone();
    for (r, row) in g.value(y).data().chunks(7).enumerate() {
        let mean: f64 = row.iter().sum::<f64>() / 7.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        let src = &xv.data()[r * 7..(r + 1) * 7];
        let m: f64 = src.iter().sum::<f64>() / 7.0;
        let s2: f64 = src.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-10);
        // The epsilon shrinks the variance by s2 / (s2 + eps).
        assert!((var - s2 / (s2 + LAYER_NORM_EPS)).abs() < 1e-10);
    }
}

#[test]
fn matmul_matches_naive_loop() {
    let (a, b) = (random(&[3, 4], 2), random(&[4, 2], 3));
    let mut g = Graph::new();
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    let oracle = naive_matmul(a.data(), b.data(), 3, 4, 2);
    for (x, y) in g.value(c).data().iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn batched_matmul_and_transpose_match_naive_loop() {
    let (a, b) = (random(&[2, 3, 4], 4), random(&[2, 5, 4], 5));
    let mut g = Graph::new();
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let bt = g.transpose(vb).unwrap();
    let c = g.matmul(va, bt).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 3, 5]);
    for batch in 0..2 {
        let bb = &b.data()[batch * 20..(batch + 1) * 20];
        let mut btd = vec![0.0; 20];
        for i in 0..5 {
            for j in 0..4 {
                btd[j * 5 + i] = bb[i * 4 + j];
            }
        }
        let oracle = naive_matmul(&a.data()[batch * 12..(batch + 1) * 12], &btd, 3, 4, 5);
        for (x, y) in g.value(c).data()[batch * 15..(batch + 1) * 15].iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[3, 4]));
    let b = g.input(Tensor::zeros(&[3, 4]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[3, 4]"), "{msg}");
    let c = g.input(Tensor::zeros(&[2, 2]));
    assert!(g.add(a, c).is_err());
}

#[test]
fn masked_fill_replaces_masked_entries() {
    let mut g = Graph::new();
    let x = g.input(Tensor::filled(&[1, 2, 2], 1.0));
    let y = g.masked_fill(x, Rc::new(vec![false, true, false, false]), -7.0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -7.0, 1.0, 1.0]);
}

#[test]
fn gradient_of_sum_is_all_ones() {
    let mut store = ParameterStore::new();
    let w = store.add("w", random(&[3, 4], 6)).unwrap();
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let loss = g.sum(wv);
    g.backward(loss, &mut store).unwrap();
    assert!(store.grad(w).data().iter().all(|&v| v == 1.0));
}

#[test]
fn gradient_of_quadratic_matches_closed_form() {
    let mut store = ParameterStore::new();
    let w = store.add("w", random(&[3, 4], 7)).unwrap();
    let x = random(&[4, 1], 8);
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let xv = g.input(x.clone());
    let y = g.matmul(wv, xv).unwrap();
    let y2 = g.mul(y, y).unwrap();
    let s = g.sum(y2);
    let loss = g.scale(s, 0.5);
    g.backward(loss, &mut store).unwrap();
    let wx = naive_matmul(store.value(w).data(), x.data(), 3, 4, 1);
    let grad = store.grad(w).data();
    for i in 0..3 {
        for j in 0..4 {
            assert!((grad[i * 4 + j] - wx[i] * x.data()[j]).abs() < 1e-14);
        }
    }
}

#[test]
fn unreachable_parameters_get_zero_gradient() {
    let mut store = ParameterStore::new();
    let used = store.add("used", random(&[2], 9)).unwrap();
    let unused = store.add("unused", random(&[2], 10)).unwrap();
    store.grad_mut(unused).data_mut()[0] = 5.0;
    let mut g = Graph::new();
    let v = g.param(&store, used);
    let loss = g.sum(v);
    g.backward(loss, &mut store).unwrap();
    assert!(store.grad(unused).data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_without_recorded_loss_is_rejected() {
    let mut store = ParameterStore::new();
    let w = store.add("w", random(&[2], 11)).unwrap();
    let mut other = Graph::new();
    let v = other.param(&store, w);
    let loss = other.sum(v);
    assert!(Graph::new().backward(loss, &mut store).is_err());
    // Non-scalar outputs are not losses either.
    let x = other.param(&store, w);
    assert!(other.backward(x, &mut store).is_err());
}

#[test]
fn duplicate_parameter_names_are_rejected() {
    let mut store = ParameterStore::new();
    store.add("w", Tensor::zeros(&[1])).unwrap();
    assert!(store.add("w", Tensor::zeros(&[1])).is_err());
}

#[test]
fn adam_leaves_parameters_alone_on_zero_gradient() {
    let mut store = ParameterStore::new();
    let p = store.add("p", random(&[5], 12)).unwrap();
    let before = store.value(p).clone();
    let mut state = AdamState::new(&store, AdamConfig::default());
    adam_step(&mut store, &mut state);
    assert_eq!(store.value(p), &before);
    assert_eq!(state.step_count(), 1);
}

#[test]
fn adam_first_step_moves_by_lr_against_gradient() {
    let mut store = ParameterStore::new();
    let p = store.add("p", Tensor::new(vec![1], vec![0.3]).unwrap()).unwrap();
    let cfg = AdamConfig::default();
    let g = 0.05;
    store.grad_mut(p).data_mut()[0] = g;
    let mut state = AdamState::new(&store, cfg);
    adam_step(&mut store, &mut state);
    let delta = store.value(p).data()[0] - 0.3;
    assert!((delta + cfg.lr * g / (g.abs() + cfg.eps)).abs() < 1e-12);
    assert_eq!(store.grad(p).data()[0], 0.0);
}

#[test]
fn adam_converges_on_quadratic() {
    let target = random(&[6], 13);
    let mut store = ParameterStore::new();
    let p = store.add("p", Tensor::zeros(&[6])).unwrap();
    let mut state = AdamState::new(
        &store,
        AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
    );
    for _ in 0..200 {
        let mut g = Graph::new();
        let pv = g.param(&store, p);
        let tv = g.input(target.clone());
        let neg = g.scale(tv, -1.0);
        let d = g.add(pv, neg).unwrap();
        let d2 = g.mul(d, d).unwrap();
        let loss = g.sum(d2);
        g.backward(loss, &mut store).unwrap();
        adam_step(&mut store, &mut state);
    }
    let err: f64 = store
        .value(p)
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(err < 1e-3, "distance {err}");
}

#[test]
fn gradient_check_is_exact_for_linear_model() {
    let mut store = ParameterStore::new();
    let w = store.add("w", random(&[3, 4], 14)).unwrap();
    let b = store.add("b", random(&[3], 15)).unwrap();
    let x = random(&[5, 4], 16);
    let err = check_gradients(&mut store, 12, 0, |g, s| {
        let xv = g.input(x.clone());
        let (wv, bv) = (g.param(s, w), g.param(s, b));
        let y = g.linear(xv, wv, bv)?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(err < 1e-9, "error {err}");
}

fn layer_stack_loss(g: &mut Graph, s: &ParameterStore, x: &Tensor) -> hei_core::Result<hei_core::nn::Var> {
    let ids: Vec<_> = s.ids().collect();
    let xv = g.input(x.clone());
    let p: Vec<_> = ids.iter().map(|&id| g.param(s, id)).collect();
    let h = g.linear(xv, p[0], p[1])?;
    let h = g.layer_norm(h, p[2], p[3])?;
    let h = g.relu(h);
    let ht = g.transpose(h)?;
    let scores = g.matmul(h, ht)?;
    let scores = g.masked_fill(scores, Rc::new(vec![false, true, false, false]), -1e9)?;
    let a = g.softmax(scores);
    let mixed = g.matmul(a, h)?;
    let left = g.slice_last(mixed, 0, 2)?;
    let right = g.slice_last(mixed, 2, 2)?;
    let cat = g.concat_last(&[right, left])?;
    let target = g.input(Tensor::filled(&[2, 4], 0.3));
    g.mse(cat, target)
}

#[test]
fn every_op_passes_gradient_check() {
    let mut store = ParameterStore::new();
    store.add("w", random(&[4, 3], 17)).unwrap();
    store.add("b", random(&[4], 18)).unwrap();
    store.add("gain", random(&[4], 19).map(|v| 1.0 + 0.3 * v)).unwrap();
    store.add("bias", random(&[4], 20)).unwrap();
    let x = random(&[2, 3], 21);
    let err = check_gradients(&mut store, 40, 1, |g, s| layer_stack_loss(g, s, &x)).unwrap();
    assert!(err < 1e-5, "error {err}");
}

#[test]
fn corrupted_gradient_is_detected() {
    let mut store = ParameterStore::new();
    let w = store.add("w", random(&[3, 4], 22)).unwrap();
    let x = random(&[5, 4], 23);
    let build = |g: &mut Graph, s: &ParameterStore| -> hei_core::Result<hei_core::nn::Var> {
        let xv = g.input(x.clone());
        let wv = g.param(s, w);
        let wt = g.transpose(wv)?;
        let y = g.matmul(xv, wt)?;
        let y2 = g.mul(y, y)?;
        Ok(g.sum(y2))
    };
    let mut g = Graph::new();
    let loss = build(&mut g, &store).unwrap();
    g.backward(loss, &mut store).unwrap();
    let mut analytic = store.grads().to_vec();
    for v in analytic[0].data_mut() {
        *v *= 1.1;
    }
    let err = finite_difference_check(&mut store, &analytic, 10, 2, |s| {
        let mut g = Graph::new();
        let v = build(&mut g, s)?;
        Ok(g.value(v).item())
    })
    .unwrap();
    assert!(err > 1e-2, "error {err}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3, 4], values).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let x = random(&[2, 3], seed);
        let build = |store: &mut ParameterStore| {
            store.add("w", random(&[4, 3], seed + 1)).unwrap();
            store.add("b", random(&[4], seed + 2)).unwrap();
            store.add("gain", Tensor::filled(&[4], 1.0)).unwrap();
            store.add("bias", Tensor::zeros(&[4])).unwrap();
        };
        let (mut s1, mut s2) = (ParameterStore::new(), ParameterStore::new());
        build(&mut s1);
        build(&mut s2);
        let (mut g1, mut g2) = (Graph::new(), Graph::new());
        let l1 = layer_stack_loss(&mut g1, &s1, &x).unwrap();
        let l2 = layer_stack_loss(&mut g2, &s2, &x).unwrap();
        prop_assert_eq!(g1.value(l1).item().to_bits(), g2.value(l2).item().to_bits());
    }
}
