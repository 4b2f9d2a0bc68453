//! Finite-difference validation of every layer type's reverse pass, plus
//! batch-norm determinism, over randomized configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;
use tensornet::gradcheck::{central_diff, max_rel_err};
use tensornet::{GraphBuilder, Mode, NetModel, Tensor};

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

/// Scalarize a model output by dotting with fixed coefficients.
fn loss_of(model: &NetModel, inputs: &BTreeMap<String, Tensor>, coeff: &[f64], train: bool) -> f64 {
    let out = if train {
        let mut m = model.clone();
        m.forward_mut(inputs, Mode::Train).unwrap().0
    } else {
        model.forward(inputs).unwrap().0
    };
    out.data().iter().zip(coeff).map(|(a, b)| a * b).sum()
}

/// Check d(loss)/d(input named `x`) and d(loss)/d(trainable params) by FD.
fn check_model(model: &NetModel, x: Tensor, train: bool, rng: &mut ChaCha12Rng) {
    let mut inputs = BTreeMap::new();
    inputs.insert("x".to_string(), x.clone());

    let out_len: usize = {
        let (out, _) = model.forward(&inputs).unwrap();
        out.numel()
    };
    let coeff: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

    // analytic pass
    let mut m = model.clone();
    let (out, cache) = m.forward_mut(&inputs, if train { Mode::Train } else { Mode::Eval }).unwrap();
    let g = Tensor::from_vec(out.shape(), coeff.clone()).unwrap();
    let grads = m.backward(&cache, &g).unwrap();

    // input gradient
    let fd_in = central_diff(
        &|v: &[f64]| {
            let mut ins = BTreeMap::new();
            ins.insert("x".to_string(), Tensor::from_vec(x.shape(), v.to_vec()).unwrap());
            loss_of(model, &ins, &coeff, train)
        },
        x.data(),
        H,
    );
    let err = max_rel_err(grads.inputs["x"].data(), &fd_in);
    assert!(err < TOL, "input grad rel err {err}");

    // parameter gradients
    for (id, slot) in model.trainable_slots() {
        let base = model.param(id, slot).clone();
        let fd = central_diff(
            &|v: &[f64]| {
                let mut m2 = model.clone();
                *m2.param_mut(id, slot) = Tensor::from_vec(base.shape(), v.to_vec()).unwrap();
                loss_of(&m2, &inputs, &coeff, train)
            },
            base.data(),
            H,
        );
        let analytic = &grads.params[id][slot];
        let err = max_rel_err(analytic.data(), &fd);
        assert!(err < TOL, "param ({id},{slot}) grad rel err {err}");
    }
}

/// Random tensor with entries bounded away from activation kinks.
fn smooth_input(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mut v: f64 = rng.random_range(-1.5..1.5);
            if v.abs() < 1e-3 {
                v += 0.01;
            }
            v
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn dense_gradients_match_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(100);
    for _ in 0..100 {
        let (inp, out) = (rng.random_range(1..6), rng.random_range(1..5));
        let n = rng.random_range(1..4);
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[inp]).unwrap();
        let y = b.dense("fc", x, out, &mut rng).unwrap();
        let model = b.finish(y).unwrap();
        check_model(&model, smooth_input(&[n, inp], &mut rng), false, &mut rng);
    }
}

#[test]
fn conv3_gradients_match_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    for i in 0..100 {
        let stride = if i % 2 == 0 { 1 } else { 2 };
        let (ic, oc) = (rng.random_range(1..3), rng.random_range(1..3));
        let d = rng.random_range(2..5);
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[ic, d, d, d]).unwrap();
        let y = b.conv3("c", x, oc, stride, &mut rng).unwrap();
        let model = b.finish(y).unwrap();
        check_model(&model, smooth_input(&[1, ic, d, d, d], &mut rng), false, &mut rng);
    }
}

#[test]
fn convt3_gradients_match_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(102);
    for i in 0..100 {
        let stride = if i % 2 == 0 { 1 } else { 2 };
        let (ic, oc) = (rng.random_range(1..3), rng.random_range(1..3));
        let d = rng.random_range(2..4);
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[ic, d, d, d]).unwrap();
        let y = b.convt3("ct", x, oc, stride, &mut rng).unwrap();
        let model = b.finish(y).unwrap();
        check_model(&model, smooth_input(&[1, ic, d, d, d], &mut rng), false, &mut rng);
    }
}

#[test]
fn activation_gradients_match_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(103);
    for i in 0..100 {
        let dim = rng.random_range(1..8);
        let n = rng.random_range(1..4);
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[dim]).unwrap();
        let y = match i % 3 {
            0 => b.elu("a", x).unwrap(),
            1 => b.relu("a", x).unwrap(),
            _ => b.sigmoid("a", x).unwrap(),
        };
        let model = b.finish(y).unwrap();
        check_model(&model, smooth_input(&[n, dim], &mut rng), false, &mut rng);
    }
}

#[test]
fn batch_norm_gradients_match_fd_in_both_modes() {
    let mut rng = ChaCha12Rng::seed_from_u64(104);
    for i in 0..100 {
        let feats = rng.random_range(1..5);
        let n = rng.random_range(2..5);
        let mut b = GraphBuilder::new();
        // follow with a dense layer so input grads flow through the norm
        let x = b.input("x", &[feats]).unwrap();
        let h = b.batch_norm("bn", x).unwrap();
        let y = b.dense("fc", h, 2, &mut rng).unwrap();
        let mut model = b.finish(y).unwrap();
        // drift the running statistics so eval mode is non-trivial
        let mut warm = BTreeMap::new();
        warm.insert("x".to_string(), smooth_input(&[4, feats], &mut rng));
        model.forward_mut(&warm, Mode::Train).unwrap();
        check_model(&model, smooth_input(&[n, feats], &mut rng), i % 2 == 0, &mut rng);
    }
}

#[test]
fn flatten_and_concat_gradients_match_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(105);
    for _ in 0..100 {
        let d = rng.random_range(2..4);
        let f2 = rng.random_range(1..4);
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[1, d, d, d]).unwrap();
        let flat = b.flatten("flat", x).unwrap();
        let other = b.input("y", &[f2]).unwrap();
        let cat = b.concat("cat", &[flat, other]).unwrap();
        let out = b.dense("fc", cat, 2, &mut rng).unwrap();
        let model = b.finish(out).unwrap();

        let xv = smooth_input(&[2, 1, d, d, d], &mut rng);
        let yv = smooth_input(&[2, f2], &mut rng);
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), xv.clone());
        inputs.insert("y".to_string(), yv.clone());

        let (out_t, cache) = model.forward(&inputs).unwrap();
        let coeff: Vec<f64> = (0..out_t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = Tensor::from_vec(out_t.shape(), coeff.clone()).unwrap();
        let grads = model.backward(&cache, &g).unwrap();

        for (name, val) in [("x", &xv), ("y", &yv)] {
            let fd = central_diff(
                &|v: &[f64]| {
                    let mut ins = inputs.clone();
                    ins.insert(name.to_string(), Tensor::from_vec(val.shape(), v.to_vec()).unwrap());
                    loss_of(&model, &ins, &coeff, false)
                },
                val.data(),
                H,
            );
            let err = max_rel_err(grads.inputs[name].data(), &fd);
            assert!(err < TOL, "{name} grad rel err {err}");
        }
    }
}

#[test]
fn composite_network_gradients_match_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(106);
    for _ in 0..10 {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[1, 4, 4, 4]).unwrap();
        let c = b.conv3("c1", x, 2, 2, &mut rng).unwrap();
        let c = b.batch_norm("bn1", c).unwrap();
        let c = b.elu("a1", c).unwrap();
        let f = b.flatten("flat", c).unwrap();
        let h = b.dense("fc1", f, 5, &mut rng).unwrap();
        let h = b.elu("a2", h).unwrap();
        let y = b.dense_xavier("fc2", h, 1, &mut rng).unwrap();
        let y = b.sigmoid("out", y).unwrap();
        let model = b.finish(y).unwrap();
        check_model(&model, smooth_input(&[3, 1, 4, 4, 4], &mut rng), true, &mut rng);
    }
}

#[test]
fn batch_norm_eval_forward_is_deterministic() {
    let mut rng = ChaCha12Rng::seed_from_u64(107);
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[4]).unwrap();
    let h = b.batch_norm("bn", x).unwrap();
    let y = b.dense("fc", h, 3, &mut rng).unwrap();
    let mut model = b.finish(y).unwrap();

    let mut inputs = BTreeMap::new();
    inputs.insert("x".to_string(), smooth_input(&[5, 4], &mut rng));
    // drift the running statistics with a few train-mode passes
    for _ in 0..3 {
        model.forward_mut(&inputs, Mode::Train).unwrap();
    }
    let (a, _) = model.forward(&inputs).unwrap();
    let (b2, _) = model.forward(&inputs).unwrap();
    assert_eq!(a, b2);
}
