//! Central finite-difference checks of every differentiable op, in f64.

use std::sync::Arc;

use menisc_autograd::ops::{NormGroups, FILL};
use menisc_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Builds `sum(f(inputs) * w)` for a fixed random `w` and compares the
/// analytic gradient of every input with central differences.
fn check<F>(inputs: Vec<Tensor<f64>>, seed: u64, f: F)
where
    F: for<'g> Fn(&[Var<'g, f64>]) -> Var<'g, f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(&vars).shape()
    };
    let weights = random(&probe, &mut rng);
    let loss = |ins: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&vars);
        let w = g.constant(weights.clone());
        y.mul(&w).unwrap().sum().item()
    };

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let w = g.constant(weights.clone());
    let out = f(&vars).mul(&w).unwrap().sum();
    let grads = g.backward(out).unwrap();

    let h = 1e-6;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic.data()[k];
            let tol = 1e-6 * (1.0 + fd.abs());
            assert!((fd - a).abs() < tol, "input {i} element {k}: analytic {a} vs fd {fd}");
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&[3, 4], &mut rng), random(&[3, 4], &mut rng));
    check(vec![a.clone(), b.clone()], 2, |v| v[0].add(&v[1]).unwrap().mul(&v[1]).unwrap());
    check(vec![a.clone(), b], 3, |v| v[0].sub(&v[1]).unwrap().scale(-1.7));
    check(vec![a.clone()], 4, |v| v[0].sigmoid());
    check(vec![a.clone()], 5, |v| v[0].gelu());
    check(vec![a.map(|x| x + if x > 0.0 { 0.1 } else { -0.1 })], 6, |v| v[0].relu());
}

#[test]
fn matmul_all_transpose_combinations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = random(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, &mut rng);
        let b = random(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, &mut rng);
        check(vec![a, b], 8, move |v| v[0].matmul_t(&v[1], ta, tb).unwrap());
    }
    let x = random(&[2, 3, 4], &mut rng);
    let w = random(&[6, 4], &mut rng);
    let bias = random(&[6], &mut rng);
    check(vec![x, w, bias], 9, |v| v[0].linear(&v[1], Some(&v[2])).unwrap());
}

#[test]
fn broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[2, 3, 4], &mut rng);
    let g = random(&[3], &mut rng);
    let b = random(&[3], &mut rng);
    check(vec![x.clone(), g, b], 11, |v| v[0].affine_channels(Some(&v[1]), Some(&v[2])).unwrap());
    let y = random(&[3, 4], &mut rng);
    check(vec![x, y], 12, |v| v[0].add_broadcast(&v[1]).unwrap());
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&[2, 3, 4], &mut rng);
    check(vec![x.clone()], 14, |v| v[0].permute(&[2, 0, 1]).unwrap());
    check(vec![x.clone()], 15, |v| v[0].narrow(2, 1, 2).unwrap().pad_axis(1, 2, 1).unwrap());
    let y = random(&[2, 1, 4], &mut rng);
    check(vec![x.clone(), y], 16, |v| Var::concat(&[v[0], v[1], v[0]], 1).unwrap());
    let index = Arc::new(vec![0, 5, 5, FILL, 23, 7]);
    check(vec![x], 17, move |v| v[0].gather(index.clone(), &[2, 3]).unwrap());
}

#[test]
fn normalization_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = random(&[2, 3, 5], &mut rng);
    check(vec![x.clone()], 19, |v| v[0].normalize(2, 3, 5, NormGroups::AcrossMid, 1e-5).unwrap());
    check(vec![x.clone()], 20, |v| v[0].normalize(2, 3, 5, NormGroups::PerMid, 1e-5).unwrap());
    let (g, b) = (random(&[5], &mut rng), random(&[5], &mut rng));
    check(vec![x.clone(), g, b], 21, |v| v[0].layer_norm(&v[1], &v[2], 1e-6).unwrap());
    check(vec![x], 22, |v| v[0].scale(3.0).softmax_last().unwrap());
}

#[test]
fn conv3d_with_padding_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random(&[2, 2, 4, 3, 5], &mut rng);
    let w = random(&[3, 2, 3, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    check(vec![x.clone(), w, b], 24, |v| v[0].conv3d(&v[1], Some(&v[2]), [1, 1, 1]).unwrap());
    let w1 = random(&[4, 2, 1, 1, 1], &mut rng);
    check(vec![x.clone(), w1], 25, |v| v[0].conv3d(&v[1], None, [0, 0, 0]).unwrap());
    let w2 = random(&[2, 2, 2, 3, 1], &mut rng);
    check(vec![x, w2], 26, |v| v[0].conv3d(&v[1], None, [0, 1, 0]).unwrap());
}

#[test]
fn conv_transpose_and_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let x = random(&[2, 3, 2, 3, 2], &mut rng);
    let w = random(&[3, 2, 2, 2, 2], &mut rng);
    let b = random(&[2], &mut rng);
    check(vec![x.clone(), w, b], 28, |v| v[0].conv_transpose3d(&v[1], Some(&v[2])).unwrap());
    let w2 = random(&[3, 4, 2, 2, 1], &mut rng);
    check(vec![x, w2], 29, |v| v[0].conv_transpose3d(&v[1], None).unwrap());
    // distinct values so the argmax is stable under perturbation
    let p = Tensor::from_fn(&[1, 2, 4, 2, 2], |i| ((i * 37) % 64) as f64 * 0.1);
    check(vec![p], 30, |v| v[0].max_pool3d([2, 2, 1]).unwrap());
}

#[test]
fn bilinear_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random(&[1, 2, 3, 4], &mut rng);
    check(vec![x.clone()], 32, |v| v[0].resize_bilinear(7, 9).unwrap());
    check(vec![x], 33, |v| v[0].resize_bilinear(2, 2).unwrap());
}

#[test]
fn conv_transpose_matches_direct_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let x = random(&[1, 2, 2, 2, 1], &mut rng);
    let w = random(&[2, 3, 2, 2, 2], &mut rng);
    let g = Graph::new();
    let y = g.constant(x.clone()).conv_transpose3d(&g.constant(w.clone()), None).unwrap().value();
    assert_eq!(y.shape(), &[1, 3, 4, 4, 2]);
    for co in 0..3 {
        for o0 in 0..4 {
            for o1 in 0..4 {
                for o2 in 0..2 {
                    let (i0, i1, i2) = (o0 / 2, o1 / 2, o2 / 2);
                    let (a, b, c) = (o0 % 2, o1 % 2, o2 % 2);
                    let mut expect = 0.0;
                    for ci in 0..2 {
                        expect += x.data()[((ci * 2 + i0) * 2 + i1) + i2]
                            * w.data()[(((ci * 3 + co) * 2 + a) * 2 + b) * 2 + c];
                    }
                    let got = y.data()[((co * 4 + o0) * 4 + o1) * 2 + o2];
                    assert!((got - expect).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn frozen_leaf_receives_no_gradient() {
    let mut store = menisc_autograd::ParamStore::<f64>::new();
    let a = store.add("a", Tensor::full(&[2], 2.0)).unwrap();
    let b = store.add("b", Tensor::full(&[2], 3.0)).unwrap();
    store.set_trainable(a, false);
    let g = Graph::new();
    let y = g.param(&store, a).mul(&g.param(&store, b)).unwrap().sum();
    let grads = g.backward(y).unwrap();
    assert!(grads.param(a).is_none());
    assert_eq!(grads.param(b).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn param_used_twice_accumulates() {
    let mut store = menisc_autograd::ParamStore::<f64>::new();
    let a = store.add("a", Tensor::full(&[1], 3.0)).unwrap();
    let g = Graph::new();
    let y = g.param(&store, a).mul(&g.param(&store, a)).unwrap().sum();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.param(a).unwrap().data(), &[6.0]);
}
