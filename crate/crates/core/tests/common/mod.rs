#![allow(dead_code)]

use menisc_autograd::{Graph, ParamStore, Tensor, Var};
use menisc_core::volume::{BinaryMask, Geometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn mask_from(shape: [usize; 3], spacing: [f64; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> BinaryMask {
    let g = Geometry::with_default_axes(shape, spacing).unwrap();
    BinaryMask::from_fn(g, |x, y, z| f(x, y, z))
}

/// Compares analytic parameter gradients with central differences on up
/// to `per_param` entries of every trainable parameter whose name passes
/// `select`. Returns the number of entries checked.
pub fn check_param_grads<F>(
    store: &mut ParamStore<f64>,
    per_param: usize,
    tol: f64,
    select: impl Fn(&str) -> bool,
    loss: F,
) -> usize
where
    F: for<'g> Fn(&ParamStore<f64>, &'g Graph<f64>) -> Var<'g, f64>,
{
    let g = Graph::new();
    let l = loss(store, &g);
    let grads = g.backward(l).unwrap();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable && select(&p.name))
        .map(|(id, p)| (id, p.name.clone(), p.value.numel()))
        .collect();
    let eval = |s: &ParamStore<f64>| {
        let g = Graph::inference();
        loss(s, &g).item()
    };
    let h = 1e-6;
    let mut checked = 0;
    for (id, name, n) in ids {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let picks: Vec<usize> = if n <= per_param { (0..n).collect() } else { (0..per_param).map(|i| i * (n - 1) / (per_param - 1).max(1)).collect() };
        for k in picks {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.data()[k];
            assert!((fd - a).abs() < tol * (1.0 + fd.abs()), "{name}[{k}]: analytic {a} vs fd {fd}");
            checked += 1;
        }
    }
    checked
}
