//! Parameter initialisation and named-layer helpers shared by the models.

use menisc_autograd::ops::NormGroups;
use menisc_autograd::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Per-pass state: whether batch statistics are used, and the statistics
/// collected by batch-norm layers for the running averages.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    pub train: bool,
    pub batch_stats: Vec<BatchStats>,
}

#[derive(Clone, Debug)]
pub struct BatchStats {
    pub layer: String,
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running averages.
    pub var: Vec<f64>,
}

impl ForwardCtx {
    pub fn train() -> Self {
        Self { train: true, batch_stats: Vec::new() }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}

pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..=bound)))
}

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * std)
    })
}

/// `weight [out, in]` and optional `bias [out]`, uniform in
/// `±1/sqrt(in)`.
pub fn add_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    inp: usize,
    out: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let bound = 1.0 / (inp as f64).sqrt();
    store.add(format!("{name}.weight"), uniform(&[out, inp], bound, rng))?;
    if bias {
        store.add(format!("{name}.bias"), uniform(&[out], bound, rng))?;
    }
    Ok(())
}

/// Convolution weight `[out, in, k...]` with He-uniform initialisation
/// and a zero bias.
pub fn add_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    inp: usize,
    out: usize,
    kernel: &[usize],
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let fan_in = inp * kernel.iter().product::<usize>();
    let mut shape = vec![out, inp];
    shape.extend_from_slice(kernel);
    store.add(format!("{name}.weight"), uniform(&shape, (6.0 / fan_in as f64).sqrt(), rng))?;
    if bias {
        store.add(format!("{name}.bias"), Tensor::zeros(&[out]))?;
    }
    Ok(())
}

pub fn add_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<()> {
    store.add(format!("{name}.weight"), Tensor::full(&[dim], T::one()))?;
    store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
    Ok(())
}

pub fn param<'g, T: Scalar>(g: &'g Graph<T>, store: &ParamStore<T>, name: &str) -> Result<Var<'g, T>> {
    Ok(g.param_by_name(store, name)?)
}

fn optional<'g, T: Scalar>(g: &'g Graph<T>, store: &ParamStore<T>, name: &str) -> Option<Var<'g, T>> {
    store.id(name).ok().map(|id| g.param(store, id))
}

pub fn linear<'g, T: Scalar>(g: &'g Graph<T>, store: &ParamStore<T>, name: &str, x: &Var<'g, T>) -> Result<Var<'g, T>> {
    let w = param(g, store, &format!("{name}.weight"))?;
    let b = optional(g, store, &format!("{name}.bias"));
    Ok(x.linear(&w, b.as_ref())?)
}

pub fn layer_norm<'g, T: Scalar>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: &Var<'g, T>,
    eps: f64,
) -> Result<Var<'g, T>> {
    let w = param(g, store, &format!("{name}.weight"))?;
    let b = param(g, store, &format!("{name}.bias"))?;
    Ok(x.layer_norm(&w, &b, eps)?)
}

/// Layer norm across channels of a `[N, C, ...]` map.
pub fn layer_norm_channels<'g, T: Scalar>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: &Var<'g, T>,
    eps: f64,
) -> Result<Var<'g, T>> {
    let w = param(g, store, &format!("{name}.weight"))?;
    let b = param(g, store, &format!("{name}.bias"))?;
    Ok(x.layer_norm_channels(&w, &b, eps)?)
}

pub fn conv3d<'g, T: Scalar>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: &Var<'g, T>,
    pad: [usize; 3],
) -> Result<Var<'g, T>> {
    let w = param(g, store, &format!("{name}.weight"))?;
    let b = optional(g, store, &format!("{name}.bias"));
    Ok(x.conv3d(&w, b.as_ref(), pad)?)
}

/// Batch norm over a `[N, C, ...]` map. In training mode batch statistics
/// are used and recorded in `ctx`; otherwise the running buffers
/// `{name}.running_mean` / `{name}.running_var` are applied.
pub fn batch_norm<'g, T: Scalar>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: &Var<'g, T>,
    eps: f64,
    ctx: &mut ForwardCtx,
) -> Result<Var<'g, T>> {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let gamma = param(g, store, &format!("{name}.weight"))?;
    let beta = param(g, store, &format!("{name}.bias"))?;
    let normalized = if ctx.train {
        let (mean, var) = menisc_autograd::ops::group_stats(&x.value(), n, c, inner, NormGroups::PerMid);
        let m = (n * inner) as f64;
        let unbiased = var.iter().map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v }).collect();
        ctx.batch_stats.push(BatchStats { layer: name.to_string(), mean, var: unbiased });
        x.normalize(n, c, inner, NormGroups::PerMid, eps)?
    } else {
        let rm = store.buffer(&format!("{name}.running_mean"))?;
        let rv = store.buffer(&format!("{name}.running_var"))?;
        let inv: Vec<T> = rv.data().iter().map(|v| T::from_f64(1.0 / (v.as_f64() + eps).sqrt())).collect();
        let shift: Vec<T> = rm.data().iter().zip(&inv).map(|(&m, &s)| -m * s).collect();
        let scale = g.constant(Tensor::new(&[c], inv)?);
        let shift = g.constant(Tensor::new(&[c], shift)?);
        x.affine_channels(Some(&scale), Some(&shift))?
    };
    Ok(normalized.affine_channels(Some(&gamma), Some(&beta))?)
}

/// Folds recorded batch statistics into the running buffers.
pub fn update_running_stats<T: Scalar>(store: &mut ParamStore<T>, stats: &[BatchStats], momentum: f64) -> Result<()> {
    for s in stats {
        for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let buf = store.buffer_mut(&format!("{}.{suffix}", s.layer))?;
            for (b, &v) in buf.data_mut().iter_mut().zip(values.iter()) {
                *b = T::from_f64((1.0 - momentum) * b.as_f64() + momentum * v);
            }
        }
    }
    Ok(())
}

/// Number of scalars in the parameters whose name starts with `prefix`,
/// optionally only the trainable ones.
pub fn count_prefix<T: Scalar>(store: &ParamStore<T>, prefix: &str, trainable_only: bool) -> usize {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix) && (!trainable_only || p.trainable))
        .map(|(_, p)| p.value.numel())
        .sum()
}
