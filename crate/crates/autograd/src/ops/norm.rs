use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which elements share normalization statistics when a tensor is viewed
/// as `[outer, mid, inner]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormGroups {
    /// One group per `(outer, inner)` pair, reducing over `mid`
    /// (layer norm, channel-wise layer norm, instance norm).
    AcrossMid,
    /// One group per `mid` index, reducing over `outer` and `inner`
    /// (batch norm).
    PerMid,
}

struct GroupIter {
    outer: usize,
    mid: usize,
    inner: usize,
    mode: NormGroups,
}

impl GroupIter {
    fn groups(&self) -> usize {
        match self.mode {
            NormGroups::AcrossMid => self.outer * self.inner,
            NormGroups::PerMid => self.mid,
        }
    }

    fn group_size(&self) -> usize {
        match self.mode {
            NormGroups::AcrossMid => self.mid,
            NormGroups::PerMid => self.outer * self.inner,
        }
    }

    /// Calls `f(flat_index)` for every member of group `g`.
    fn for_each(&self, g: usize, mut f: impl FnMut(usize)) {
        match self.mode {
            NormGroups::AcrossMid => {
                let (o, i) = (g / self.inner, g % self.inner);
                let base = o * self.mid * self.inner + i;
                for m in 0..self.mid {
                    f(base + m * self.inner);
                }
            }
            NormGroups::PerMid => {
                for o in 0..self.outer {
                    let base = (o * self.mid + g) * self.inner;
                    for i in 0..self.inner {
                        f(base + i);
                    }
                }
            }
        }
    }
}

/// Per-group mean and biased variance.
pub fn group_stats<T: Scalar>(
    x: &Tensor<T>,
    outer: usize,
    mid: usize,
    inner: usize,
    mode: NormGroups,
) -> (Vec<f64>, Vec<f64>) {
    let it = GroupIter { outer, mid, inner, mode };
    let n = it.group_size() as f64;
    let d = x.data();
    (0..it.groups())
        .map(|g| {
            let mut sum = 0.0;
            it.for_each(g, |k| sum += d[k].as_f64());
            let mean = sum / n;
            let mut sq = 0.0;
            it.for_each(g, |k| {
                let c = d[k].as_f64() - mean;
                sq += c * c;
            });
            (mean, sq / n)
        })
        .unzip()
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Standardizes each group to zero mean and unit (biased) variance.
    pub fn normalize(
        &self,
        outer: usize,
        mid: usize,
        inner: usize,
        mode: NormGroups,
        eps: f64,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        if outer * mid * inner != x.numel() || x.numel() == 0 {
            return Err(shape_err!("normalize view {outer}x{mid}x{inner} on {:?}", x.shape()));
        }
        let it = GroupIter { outer, mid, inner, mode };
        let (means, vars) = group_stats(&x, outer, mid, inner, mode);
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        {
            let (xd, hd) = (x.data(), xhat.data_mut());
            for g in 0..it.groups() {
                let (m, s) = (means[g], inv_std[g]);
                it.for_each(g, |k| hd[k] = T::from_f64((xd[k].as_f64() - m) * s));
            }
        }
        let y = xhat.clone();
        Ok(self.graph().record(y, &[*self], move |g, _| {
            // dx = inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
            let n = it.group_size() as f64;
            let (gd, hd) = (g.data(), xhat.data());
            let mut dx = Tensor::zeros(g.shape());
            let dd = dx.data_mut();
            for grp in 0..it.groups() {
                let (mut s1, mut s2) = (0.0, 0.0);
                it.for_each(grp, |k| {
                    let dy = gd[k].as_f64();
                    s1 += dy;
                    s2 += dy * hd[k].as_f64();
                });
                let (m1, m2, s) = (s1 / n, s2 / n, inv_std[grp]);
                it.for_each(grp, |k| {
                    dd[k] = T::from_f64(s * (gd[k].as_f64() - m1 - hd[k].as_f64() * m2));
                });
            }
            vec![Some(dx)]
        }))
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&self, gamma: &Var<'g, T>, beta: &Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| shape_err!("layer_norm on scalar"))?;
        let rows = self.value().numel() / n.max(1);
        self.normalize(rows, n, 1, NormGroups::AcrossMid, eps)?.affine_last(gamma, beta)
    }

    /// Layer norm over the channel axis of a `[N, C, ...]` tensor.
    pub fn layer_norm_channels(&self, gamma: &Var<'g, T>, beta: &Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(shape_err!("layer_norm_channels on {shape:?}"));
        }
        let inner: usize = shape[2..].iter().product();
        self.normalize(shape[0], shape[1], inner, NormGroups::AcrossMid, eps)?
            .affine_channels(Some(gamma), Some(beta))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| shape_err!("softmax on scalar"))?;
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let y = out.clone();
        Ok(self.graph().record(out, &[*self], move |g, _| {
            let mut dx = g.clone();
            for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                let dot: T = drow.iter().zip(yrow).map(|(&d, &p)| d * p).sum();
                for (d, &p) in drow.iter_mut().zip(yrow) {
                    *d = p * (*d - dot);
                }
            }
            vec![Some(dx)]
        }))
    }
}
