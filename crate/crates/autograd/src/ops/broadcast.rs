use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    /// Per-index scale and shift along the middle axis of `x` viewed as
    /// `[outer, mid, inner]`: `y = x * gamma[m] + beta[m]`.
    pub fn scale_shift(
        &self,
        gamma: Option<&Var<'g, T>>,
        beta: Option<&Var<'g, T>>,
        outer: usize,
        mid: usize,
        inner: usize,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        if outer * mid * inner != x.numel() {
            return Err(shape_err!("scale_shift view {outer}x{mid}x{inner} on {:?}", x.shape()));
        }
        let gv = gamma.map(|g| g.value());
        let bv = beta.map(|b| b.value());
        for t in gv.iter().chain(bv.iter()) {
            if t.numel() != mid {
                return Err(shape_err!("scale_shift parameter {:?} for mid extent {mid}", t.shape()));
            }
        }
        let mut out = x.as_ref().clone();
        {
            let o = out.data_mut();
            for a in 0..outer {
                for m in 0..mid {
                    let s = gv.as_ref().map_or(T::one(), |g| g.data()[m]);
                    let b = bv.as_ref().map_or(T::zero(), |b| b.data()[m]);
                    let base = (a * mid + m) * inner;
                    for v in &mut o[base..base + inner] {
                        *v = *v * s + b;
                    }
                }
            }
        }
        let mut parents = vec![*self];
        parents.extend(gamma.copied());
        parents.extend(beta.copied());
        let has_gamma = gamma.is_some();
        Ok(self.graph().record(out, &parents, move |g, needs| {
            let gd = g.data();
            let mut grads = Vec::with_capacity(3);
            grads.push(needs[0].then(|| {
                let mut dx = g.clone();
                if let Some(gam) = &gv {
                    let d = dx.data_mut();
                    for a in 0..outer {
                        for m in 0..mid {
                            let s = gam.data()[m];
                            let base = (a * mid + m) * inner;
                            for v in &mut d[base..base + inner] {
                                *v *= s;
                            }
                        }
                    }
                }
                dx
            }));
            let reduce = |weighted: bool| {
                let mut acc = vec![T::zero(); mid];
                for a in 0..outer {
                    for (m, slot) in acc.iter_mut().enumerate() {
                        let base = (a * mid + m) * inner;
                        let gs = &gd[base..base + inner];
                        if weighted {
                            let xs = &x.data()[base..base + inner];
                            *slot += gs.iter().zip(xs).map(|(&d, &v)| d * v).sum::<T>();
                        } else {
                            *slot += gs.iter().copied().sum::<T>();
                        }
                    }
                }
                acc
            };
            let mut k = 1;
            if has_gamma {
                let shape = gv.as_ref().unwrap().shape().to_vec();
                grads.push(needs[k].then(|| Tensor::new(&shape, reduce(true)).unwrap()));
                k += 1;
            }
            if let Some(b) = &bv {
                grads.push(needs[k].then(|| Tensor::new(b.shape(), reduce(false)).unwrap()));
            }
            grads
        }))
    }

    /// Adds `bias` along the last axis.
    pub fn add_bias_last(&self, bias: &Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| shape_err!("add_bias_last on scalar"))?;
        self.scale_shift(None, Some(bias), self.value().numel() / n.max(1), n, 1)
    }

    /// `x * gamma + beta` along the last axis.
    pub fn affine_last(&self, gamma: &Var<'g, T>, beta: &Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| shape_err!("affine_last on scalar"))?;
        self.scale_shift(Some(gamma), Some(beta), self.value().numel() / n.max(1), n, 1)
    }

    /// Per-channel affine on a `[N, C, ...]` tensor.
    pub fn affine_channels(
        &self,
        gamma: Option<&Var<'g, T>>,
        beta: Option<&Var<'g, T>>,
    ) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(shape_err!("affine_channels needs [N, C, ...], got {shape:?}"));
        }
        let inner: usize = shape[2..].iter().product();
        self.scale_shift(gamma, beta, shape[0], shape[1], inner)
    }

    /// Adds `y` to every leading slice of `self`: `self` is viewed as
    /// `[outer, y.numel()]`.
    pub fn add_broadcast(&self, y: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (xv, yv) = (self.value(), y.value());
        let n = yv.numel();
        if n == 0 || xv.numel() % n != 0 {
            return Err(shape_err!("add_broadcast {:?} + {:?}", xv.shape(), yv.shape()));
        }
        let mut out = xv.as_ref().clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (a, &b) in chunk.iter_mut().zip(yv.data()) {
                *a += b;
            }
        }
        let yshape = yv.shape().to_vec();
        Ok(self.graph().record(out, &[*self, *y], move |g, needs| {
            let dy = needs[1].then(|| {
                let mut acc = vec![T::zero(); n];
                for chunk in g.data().chunks(n) {
                    for (a, &b) in acc.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                Tensor::new(&yshape, acc).unwrap()
            });
            vec![needs[0].then(|| g.clone()), dy]
        }))
    }
}
