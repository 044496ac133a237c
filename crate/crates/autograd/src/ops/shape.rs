use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};

/// Marks an output element of [`Var::gather`] as zero-filled.
pub const FILL: usize = usize::MAX;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if numel(shape) != x.numel() {
            return Err(shape_err!("reshape {:?} -> {shape:?}", x.shape()));
        }
        let out = x.as_ref().clone().reshape(shape)?;
        let src_shape = x.shape().to_vec();
        Ok(self.graph().record(out, &[*self], move |g, _| {
            vec![Some(g.clone().reshape(&src_shape).unwrap())]
        }))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == FILL`. The
    /// backward pass scatter-adds, so repeated indices are allowed.
    pub fn gather(&self, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if index.len() != numel(shape) {
            return Err(shape_err!("gather index of {} for shape {shape:?}", index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i != FILL && i >= x.numel()) {
            return Err(shape_err!("gather index {bad} out of range for {:?}", x.shape()));
        }
        let xd = x.data();
        let data = index.iter().map(|&i| if i == FILL { T::zero() } else { xd[i] }).collect();
        let out = Tensor::new(shape, data)?;
        let src_shape = x.shape().to_vec();
        Ok(self.graph().record(out, &[*self], move |g, _| {
            let mut dx = Tensor::zeros(&src_shape);
            let d = dx.data_mut();
            for (&i, &v) in index.iter().zip(g.data()) {
                if i != FILL {
                    d[i] += v;
                }
            }
            vec![Some(dx)]
        }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {perm:?} for {shape:?}"));
        }
        let src_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let step: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let n = numel(&out_shape);
        let mut index = Vec::with_capacity(n);
        let mut pos = vec![0usize; out_shape.len()];
        let mut offset = 0usize;
        for _ in 0..n {
            index.push(offset);
            for ax in (0..out_shape.len()).rev() {
                pos[ax] += 1;
                offset += step[ax];
                if pos[ax] < out_shape[ax] {
                    break;
                }
                offset -= step[ax] * pos[ax];
                pos[ax] = 0;
            }
        }
        self.gather(Arc::new(index), &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'g, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(shape_err!("transpose_last on rank {r}"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err!("narrow axis {axis} [{start}, {}) of {shape:?}", start + len));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.graph().record(out, &[*self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            let d = dx.data_mut();
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                d[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    /// Zero padding along `axis`.
    pub fn pad_axis(&self, axis: usize, before: usize, after: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("pad axis {axis} of {shape:?}"));
        }
        if before == 0 && after == 0 {
            return Ok(*self);
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let new_extent = extent + before + after;
        let mut out_shape = shape.clone();
        out_shape[axis] = new_extent;
        let mut out = Tensor::zeros(&out_shape);
        {
            let d = out.data_mut();
            for o in 0..outer {
                let dst = (o * new_extent + before) * inner;
                d[dst..dst + extent * inner].copy_from_slice(&x.data()[o * extent * inner..(o + 1) * extent * inner]);
            }
        }
        Ok(self.graph().record(out, &[*self], move |g, _| {
            let mut dx = Vec::with_capacity(outer * extent * inner);
            for o in 0..outer {
                let src = (o * new_extent + before) * inner;
                dx.extend_from_slice(&g.data()[src..src + extent * inner]);
            }
            vec![Some(Tensor::new(&shape, dx).unwrap())]
        }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} of {base:?}"));
        }
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(shape_err!("concat {:?} with {:?} on axis {axis}", base, s));
            }
        }
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                data.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.graph().record(out, parts, move |g, needs| {
            let mut grads: Vec<Option<Vec<T>>> =
                needs.iter().zip(&extents).map(|(&n, &e)| n.then(|| Vec::with_capacity(outer * e * inner))).collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..outer {
                for (slot, &e) in grads.iter_mut().zip(&extents) {
                    if let Some(buf) = slot {
                        buf.extend_from_slice(&gd[off..off + e * inner]);
                    }
                    off += e * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| d.map(|d| Tensor::new(s, d).unwrap()))
                .collect()
        }))
    }
}
