//! Volumetric convolution, stride-k transposed convolution and max pooling
//! on `[N, C, D0, D1, D2]` tensors. Two-dimensional layers use a unit third
//! axis.

use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

fn dims5(shape: &[usize], what: &str) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(shape).map_err(|_| shape_err!("{what} expects a rank-5 tensor, got {shape:?}"))
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn s_out(&self) -> usize {
        self.out.iter().product()
    }

    fn s_in(&self) -> usize {
        self.input.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Valid output range along one axis for kernel offset `k`.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let p = self.pad[axis];
        let lo = p.saturating_sub(k);
        let hi = (self.input[axis] + p).saturating_sub(k).min(self.out[axis]);
        (lo, hi.max(lo))
    }

    /// Unfolds one sample `[Cin, D0, D1, D2]` into `[K, S_out]`.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let [d0, d1, d2] = self.input;
        let [k0, k1, k2] = self.kernel;
        let [_, o1, o2] = self.out;
        let [p0, p1, p2] = self.pad;
        let s = self.s_out();
        col.fill(T::zero());
        let mut row = 0;
        for c in 0..self.cin {
            let xc = &x[c * d0 * d1 * d2..(c + 1) * d0 * d1 * d2];
            for a in 0..k0 {
                let (lo0, hi0) = self.valid(0, a);
                for b in 0..k1 {
                    let (lo1, hi1) = self.valid(1, b);
                    for e in 0..k2 {
                        let (lo2, hi2) = self.valid(2, e);
                        let dst = &mut col[row * s..(row + 1) * s];
                        for i0 in lo0..hi0 {
                            let s0 = i0 + a - p0;
                            for i1 in lo1..hi1 {
                                let s1 = i1 + b - p1;
                                let src = (s0 * d1 + s1) * d2 + lo2 + e - p2;
                                let o = (i0 * o1 + i1) * o2;
                                dst[o + lo2..o + hi2].copy_from_slice(&xc[src..src + (hi2 - lo2)]);
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: accumulates `[K, S_out]` into a sample.
    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T]) {
        let [d0, d1, d2] = self.input;
        let [k0, k1, k2] = self.kernel;
        let [_, o1, o2] = self.out;
        let [p0, p1, p2] = self.pad;
        let s = self.s_out();
        let mut row = 0;
        for c in 0..self.cin {
            let xc = &mut x[c * d0 * d1 * d2..(c + 1) * d0 * d1 * d2];
            for a in 0..k0 {
                let (lo0, hi0) = self.valid(0, a);
                for b in 0..k1 {
                    let (lo1, hi1) = self.valid(1, b);
                    for e in 0..k2 {
                        let (lo2, hi2) = self.valid(2, e);
                        let src = &col[row * s..(row + 1) * s];
                        for i0 in lo0..hi0 {
                            let s0 = i0 + a - p0;
                            for i1 in lo1..hi1 {
                                let s1 = i1 + b - p1;
                                let dst = (s0 * d1 + s1) * d2 + lo2 + e - p2;
                                let o = (i0 * o1 + i1) * o2;
                                for (d, &v) in xc[dst..dst + (hi2 - lo2)].iter_mut().zip(&src[o + lo2..o + hi2]) {
                                    *d += v;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Stride-1 convolution with zero padding. Weight is
    /// `[Cout, Cin, k0, k1, k2]`, bias `[Cout]`.
    pub fn conv3d(&self, weight: &Var<'g, T>, bias: Option<&Var<'g, T>>, pad: [usize; 3]) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let [n, cin, d0, d1, d2] = dims5(x.shape(), "conv3d input")?;
        let [cout, wcin, k0, k1, k2] = dims5(w.shape(), "conv3d weight")?;
        if wcin != cin {
            return Err(shape_err!("conv3d weight {:?} for input {:?}", w.shape(), x.shape()));
        }
        let input = [d0, d1, d2];
        let kernel = [k0, k1, k2];
        let mut out_dims = [0; 3];
        for i in 0..3 {
            if input[i] + 2 * pad[i] < kernel[i] {
                return Err(shape_err!("conv3d kernel {kernel:?} larger than padded input {:?}", x.shape()));
            }
            out_dims[i] = input[i] + 2 * pad[i] - kernel[i] + 1;
        }
        let geom = ConvGeom { cin, input, kernel, pad, out: out_dims };
        let (k, s, s_in) = (geom.k(), geom.s_out(), geom.s_in());
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            if b.numel() != cout {
                return Err(shape_err!("conv3d bias {:?} for {cout} channels", b.shape()));
            }
        }

        let mut out = vec![T::zero(); n * cout * s];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * s] };
        for i in 0..n {
            let xn = &x.data()[i * cin * s_in..(i + 1) * cin * s_in];
            let cols: &[T] = if geom.is_pointwise() {
                xn
            } else {
                geom.im2col(xn, &mut col);
                &col
            };
            let dst = &mut out[i * cout * s..(i + 1) * cout * s];
            gemm(MatRef::new(w.data(), cout, k), MatRef::new(cols, k, s), T::zero(), dst);
            if let Some(b) = &bv {
                for (row, &bias) in dst.chunks_mut(s).zip(b.data()) {
                    for v in row {
                        *v += bias;
                    }
                }
            }
        }
        let out = Tensor::new(&[n, cout, out_dims[0], out_dims[1], out_dims[2]], out)?;

        let mut parents = vec![*self, *weight];
        parents.extend(bias.copied());
        let (x_shape, w_shape) = (x.shape().to_vec(), w.shape().to_vec());
        Ok(self.graph().record(out, &parents, move |g, needs| {
            let gd = g.data();
            let mut dx = needs[0].then(|| vec![T::zero(); n * cin * s_in]);
            let mut dw = needs[1].then(|| vec![T::zero(); cout * k]);
            let mut col = vec![T::zero(); if geom.is_pointwise() { 0 } else { k * s }];
            let mut dcol = vec![T::zero(); if dx.is_some() && !geom.is_pointwise() { k * s } else { 0 }];
            for i in 0..n {
                let gn = MatRef::new(&gd[i * cout * s..(i + 1) * cout * s], cout, s);
                let xn = &x.data()[i * cin * s_in..(i + 1) * cin * s_in];
                if let Some(dw) = dw.as_mut() {
                    let cols: &[T] = if geom.is_pointwise() {
                        xn
                    } else {
                        geom.im2col(xn, &mut col);
                        &col
                    };
                    gemm(gn, MatRef::new(cols, k, s).t(), T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxn = &mut dx[i * cin * s_in..(i + 1) * cin * s_in];
                    if geom.is_pointwise() {
                        gemm(MatRef::new(w.data(), cout, k).t(), gn, T::zero(), dxn);
                    } else {
                        gemm(MatRef::new(w.data(), cout, k).t(), gn, T::zero(), &mut dcol);
                        geom.col2im(&dcol, dxn);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(&x_shape, d).unwrap()),
                dw.map(|d| Tensor::new(&w_shape, d).unwrap()),
            ];
            if parents_has_bias(needs) {
                grads.push(needs[2].then(|| channel_sums(gd, n, cout, s)));
            }
            grads
        }))
    }

    /// Transposed convolution whose stride equals its kernel size, so
    /// output windows do not overlap. Weight is `[Cin, Cout, k0, k1, k2]`.
    pub fn conv_transpose3d(&self, weight: &Var<'g, T>, bias: Option<&Var<'g, T>>) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let [n, cin, d0, d1, d2] = dims5(x.shape(), "conv_transpose3d input")?;
        let [wcin, cout, k0, k1, k2] = dims5(w.shape(), "conv_transpose3d weight")?;
        if wcin != cin {
            return Err(shape_err!("conv_transpose3d weight {:?} for input {:?}", w.shape(), x.shape()));
        }
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            if b.numel() != cout {
                return Err(shape_err!("conv_transpose3d bias {:?} for {cout} channels", b.shape()));
            }
        }
        let kvol = k0 * k1 * k2;
        let s_in = d0 * d1 * d2;
        let (e0, e1, e2) = (d0 * k0, d1 * k1, d2 * k2);
        let s_out = e0 * e1 * e2;
        let rows = cout * kvol;
        // scatter[r * s_in + s] = flat output offset (within one sample) for tmp row r, input voxel s
        let mut scatter = vec![0usize; rows * s_in];
        for co in 0..cout {
            for a in 0..k0 {
                for b in 0..k1 {
                    for c in 0..k2 {
                        let r = co * kvol + (a * k1 + b) * k2 + c;
                        for i0 in 0..d0 {
                            for i1 in 0..d1 {
                                for i2 in 0..d2 {
                                    let s = (i0 * d1 + i1) * d2 + i2;
                                    scatter[r * s_in + s] =
                                        co * s_out + ((i0 * k0 + a) * e1 + (i1 * k1 + b)) * e2 + i2 * k2 + c;
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut out = vec![T::zero(); n * cout * s_out];
        let mut tmp = vec![T::zero(); rows * s_in];
        for i in 0..n {
            let xn = &x.data()[i * cin * s_in..(i + 1) * cin * s_in];
            gemm(MatRef::new(w.data(), cin, rows).t(), MatRef::new(xn, cin, s_in), T::zero(), &mut tmp);
            let dst = &mut out[i * cout * s_out..(i + 1) * cout * s_out];
            for (&o, &v) in scatter.iter().zip(&tmp) {
                dst[o] = v;
            }
            if let Some(b) = &bv {
                for (row, &bias) in dst.chunks_mut(s_out).zip(b.data()) {
                    for v in row {
                        *v += bias;
                    }
                }
            }
        }
        let out = Tensor::new(&[n, cout, e0, e1, e2], out)?;
        let mut parents = vec![*self, *weight];
        parents.extend(bias.copied());
        let (x_shape, w_shape) = (x.shape().to_vec(), w.shape().to_vec());
        Ok(self.graph().record(out, &parents, move |g, needs| {
            let gd = g.data();
            let mut dx = needs[0].then(|| vec![T::zero(); n * cin * s_in]);
            let mut dw = needs[1].then(|| vec![T::zero(); cin * rows]);
            let mut dtmp = vec![T::zero(); rows * s_in];
            for i in 0..n {
                let gn = &gd[i * cout * s_out..(i + 1) * cout * s_out];
                for (t, &o) in dtmp.iter_mut().zip(&scatter) {
                    *t = gn[o];
                }
                let dt = MatRef::new(&dtmp, rows, s_in);
                if let Some(dx) = dx.as_mut() {
                    gemm(MatRef::new(w.data(), cin, rows), dt, T::zero(), &mut dx[i * cin * s_in..(i + 1) * cin * s_in]);
                }
                if let Some(dw) = dw.as_mut() {
                    let xn = &x.data()[i * cin * s_in..(i + 1) * cin * s_in];
                    gemm(MatRef::new(xn, cin, s_in), dt.t(), T::one(), dw);
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(&x_shape, d).unwrap()),
                dw.map(|d| Tensor::new(&w_shape, d).unwrap()),
            ];
            if parents_has_bias(needs) {
                grads.push(needs[2].then(|| channel_sums(gd, n, cout, s_out)));
            }
            grads
        }))
    }

    /// Max pooling with window equal to stride; extents must divide evenly.
    pub fn max_pool3d(&self, window: [usize; 3]) -> Result<Var<'g, T>> {
        let x = self.value();
        let [n, c, d0, d1, d2] = dims5(x.shape(), "max_pool3d input")?;
        let [w0, w1, w2] = window;
        if w0 == 0 || w1 == 0 || w2 == 0 || d0 % w0 != 0 || d1 % w1 != 0 || d2 % w2 != 0 {
            return Err(shape_err!("max_pool3d window {window:?} does not divide {:?}", x.shape()));
        }
        let (o0, o1, o2) = (d0 / w0, d1 / w1, d2 / w2);
        let s_in = d0 * d1 * d2;
        let total = n * c * o0 * o1 * o2;
        let mut out = Vec::with_capacity(total);
        let mut argmax = Vec::with_capacity(total);
        let xd = x.data();
        for nc in 0..n * c {
            let base = nc * s_in;
            for i0 in 0..o0 {
                for i1 in 0..o1 {
                    for i2 in 0..o2 {
                        let mut best = T::neg_infinity();
                        let mut best_idx = base;
                        for a in 0..w0 {
                            for b in 0..w1 {
                                let row = base + ((i0 * w0 + a) * d1 + i1 * w1 + b) * d2 + i2 * w2;
                                for e in 0..w2 {
                                    let v = xd[row + e];
                                    if v > best || best_idx == base && best == T::neg_infinity() {
                                        best = v;
                                        best_idx = row + e;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c, o0, o1, o2], out)?;
        let x_shape = x.shape().to_vec();
        Ok(self.graph().record(out, &[*self], move |g, _| {
            let mut dx = Tensor::zeros(&x_shape);
            let d = dx.data_mut();
            for (&idx, &v) in argmax.iter().zip(g.data()) {
                d[idx] += v;
            }
            vec![Some(dx)]
        }))
    }
}

fn parents_has_bias(needs: &[bool]) -> bool {
    needs.len() == 3
}

fn channel_sums<T: Scalar>(gd: &[T], n: usize, c: usize, s: usize) -> Tensor<T> {
    let mut acc = vec![T::zero(); c];
    for i in 0..n {
        for (ch, slot) in acc.iter_mut().enumerate() {
            let base = (i * c + ch) * s;
            *slot += gd[base..base + s].iter().copied().sum::<T>();
        }
    }
    Tensor::new(&[c], acc).unwrap()
}
