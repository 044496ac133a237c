use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source taps for one output coordinate of a half-pixel-centred linear
/// resampling (`align_corners = false`): `(lo, hi, weight_of_hi)`.
pub fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of a row-major `h x w` plane.
pub fn resize_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let (ty, tx) = (linear_taps(h, out_h), linear_taps(w, out_w));
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Bilinear resize of the last two axes of a `[N, C, H, W]` tensor.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let &[n, c, h, w] = x.shape() else {
            return Err(shape_err!("resize_bilinear expects [N, C, H, W], got {:?}", x.shape()));
        };
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(shape_err!("resize_bilinear with empty extent {:?} -> {out_h}x{out_w}", x.shape()));
        }
        let (ty, tx) = (linear_taps(h, out_h), linear_taps(w, out_w));
        let planes = n * c;
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        let xd = x.data();
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for &(y0, y1, fy) in &ty {
                let (fy, gy) = (T::from_f64(fy), T::from_f64(1.0 - fy));
                for &(x0, x1, fx) in &tx {
                    let (fx, gx) = (T::from_f64(fx), T::from_f64(1.0 - fx));
                    let top = src[y0 * w + x0] * gx + src[y0 * w + x1] * fx;
                    let bottom = src[y1 * w + x0] * gx + src[y1 * w + x1] * fx;
                    out.push(top * gy + bottom * fy);
                }
            }
        }
        let out = Tensor::new(&[n, c, out_h, out_w], out)?;
        let shape = x.shape().to_vec();
        Ok(self.graph().record(out, &[*self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            let d = dx.data_mut();
            let gd = g.data();
            for p in 0..planes {
                let dst = &mut d[p * h * w..(p + 1) * h * w];
                let src = &gd[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let (fy, gy) = (T::from_f64(fy), T::from_f64(1.0 - fy));
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let (fx, gx) = (T::from_f64(fx), T::from_f64(1.0 - fx));
                        let v = src[oy * out_w + ox];
                        dst[y0 * w + x0] += v * gy * gx;
                        dst[y0 * w + x1] += v * gy * fx;
                        dst[y1 * w + x0] += v * fy * gx;
                        dst[y1 * w + x1] += v * fy * fx;
                    }
                }
            }
            vec![Some(dx)]
        }))
    }
}
