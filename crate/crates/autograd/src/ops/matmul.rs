use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

struct Layout {
    batch: usize,
    rows: usize,
    cols: usize,
}

fn layout(shape: &[usize]) -> Result<Layout> {
    match *shape {
        [r, c] => Ok(Layout { batch: 1, rows: r, cols: c }),
        [b, r, c] => Ok(Layout { batch: b, rows: r, cols: c }),
        _ => Err(shape_err!("matmul operand must be rank 2 or 3, got {shape:?}")),
    }
}

fn mat<'a, T>(data: &'a [T], l: &Layout, t: bool) -> MatRef<'a, T> {
    let mr = MatRef::new(data, l.rows, l.cols);
    if t {
        mr.t()
    } else {
        mr
    }
}

fn logical(l: &Layout, t: bool) -> (usize, usize) {
    if t {
        (l.cols, l.rows)
    } else {
        (l.rows, l.cols)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// (Batched) matrix product `op(a) @ op(b)` where `op` optionally
    /// transposes the last two axes. Operands are `[M, K]` or `[B, M, K]`.
    pub fn matmul_t(&self, other: &Var<'g, T>, ta: bool, tb: bool) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (la, lb) = (layout(a.shape())?, layout(b.shape())?);
        if a.rank() != b.rank() || la.batch != lb.batch {
            return Err(shape_err!("matmul batch mismatch {:?} @ {:?}", a.shape(), b.shape()));
        }
        let (m, k) = logical(&la, ta);
        let (k2, n) = logical(&lb, tb);
        if k != k2 {
            return Err(shape_err!(
                "matmul inner mismatch {:?}{} @ {:?}{}",
                a.shape(),
                if ta { "^T" } else { "" },
                b.shape(),
                if tb { "^T" } else { "" }
            ));
        }
        let batch = la.batch;
        let (sa, sb, sc) = (la.rows * la.cols, lb.rows * lb.cols, m * n);
        let mut out = vec![T::zero(); batch * sc];
        for i in 0..batch {
            gemm(
                mat(&a.data()[i * sa..(i + 1) * sa], &la, ta),
                mat(&b.data()[i * sb..(i + 1) * sb], &lb, tb),
                T::zero(),
                &mut out[i * sc..(i + 1) * sc],
            );
        }
        let out_shape = if a.rank() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let out = Tensor::new(&out_shape, out)?;
        let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.graph().record(out, &[*self, *other], move |g, needs| {
            let gd = g.data();
            let mut da = needs[0].then(|| vec![T::zero(); batch * sa]);
            let mut db = needs[1].then(|| vec![T::zero(); batch * sb]);
            for i in 0..batch {
                let gm = MatRef::new(&gd[i * sc..(i + 1) * sc], m, n);
                let am = mat(&a.data()[i * sa..(i + 1) * sa], &la, ta);
                let bm = mat(&b.data()[i * sb..(i + 1) * sb], &lb, tb);
                if let Some(da) = da.as_mut() {
                    let dst = &mut da[i * sa..(i + 1) * sa];
                    if ta {
                        // dA = op(B) @ dC^T
                        gemm(bm, gm.t(), T::zero(), dst);
                    } else {
                        // dA = dC @ op(B)^T
                        gemm(gm, bm.t(), T::zero(), dst);
                    }
                }
                if let Some(db) = db.as_mut() {
                    let dst = &mut db[i * sb..(i + 1) * sb];
                    if tb {
                        // dB = dC^T @ op(A)
                        gemm(gm.t(), am, T::zero(), dst);
                    } else {
                        // dB = op(A)^T @ dC
                        gemm(am.t(), gm, T::zero(), dst);
                    }
                }
            }
            vec![
                da.map(|d| Tensor::new(&a_shape, d).unwrap()),
                db.map(|d| Tensor::new(&b_shape, d).unwrap()),
            ]
        }))
    }

    pub fn matmul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_t(other, false, false)
    }

    /// Fully connected layer on the last axis with a `[out, in]` weight.
    pub fn linear(&self, weight: &Var<'g, T>, bias: Option<&Var<'g, T>>) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let wshape = weight.shape();
        let (Some(&inp), [out_f, in_f]) = (shape.last(), wshape.as_slice()) else {
            return Err(shape_err!("linear on {shape:?} with weight {wshape:?}"));
        };
        if inp != *in_f {
            return Err(shape_err!("linear input {shape:?} vs weight {wshape:?}"));
        }
        let rows = self.value().numel() / inp.max(1);
        let y = self.reshape(&[rows, inp])?.matmul_t(weight, false, true)?;
        let y = match bias {
            Some(b) => y.add_bias_last(b)?,
            None => y,
        };
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = *out_f;
        y.reshape(&out_shape)
    }
}
