use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{op}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x + y);
        Ok(self.graph().record(out, &[*self, *other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        }))
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x - y);
        Ok(self.graph().record(out, &[*self, *other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        }))
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x * y);
        Ok(self.graph().record(out, &[*self, *other], move |g, needs| {
            vec![
                needs[0].then(|| zip_map(g, &b, |d, y| d * y)),
                needs[1].then(|| zip_map(g, &a, |d, x| d * x)),
            ]
        }))
    }

    pub fn scale(&self, factor: f64) -> Var<'g, T> {
        let c = T::from_f64(factor);
        let out = self.value().map(|v| v * c);
        self.graph().record(out, &[*self], move |g, _| vec![Some(g.map(|d| d * c))])
    }

    pub fn relu(&self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.graph().record(out, &[*self], move |g, _| {
            vec![Some(zip_map(g, &x, |d, v| if v > T::zero() { d } else { T::zero() }))]
        })
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        let out = self.value().map(sigmoid);
        let y = out.clone();
        self.graph().record(out, &[*self], move |g, _| {
            vec![Some(zip_map(g, &y, |d, s| d * s * (T::one() - s)))]
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| T::from_f64(gelu(v.as_f64())));
        self.graph().record(out, &[*self], move |g, _| {
            vec![Some(zip_map(g, &x, |d, v| d * T::from_f64(gelu_grad(v.as_f64()))))]
        })
    }

    /// Sum of all elements, as a one-element tensor of shape `[]`.
    pub fn sum(&self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph().record(out, &[*self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&self) -> Var<'g, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_reference_values() {
        // torch.nn.functional.gelu(torch.tensor([-1., 0., 1., 2.]), approximate="none")
        let expected = [-0.158_655_253_931_457_05, 0.0, 0.841_344_746_068_542_9, 1.954_499_736_103_642];
        for (x, e) in [-1.0, 0.0, 1.0, 2.0].iter().zip(expected) {
            assert!((gelu(*x) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for x in [-2.5, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
