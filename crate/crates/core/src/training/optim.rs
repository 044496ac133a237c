use std::collections::HashMap;

use menisc_autograd::{Gradients, ParamId, ParamStore, Scalar};

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that received a
    /// gradient; frozen parameters are never written.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = grads.params().map(|(id, _)| id).collect();
        for id in ids {
            if !store.param(id).trainable {
                continue;
            }
            let g = grads.param(id).expect("listed gradient");
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let value = store.value_mut(id);
            for (((w, &gi), mi), vi) in value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use menisc_autograd::{Graph, Tensor};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full(&[1], 1.0)).unwrap();
        let b = store.add("b", Tensor::full(&[1], 1.0)).unwrap();
        store.set_trainable(b, false);
        let g = Graph::new();
        let loss = g.param(&store, a).mul(&g.param(&store, b)).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut store, &grads);
        // bias-corrected first step is lr * sign(grad)
        assert!((store.value(a).data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(store.value(b).data()[0], 1.0);
    }
}
