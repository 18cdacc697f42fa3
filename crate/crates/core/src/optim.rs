//! Adam with decoupled weight decay, plus gradient accumulation and
//! global-norm clipping.

use crate::tensor::{ParamId, ParamStore};

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    bufs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Gradients {
            bufs: store.ids().map(|id| vec![0.0; store.data(id).len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.bufs[id.0].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn scale(&mut self, c: f64) {
        self.bufs.iter_mut().flatten().for_each(|v| *v *= c);
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.data(id).len()]).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`.
    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.data_mut(id);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let lr = self.lr;
        self.step_with_lr(store, grads, lr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        for _ in 0..500 {
            let mut g = Gradients::zeros(&store);
            let grad: Vec<f64> = store.data(id).iter().map(|x| 2.0 * x).collect();
            g.accumulate(id, &grad);
            opt.step(&mut store, &g);
        }
        assert!(store.data(id).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let mut g = Gradients::zeros(&store);
        g.accumulate(id, &[3.0, 4.0]);
        assert_eq!(g.clip(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut opt = AdamW::new(&store, 0.1, 0.5);
        let g = Gradients::zeros(&store);
        opt.step(&mut store, &g);
        assert!((store.data(id)[0] - 0.95).abs() < 1e-12);
    }
}
