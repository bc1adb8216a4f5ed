use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter holding a gradient; `lr` gives
    /// the learning rate per parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: impl Fn(ParamId) -> f64) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        for (id, g) in grads.iter() {
            let rate = lr(id);
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())));
            let p = store.get_mut(id);
            let decay = T::of(1.0 - rate * self.weight_decay);
            let step = T::of(rate / bc1);
            let eps = T::of(self.eps);
            let inv_bc2 = T::of(1.0 / bc2);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv = *pv * decay - step * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }
}
