//! AdamW: adaptive moments with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// First and second moment estimates, one slot per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamW { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}, got {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = T::lit(c.lr);
        let decay = T::lit(c.lr * c.weight_decay);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let eps = T::lit(c.eps);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] - decay * p[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn zero_lr_freezes() {
        let mut s = ParamStore::<f32>::new();
        s.insert("p", Tensor::new(Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let before = s.clone();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() }, &s);
        let g = vec![Tensor::full(Shape::new(1, 1, 1, 3), 3.0)];
        opt.update(&mut s, &g).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        s.insert("p", Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, 1.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() }, &s);
        let g = vec![Tensor::new(Shape::new(1, 1, 1, 2), vec![5.0, -0.01]).unwrap()];
        opt.update(&mut s, &g).unwrap();
        let p = s.by_name("p").unwrap().data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] - 1.1).abs() < 1e-5);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut s = ParamStore::<f64>::new();
        s.insert("p", Tensor::full(Shape::new(1, 1, 1, 1), 2.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() }, &s);
        opt.update(&mut s, &[Tensor::zeros(Shape::new(1, 1, 1, 1))]).unwrap();
        assert!((s.by_name("p").unwrap().data()[0] - 1.9).abs() < 1e-12);
    }
}
