use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Adam with bias correction, or plain SGD.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn adam(lr: f64, store: &ParamStore) -> Self {
        Self::new(OptimizerKind::Adam, lr, store)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters with `frozen[k] == true` are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], frozen: Option<&[bool]>) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for g in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer" });
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (k, t) in store.tensors_mut().iter_mut().enumerate() {
            if frozen.is_some_and(|f| f[k]) {
                continue;
            }
            let g = &grads[k];
            let data = t.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in data.iter_mut().zip(g) {
                        *w -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..data.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(&[1.0, -1.0])).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, &store);
        opt.step(&mut store, &[vec![2.0, -2.0]], None).unwrap();
        assert_eq!(store.tensors()[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(&[0.0])).unwrap();
        let mut opt = Optimizer::adam(1e-3, &store);
        opt.step(&mut store, &[vec![5.0]], None).unwrap();
        assert!((store.tensors()[0].data()[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::row(&[1.0])).unwrap();
        store.add("b", Tensor::row(&[1.0])).unwrap();
        let mut opt = Optimizer::adam(0.1, &store);
        opt.step(&mut store, &[vec![1.0], vec![1.0]], Some(&[true, false])).unwrap();
        assert_eq!(store.tensors()[0].data()[0], 1.0);
        assert!(store.tensors()[1].data()[0] < 1.0);
    }
}
