//! Adam optimizer keyed by parameter name.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

// resolves float math on concrete f64 when building without std
#[allow(unused_imports)]
use num_traits::Float;
use crate::nets::layers::Param;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

pub struct Adam<T> {
    pub cfg: AdamConfig,
    t: u64,
    state: BTreeMap<String, Slot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update over every parameter the closure visits, e.g.
    /// `opt.step(|f| net.visit_params("", f))`.
    pub fn step<F: FnOnce(&mut dyn FnMut(&str, &mut Param<T>))>(&mut self, visit: F) {
        self.t += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let lr = T::from_f64(self.cfg.lr);
        let c1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let c2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let state = &mut self.state;
        visit(&mut |name, p| {
            let slot = state.entry(name.to_string()).or_insert_with(|| Slot {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            let md = slot.m.data_mut();
            let vd = slot.v.data_mut();
            let gd = p.grad.data();
            let pd = p.value.data_mut();
            let one = T::one();
            for i in 0..pd.len() {
                let g = gd[i];
                md[i] = b1 * md[i] + (one - b1) * g;
                vd[i] = b2 * vd[i] + (one - b2) * g * g;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_roughly_lr() {
        let mut p = Param::new(Tensor::from_vec(&[2], vec![1.0f64, -2.0]).unwrap());
        p.grad = Tensor::from_vec(&[2], vec![10.0, -0.001]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        opt.step(|f| f("p", &mut p));
        // bias corrections cancel on the first step, so the move is
        // lr * g/(|g| + eps) = lr * sign(g) up to eps
        assert!((p.value.data()[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p.value.data()[1] - (-2.0 + 0.1)).abs() < 1e-4);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new(Tensor::from_vec(&[1], vec![3.0f64]).unwrap());
        let mut opt = Adam::new(AdamConfig::with_lr(0.05));
        for _ in 0..2000 {
            p.grad = Tensor::from_vec(&[1], vec![2.0 * p.value.data()[0]]).unwrap();
            opt.step(|f| f("p", &mut p));
        }
        assert!(p.value.data()[0].abs() < 1e-3);
    }
}
