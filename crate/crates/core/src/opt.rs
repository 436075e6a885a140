//! Adam optimizer over named parameter tensors.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use std::collections::BTreeMap;

/// Adam with the usual defaults: beta = (0.9, 0.999), epsilon = 1e-8.
/// Moment state is keyed by parameter name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// One optimization step over a set of (name, parameter, gradient)
    /// triples. Bias correction uses a single shared step counter.
    pub fn step(&mut self, updates: &mut [(&str, &mut Tensor, &Tensor)]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param, grad) in updates {
            if param.shape() != grad.shape() {
                return Err(Error::shape(format!(
                    "adam: parameter {name} has shape {:?}, gradient {:?}",
                    param.shape(),
                    grad.shape()
                )));
            }
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let p = param.data_mut();
            for i in 0..p.len() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
