//! Adam with classic L2 regularization folded into the gradient.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state. Slot order is fixed at construction and must match the
/// parameter order of every subsequent step.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            weight_decay,
            t: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    /// One update over all parameter slots. `params[i]` and `grads[i]` must
    /// have the shape slot `i` was constructed with.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer has {} slots, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..self.m.len() {
            let p = &mut *params[i];
            if p.dim() != self.m[i].dim() || grads[i].dim() != self.m[i].dim() {
                return Err(Error::Shape(format!(
                    "slot {i}: state {:?}, parameter {:?}, gradient {:?}",
                    self.m[i].dim(),
                    p.dim(),
                    grads[i].dim()
                )));
            }
            let g = if self.weight_decay > 0.0 {
                &grads[i] + &(&**p * self.weight_decay)
            } else {
                grads[i].clone()
            };
            self.m[i] = &self.m[i] * BETA1 + &(&g * (1.0 - BETA1));
            self.v[i] = &self.v[i] * BETA2 + &g.mapv(|x| x * x) * (1.0 - BETA2);
            let update = ndarray::Zip::from(&self.m[i])
                .and(&self.v[i])
                .map_collect(|&m, &v| self.lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS));
            p.zip_mut_with(&update, |x, &u| *x -= u);
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}
