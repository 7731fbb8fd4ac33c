//! Adam with bias correction.

use crate::error::{shape_err, Result};
use crate::layer::Param;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    /// First and second moments, one pair per parameter tensor.
    moments: Vec<(Vec<usize>, Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Multiplies the learning rate (learning-rate reduction on plateau).
    pub fn scale_lr(&mut self, factor: f64) {
        self.lr *= factor;
    }

    /// One update of every parameter from its accumulated gradient. Moments
    /// are created on the first call and must keep matching shapes afterwards.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (p.value.shape().to_vec(), vec![0.0; p.value.len()], vec![0.0; p.value.len()]))
                .collect();
        }
        if self.moments.len() != params.len()
            || self.moments.iter().zip(params.iter()).any(|(m, p)| m.0 != p.value.shape())
        {
            return shape_err("optimizer state does not match the parameter list");
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (p, (_, m, v)) in params.iter_mut().zip(&mut self.moments) {
            let Param { value, grad } = &mut **p;
            for ((w, &g), (mi, vi)) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let g = g.as_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let upd = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w = T::of(w.as_f64() - upd);
            }
        }
        Ok(())
    }
}
