use std::f64::consts::PI;

use crate::error::{ensure, Result};
use crate::network::ParamStore;

/// Adam with a cosine-annealed learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Length of the cosine schedule; the rate reaches zero here.
    pub total_steps: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, total_steps: 2000 }
    }
}

impl Adam {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0, "learning rate must be positive");
        ensure!(self.beta1 > 0.0 && self.beta1 < 1.0, "beta1 must lie in (0, 1)");
        ensure!(self.beta2 > 0.0 && self.beta2 < 1.0, "beta2 must lie in (0, 1)");
        ensure!(self.eps > 0.0, "eps must be positive");
        ensure!(self.total_steps > 0, "schedule length must be positive");
        Ok(())
    }

    /// `lr · (1 + cos(π s / S)) / 2`, held at zero past the end.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step.min(self.total_steps) as f64 / self.total_steps as f64;
        0.5 * self.lr * (1.0 + (PI * s).cos())
    }

    /// Applies one update from the gradients stored in `params`, then
    /// advances the step counter. Returns the rate used.
    pub fn update(&self, params: &mut ParamStore) -> f64 {
        let lr = self.lr_at(params.step);
        let t = (params.step + 1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for p in params.params_mut() {
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = p.v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((w, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let mh = mi as f64 / c1;
                let vh = vi as f64 / c2;
                *w -= (lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
        }
        params.step += 1;
        lr
    }
}
