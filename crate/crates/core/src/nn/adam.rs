//! Adam and the warm-up / plateau / decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::real::Real;

use super::param::Trainable;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update steps.
    pub step: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }
}

impl Adam {
    /// One bias-corrected update from the accumulated gradients. A
    /// non-finite gradient anywhere aborts the step before any parameter or
    /// moment is touched.
    pub fn step<T: Real, M: Trainable<T> + ?Sized>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        let mut finite = true;
        model.visit_params(&mut |p| finite &= p.grad.iter().all(|g| g.is_finite()));
        if !finite {
            return Err(Error::Numeric("non-finite gradient; step skipped".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = T::c(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = T::c(1.0 / (1.0 - self.beta2.powi(t)));
        let (lr, eps) = (T::c(lr), T::c(self.eps));
        model.visit_params(&mut |p| {
            for i in 0..p.value.data.len() {
                let g = p.grad[i];
                p.adam_m[i] = b1 * p.adam_m[i] + (T::one() - b1) * g;
                p.adam_v[i] = b2 * p.adam_v[i] + (T::one() - b2) * g * g;
                let mh = p.adam_m[i] * c1;
                let vh = p.adam_v[i] * c2;
                p.value.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        });
        Ok(())
    }
}

const LR_ANCHORS: [(f64, f64); 4] = [(0.0, 1e-4), (0.1, 1e-3), (0.7, 1e-3), (1.0, 1e-4)];

/// Learning rate at `progress` (fraction of training, clamped to [0, 1]),
/// linear in log10(rate) between the anchors.
pub fn lr_schedule(progress: f64) -> f64 {
    let p = if progress.is_nan() { 0.0 } else { progress.clamp(0.0, 1.0) };
    for w in LR_ANCHORS.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if p <= x1 {
            let a = (p - x0) / (x1 - x0);
            return 10f64.powf(y0.log10() + a * (y1.log10() - y0.log10()));
        }
    }
    LR_ANCHORS[3].1
}
