//! Central finite-difference gradient verification.

use rand::seq::index::sample;

use crate::error::Result;
use crate::seed;

use super::param::Trainable;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries checked per parameter tensor (all of them if fewer).
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison; 1.0 except when
    /// testing that the checker notices a corrupted gradient.
    pub grad_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_tensor: 200,
            seed: 0,
            grad_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over checked entries.
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// `loss(model, want_grad)` must run a forward pass and return the loss;
/// with `want_grad` it must also accumulate parameter gradients.
pub fn grad_check<M, F>(model: &mut M, mut loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: Trainable<f64>,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    model.zero_grad();
    loss(model, true)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |p| analytic.push((p.name.clone(), p.grad.clone())));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut rng = seed::rng(opts.seed, &[seed::tag("gradcheck")]);
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        let n = grads.len();
        let idx: Vec<usize> = if n <= opts.samples_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.samples_per_tensor).into_vec()
        };
        for i in idx {
            let orig = get(model, pi, i);
            set(model, pi, i, orig + opts.step);
            let up = loss(model, false)?;
            set(model, pi, i, orig - opts.step);
            let down = loss(model, false)?;
            set(model, pi, i, orig);
            let numeric = (up - down) / (2.0 * opts.step);
            let a = grads[i] * opts.grad_scale;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    model.zero_grad();
    Ok(report)
}

fn get<M: Trainable<f64>>(model: &mut M, pi: usize, i: usize) -> f64 {
    let mut k = 0;
    let mut v = 0.0;
    model.visit_params(&mut |p| {
        if k == pi {
            v = p.value.data[i];
        }
        k += 1;
    });
    v
}

fn set<M: Trainable<f64>>(model: &mut M, pi: usize, i: usize, v: f64) {
    let mut k = 0;
    model.visit_params(&mut |p| {
        if k == pi {
            p.value.data[i] = v;
        }
        k += 1;
    });
}
