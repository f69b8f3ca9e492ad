//! BCE, Dice and BCE-Dice losses with analytic gradients.
//!
//! All losses take flat prediction/target buffers holding `n_samples`
//! consecutive per-sample tensors (each `T x L`, row-major) and return the
//! scalar loss together with `dL/dpred` in the same layout.

use std::collections::BTreeSet;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Additive stabiliser in the Dice denominator.
    pub dice_epsilon: f64,
    /// Predictions are clamped to `[clamp, 1 - clamp]` inside BCE.
    pub bce_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_epsilon: 1.0,
            bce_clamp: 1e-7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Bce,
    Dice,
    BceDice,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Dice => "dice",
            LossKind::BceDice => "bce_dice",
        }
    }

    pub fn evaluate<T: Real>(
        &self,
        pred: &[T],
        target: &[T],
        n_samples: usize,
        cfg: &LossConfig,
    ) -> Result<LossValue<T>> {
        match self {
            LossKind::Bce => bce(pred, target, cfg.bce_clamp),
            LossKind::Dice => dice_loss(pred, target, n_samples, cfg.dice_epsilon),
            LossKind::BceDice => bce_dice(pred, target, n_samples, cfg),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "dice" => Ok(LossKind::Dice),
            "bce_dice" | "bce-dice" | "bce+dice" => Ok(LossKind::BceDice),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Vec<T>,
}

fn check_shapes<T>(pred: &[T], target: &[T]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::shape(
            format!("{} prediction elements", target.len()),
            format!("{}", pred.len()),
        ));
    }
    Ok(())
}

/// Mean binary cross-entropy over every element.
///
/// Where the clamp is active the gradient is zero, matching the derivative of
/// the clamped function.
pub fn bce<T: Real>(pred: &[T], target: &[T], clamp: f64) -> Result<LossValue<T>> {
    check_shapes(pred, target)?;
    let n = pred.len().max(1);
    let lo = T::c(clamp);
    let hi = T::one() - lo;
    let inv_n = T::one() / T::c(n as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(target) {
        let pc = p.max(lo).min(hi);
        total -= y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
        let g = if p < lo || p > hi {
            T::zero()
        } else {
            (pc - y) / (pc * (T::one() - pc)) * inv_n
        };
        grad.push(g);
    }
    Ok(LossValue { value: total * inv_n, grad })
}

/// Batch-mean soft Dice loss, computed per sample over the whole `T x L`
/// tensor:
///
/// `1/N * sum_n [1 - 2 |p_n * y_n|_1 / (|p_n + y_n|_1 + eps)]`
///
/// The both-empty case gives a per-sample loss of 1 (zero numerator).
pub fn dice_loss<T: Real>(pred: &[T], target: &[T], n_samples: usize, eps: f64) -> Result<LossValue<T>> {
    check_shapes(pred, target)?;
    if n_samples == 0 || pred.len() % n_samples != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} elements cannot be split into {n_samples} samples",
            pred.len()
        )));
    }
    let per = pred.len() / n_samples;
    let eps = T::c(eps);
    let two = T::c(2.0);
    let inv_n = T::one() / T::c(n_samples as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for s in 0..n_samples {
        let p = &pred[s * per..(s + 1) * per];
        let y = &target[s * per..(s + 1) * per];
        let inter: T = p.iter().zip(y).map(|(&a, &b)| a * b).sum();
        let den: T = p.iter().zip(y).map(|(&a, &b)| a + b).sum::<T>() + eps;
        let num = two * inter;
        total += T::one() - num / den;
        let common = num / (den * den);
        for (g, &yy) in grad[s * per..(s + 1) * per].iter_mut().zip(y) {
            *g = (common - two * yy / den) * inv_n;
        }
    }
    Ok(LossValue { value: total * inv_n, grad })
}

/// Unweighted sum of mean BCE and batch Dice.
pub fn bce_dice<T: Real>(pred: &[T], target: &[T], n_samples: usize, cfg: &LossConfig) -> Result<LossValue<T>> {
    let a = bce(pred, target, cfg.bce_clamp)?;
    let b = dice_loss(pred, target, n_samples, cfg.dice_epsilon)?;
    Ok(LossValue {
        value: a.value + b.value,
        grad: a.grad.iter().zip(&b.grad).map(|(&x, &y)| x + y).collect(),
    })
}

/// Sørensen–Dice coefficient of two finite sets; 1 when both are empty.
pub fn sdc<E: Ord>(a: &BTreeSet<E>, b: &BTreeSet<E>) -> f64 {
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    2.0 * a.intersection(b).count() as f64 / total as f64
}
