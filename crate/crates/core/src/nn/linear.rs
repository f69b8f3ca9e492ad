//! Per-frame logistic regression, `p = sigmoid(x W^T + b)`. Small enough to
//! serve as an exact reference for the gradient checker.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

use super::init::uniform;
use super::param::{Param, Tensor, Trainable};

#[derive(Clone, Debug)]
pub struct LinearProbe<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> LinearProbe<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(
                "probe.weight",
                Tensor::from_vec(&[outputs, input], uniform(outputs * input, 1.0, rng)).unwrap(),
            ),
            bias: Param::new("probe.bias", Tensor::from_vec(&[outputs], uniform(outputs, 0.5, rng)).unwrap()),
            cache: None,
        }
    }

    /// `x`: `rows x input` -> `rows x outputs`.
    pub fn forward(&mut self, x: &[T]) -> Result<Vec<T>> {
        let (l, d) = (self.weight.value.shape[0], self.weight.value.shape[1]);
        if x.len() % d != 0 {
            return Err(Error::shape(format!("rows x {d}"), format!("{} values", x.len())));
        }
        let rows = x.len() / d;
        let mut p = Vec::with_capacity(rows * l);
        for r in 0..rows {
            for k in 0..l {
                let z = (0..d).map(|j| x[r * d + j] * self.weight.value.data[k * d + j]).sum::<T>()
                    + self.bias.value.data[k];
                p.push(T::one() / (T::one() + (-z).exp()));
            }
        }
        self.cache = Some((x.to_vec(), p.clone()));
        Ok(p)
    }

    pub fn backward(&mut self, dp: &[T]) -> Result<()> {
        let (x, p) = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidArgument("probe backward without forward".into()))?;
        let (l, d) = (self.weight.value.shape[0], self.weight.value.shape[1]);
        for r in 0..p.len() / l {
            for k in 0..l {
                let dz = dp[r * l + k] * p[r * l + k] * (T::one() - p[r * l + k]);
                self.bias.grad[k] += dz;
                for j in 0..d {
                    self.weight.grad[k * d + j] += dz * x[r * d + j];
                }
            }
        }
        Ok(())
    }
}

impl<T: Real> Trainable<T> for LinearProbe<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
