//! Frame-wise affine + sigmoid, then mean over groups of `pool` frames.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

use super::init::uniform;
use super::param::{Param, Tensor, Trainable};

#[derive(Clone, Debug)]
pub struct Head<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub pool: usize,
    cache: Option<(Vec<T>, Vec<T>, [usize; 2])>,
}

impl<T: Real> Head<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, classes: usize, pool: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::from_vec(&[classes, input], uniform(classes * input, bound, rng)).unwrap(),
            ),
            bias: Param::zeros(format!("{name}.bias"), &[classes]),
            pool,
            cache: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn input_size(&self) -> usize {
        self.weight.value.shape[1]
    }

    /// `B x T x D -> B x (T / pool) x L`, values in (0, 1).
    pub fn forward(&mut self, x: &[T], b_n: usize, t_n: usize) -> Result<Vec<T>> {
        let d = self.input_size();
        let l = self.classes();
        if x.len() != b_n * t_n * d {
            return Err(Error::shape(format!("{b_n}x{t_n}x{d}"), format!("{} values", x.len())));
        }
        if self.pool == 0 || t_n % self.pool != 0 {
            return Err(Error::Config(format!(
                "{t_n} frames are not divisible by the label pooling factor {}",
                self.pool
            )));
        }
        let rows = b_n * t_n;
        let mut p = vec![T::zero(); rows * l];
        for row in p.chunks_exact_mut(l) {
            row.copy_from_slice(&self.bias.value.data);
        }
        T::gemm(
            rows,
            d,
            l,
            T::one(),
            x,
            (d as isize, 1),
            &self.weight.value.data,
            (1, d as isize),
            T::one(),
            &mut p,
            (l as isize, 1),
        );
        p.iter_mut().for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
        let tl = t_n / self.pool;
        let inv = T::one() / T::c(self.pool as f64);
        let mut out = vec![T::zero(); b_n * tl * l];
        for b in 0..b_n {
            for t in 0..t_n {
                let src = &p[(b * t_n + t) * l..][..l];
                let dst = &mut out[(b * tl + t / self.pool) * l..][..l];
                dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v * inv);
            }
        }
        self.cache = Some((x.to_vec(), p, [b_n, t_n]));
        Ok(out)
    }

    pub fn backward(&mut self, dout: &[T]) -> Result<Vec<T>> {
        let (x, p, [b_n, t_n]) = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidArgument("head backward without forward".into()))?;
        let d = self.input_size();
        let l = self.classes();
        let tl = t_n / self.pool;
        if dout.len() != b_n * tl * l {
            return Err(Error::shape(format!("{b_n}x{tl}x{l}"), format!("{} values", dout.len())));
        }
        let inv = T::one() / T::c(self.pool as f64);
        let mut dlogit = vec![T::zero(); b_n * t_n * l];
        for b in 0..b_n {
            for t in 0..t_n {
                let g = &dout[(b * tl + t / self.pool) * l..][..l];
                let pr = &p[(b * t_n + t) * l..][..l];
                let dst = &mut dlogit[(b * t_n + t) * l..][..l];
                for k in 0..l {
                    dst[k] = g[k] * inv * pr[k] * (T::one() - pr[k]);
                }
            }
        }
        let rows = b_n * t_n;
        for row in dlogit.chunks_exact(l) {
            self.bias.grad.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        T::gemm(
            l,
            rows,
            d,
            T::one(),
            &dlogit,
            (1, l as isize),
            &x,
            (d as isize, 1),
            T::one(),
            &mut self.weight.grad,
            (d as isize, 1),
        );
        let mut dx = vec![T::zero(); rows * d];
        T::gemm(
            rows,
            l,
            d,
            T::one(),
            &dlogit,
            (l as isize, 1),
            &self.weight.value.data,
            (d as isize, 1),
            T::zero(),
            &mut dx,
            (d as isize, 1),
        );
        Ok(dx)
    }
}

impl<T: Real> Trainable<T> for Head<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
