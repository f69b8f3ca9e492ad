//! Single-layer bidirectional GRU.
//!
//! Gate layout follows the usual `(r, z, n)` stacking:
//!
//! ```text
//! r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//! z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//! h' = (1 - z) * n + z * h
//! ```
//!
//! Output `B x T x 2H`: forward direction in `[0, H)`, reverse in `[H, 2H)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

use super::init::{orthogonal, uniform};
use super::param::{Param, Tensor, Trainable};

#[derive(Clone, Debug)]
pub struct GruDirection<T> {
    pub w_ih: Param<T>,
    pub w_hh: Param<T>,
    pub b_ih: Param<T>,
    pub b_hh: Param<T>,
}

#[derive(Clone, Debug)]
struct DirCache<T> {
    /// Per processing step, `B x H` each.
    r: Vec<Vec<T>>,
    z: Vec<Vec<T>>,
    n: Vec<Vec<T>>,
    ghn: Vec<Vec<T>>,
    h_prev: Vec<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct BiGru<T> {
    pub input_size: usize,
    pub hidden: usize,
    pub fw: GruDirection<T>,
    pub bw: GruDirection<T>,
    cache: Option<(Vec<T>, [usize; 2], DirCache<T>, DirCache<T>)>,
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> GruDirection<T> {
    fn new<R: Rng + ?Sized>(name: &str, d: usize, h: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (h as f64).sqrt();
        let mut whh = Vec::with_capacity(3 * h * h);
        for _ in 0..3 {
            whh.extend(orthogonal(h, rng).into_iter().map(T::c));
        }
        Self {
            w_ih: Param::new(
                format!("{name}.w_ih"),
                Tensor::from_vec(&[3 * h, d], uniform(3 * h * d, bound, rng)).unwrap(),
            ),
            w_hh: Param::new(format!("{name}.w_hh"), Tensor::from_vec(&[3 * h, h], whh).unwrap()),
            b_ih: Param::zeros(format!("{name}.b_ih"), &[3 * h]),
            b_hh: Param::zeros(format!("{name}.b_hh"), &[3 * h]),
        }
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w_ih);
        f(&mut self.w_hh);
        f(&mut self.b_ih);
        f(&mut self.b_hh);
    }

    /// Run over `x` (`B x T x D`), writing hidden states into columns
    /// `offset..offset + H` of `out` (`B x T x 2H`).
    fn forward(&self, x: &[T], b_n: usize, t_n: usize, d: usize, reverse: bool, out: &mut [T], offset: usize) -> DirCache<T> {
        let h = self.b_hh.len() / 3;
        let g = 3 * h;
        // Input projections for every (b, t) at once.
        let mut gi = vec![T::zero(); b_n * t_n * g];
        T::gemm(
            b_n * t_n,
            d,
            g,
            T::one(),
            x,
            (d as isize, 1),
            &self.w_ih.value.data,
            (1, d as isize),
            T::zero(),
            &mut gi,
            (g as isize, 1),
        );
        let mut cache = DirCache {
            r: Vec::with_capacity(t_n),
            z: Vec::with_capacity(t_n),
            n: Vec::with_capacity(t_n),
            ghn: Vec::with_capacity(t_n),
            h_prev: Vec::with_capacity(t_n),
        };
        let mut hs = vec![T::zero(); b_n * h];
        let mut gh = vec![T::zero(); b_n * g];
        for step in 0..t_n {
            let t = if reverse { t_n - 1 - step } else { step };
            T::gemm(
                b_n,
                h,
                g,
                T::one(),
                &hs,
                (h as isize, 1),
                &self.w_hh.value.data,
                (1, h as isize),
                T::zero(),
                &mut gh,
                (g as isize, 1),
            );
            let mut r = vec![T::zero(); b_n * h];
            let mut z = vec![T::zero(); b_n * h];
            let mut n = vec![T::zero(); b_n * h];
            let mut ghn = vec![T::zero(); b_n * h];
            let mut h_new = vec![T::zero(); b_n * h];
            for b in 0..b_n {
                let gib = &gi[(b * t_n + t) * g..][..g];
                let ghb = &gh[b * g..][..g];
                for j in 0..h {
                    let bi = &self.b_ih.value.data;
                    let bh = &self.b_hh.value.data;
                    let rj = sigmoid(gib[j] + bi[j] + ghb[j] + bh[j]);
                    let zj = sigmoid(gib[h + j] + bi[h + j] + ghb[h + j] + bh[h + j]);
                    let hn = ghb[2 * h + j] + bh[2 * h + j];
                    let nj = (gib[2 * h + j] + bi[2 * h + j] + rj * hn).tanh();
                    let i = b * h + j;
                    r[i] = rj;
                    z[i] = zj;
                    n[i] = nj;
                    ghn[i] = hn;
                    h_new[i] = (T::one() - zj) * nj + zj * hs[i];
                    out[(b * t_n + t) * 2 * h + offset + j] = h_new[i];
                }
            }
            cache.r.push(r);
            cache.z.push(z);
            cache.n.push(n);
            cache.ghn.push(ghn);
            cache.h_prev.push(std::mem::replace(&mut hs, h_new));
        }
        cache
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &mut self,
        x: &[T],
        b_n: usize,
        t_n: usize,
        d: usize,
        reverse: bool,
        dout: &[T],
        offset: usize,
        cache: &DirCache<T>,
        dx: &mut [T],
    ) {
        let h = self.b_hh.len() / 3;
        let g = 3 * h;
        let mut dgi = vec![T::zero(); b_n * t_n * g];
        let mut dgh = vec![T::zero(); b_n * g];
        let mut dh = vec![T::zero(); b_n * h];
        for step in (0..t_n).rev() {
            let t = if reverse { t_n - 1 - step } else { step };
            let (r, z, n, ghn, hp) = (
                &cache.r[step],
                &cache.z[step],
                &cache.n[step],
                &cache.ghn[step],
                &cache.h_prev[step],
            );
            for b in 0..b_n {
                for j in 0..h {
                    let i = b * h + j;
                    let dhi = dh[i] + dout[(b * t_n + t) * 2 * h + offset + j];
                    let dn = dhi * (T::one() - z[i]);
                    let dz = dhi * (hp[i] - n[i]);
                    let dan = dn * (T::one() - n[i] * n[i]);
                    let dar = dan * ghn[i] * r[i] * (T::one() - r[i]);
                    let daz = dz * z[i] * (T::one() - z[i]);
                    let gi_row = &mut dgi[(b * t_n + t) * g..][..g];
                    gi_row[j] = dar;
                    gi_row[h + j] = daz;
                    gi_row[2 * h + j] = dan;
                    let gh_row = &mut dgh[b * g..][..g];
                    gh_row[j] = dar;
                    gh_row[h + j] = daz;
                    gh_row[2 * h + j] = dan * r[i];
                    dh[i] = dhi * z[i];
                }
            }
            // dW_hh += dGh^T h_prev; dh += dGh W_hh
            T::gemm(
                g,
                b_n,
                h,
                T::one(),
                &dgh,
                (1, g as isize),
                hp,
                (h as isize, 1),
                T::one(),
                &mut self.w_hh.grad,
                (h as isize, 1),
            );
            T::gemm(
                b_n,
                g,
                h,
                T::one(),
                &dgh,
                (g as isize, 1),
                &self.w_hh.value.data,
                (h as isize, 1),
                T::one(),
                &mut dh,
                (h as isize, 1),
            );
            for b in 0..b_n {
                for k in 0..g {
                    self.b_hh.grad[k] += dgh[b * g + k];
                }
            }
        }
        let rows = b_n * t_n;
        for row in dgi.chunks_exact(g) {
            for (acc, &v) in self.b_ih.grad.iter_mut().zip(row) {
                *acc += v;
            }
        }
        // dW_ih += dGi^T X; dX += dGi W_ih
        T::gemm(
            g,
            rows,
            d,
            T::one(),
            &dgi,
            (1, g as isize),
            x,
            (d as isize, 1),
            T::one(),
            &mut self.w_ih.grad,
            (d as isize, 1),
        );
        T::gemm(
            rows,
            g,
            d,
            T::one(),
            &dgi,
            (g as isize, 1),
            &self.w_ih.value.data,
            (d as isize, 1),
            T::one(),
            dx,
            (d as isize, 1),
        );
    }
}

impl<T: Real> BiGru<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, input_size: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            input_size,
            hidden,
            fw: GruDirection::new(&format!("{name}.fw"), input_size, hidden, rng),
            bw: GruDirection::new(&format!("{name}.bw"), input_size, hidden, rng),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &[T], b_n: usize, t_n: usize) -> Result<Vec<T>> {
        let d = self.input_size;
        if x.len() != b_n * t_n * d || t_n == 0 {
            return Err(Error::shape(
                format!("{b_n}x{t_n}x{d} (T >= 1)"),
                format!("{} values", x.len()),
            ));
        }
        let h = self.hidden;
        let mut out = vec![T::zero(); b_n * t_n * 2 * h];
        let cf = self.fw.forward(x, b_n, t_n, d, false, &mut out, 0);
        let cb = self.bw.forward(x, b_n, t_n, d, true, &mut out, h);
        self.cache = Some((x.to_vec(), [b_n, t_n], cf, cb));
        Ok(out)
    }

    pub fn backward(&mut self, dout: &[T]) -> Result<Vec<T>> {
        let (x, [b_n, t_n], cf, cb) = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidArgument("gru backward without forward".into()))?;
        let d = self.input_size;
        if dout.len() != b_n * t_n * 2 * self.hidden {
            return Err(Error::shape(
                format!("{b_n}x{t_n}x{}", 2 * self.hidden),
                format!("{} values", dout.len()),
            ));
        }
        let mut dx = vec![T::zero(); x.len()];
        self.fw.backward(&x, b_n, t_n, d, false, dout, 0, &cf, &mut dx);
        self.bw.backward(&x, b_n, t_n, d, true, dout, self.hidden, &cb, &mut dx);
        Ok(dx)
    }
}

impl<T: Real> Trainable<T> for BiGru<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fw.visit(f);
        self.bw.visit(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_everything_gives_zero() {
        let mut g = BiGru::<f64>::new("g", 3, 4, &mut crate::seed::rng(0, &[]));
        let y = g.forward(&[0.0; 2 * 5 * 3], 2, 5).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_directions_agree() {
        let mut g = BiGru::<f64>::new("g", 3, 4, &mut crate::seed::rng(0, &[]));
        let names: Vec<String> = [&g.bw.w_ih, &g.bw.w_hh].iter().map(|p| p.name.clone()).collect();
        g.bw = g.fw.clone();
        g.bw.w_ih.name = names[0].clone();
        g.bw.w_hh.name = names[1].clone();
        let x = [0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let y = g.forward(&x, 2, 1).unwrap();
        for b in 0..2 {
            for j in 0..4 {
                assert_eq!(y[b * 8 + j], y[b * 8 + 4 + j]);
            }
        }
    }

    #[test]
    fn matches_scalar_reference() {
        // H = 1, D = 1, one direction checked against a hand-rolled loop.
        let mut g = BiGru::<f64>::new("g", 1, 1, &mut crate::seed::rng(5, &[]));
        let x = [0.5, -0.25, 1.0];
        let y = g.forward(&x, 1, 3).unwrap();
        let p = &g.fw;
        let (wi, wh, bi, bh) = (&p.w_ih.value.data, &p.w_hh.value.data, &p.b_ih.value.data, &p.b_hh.value.data);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = 0.0;
        for (t, &xt) in x.iter().enumerate() {
            let r = sig(wi[0] * xt + bi[0] + wh[0] * h + bh[0]);
            let z = sig(wi[1] * xt + bi[1] + wh[1] * h + bh[1]);
            let n = (wi[2] * xt + bi[2] + r * (wh[2] * h + bh[2])).tanh();
            h = (1.0 - z) * n + z * h;
            assert!((y[t * 2] - h).abs() < 1e-14);
        }
    }
}
