//! 3x3 convolution -> batch norm -> ReLU -> average pool.
//!
//! Convolution is im2col + GEMM per batch item; the column buffer is rebuilt
//! in the backward pass instead of being cached.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

use super::init::kaiming_uniform;
use super::param::{Param, Tensor, Trainable};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// `[batch, channels, frames, bins]`.
pub type Shape4 = [usize; 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub pool_t: usize,
    pub pool_f: usize,
}

#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub in_channels: usize,
    pub spec: ConvSpec,
    pub weight: Param<T>,
    /// Present only when batch norm is bypassed.
    pub bias: Option<Param<T>>,
    pub bn: Option<BatchNorm<T>>,
    cache: Option<ConvCache<T>>,
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Clone, Debug)]
struct ConvCache<T> {
    input: Vec<T>,
    in_shape: Shape4,
    /// Normalised pre-activation (or raw conv output when BN is bypassed).
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Real> ConvBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        spec: ConvSpec,
        batch_norm: bool,
        rng: &mut R,
    ) -> Self {
        let k = spec.out_channels;
        let fan_in = in_channels * 9;
        let weight = Param::new(
            format!("{name}.weight"),
            Tensor::from_vec(&[k, in_channels, 3, 3], kaiming_uniform(k * fan_in, fan_in, rng)).unwrap(),
        );
        let (bias, bn) = if batch_norm {
            let mut gamma = Param::zeros(format!("{name}.bn.gamma"), &[k]);
            gamma.value.data.iter_mut().for_each(|g| *g = T::one());
            (
                None,
                Some(BatchNorm {
                    gamma,
                    beta: Param::zeros(format!("{name}.bn.beta"), &[k]),
                    running_mean: vec![T::zero(); k],
                    running_var: vec![T::one(); k],
                }),
            )
        } else {
            (Some(Param::zeros(format!("{name}.bias"), &[k])), None)
        };
        Self {
            in_channels,
            spec,
            weight,
            bias,
            bn,
            cache: None,
        }
    }

    pub fn out_shape(&self, s: Shape4) -> Result<Shape4> {
        if s[1] != self.in_channels {
            return Err(Error::shape(
                format!("{} input channels", self.in_channels),
                format!("{}", s[1]),
            ));
        }
        if s[2] < self.spec.pool_t || s[3] < self.spec.pool_f {
            return Err(Error::InvalidArgument(format!(
                "{}x{} map too small for {}x{} pooling",
                s[2], s[3], self.spec.pool_t, self.spec.pool_f
            )));
        }
        Ok([s[0], self.spec.out_channels, s[2] / self.spec.pool_t, s[3] / self.spec.pool_f])
    }

    pub fn forward(&mut self, x: &[T], s: Shape4, train: bool) -> Result<(Vec<T>, Shape4)> {
        let out_s = self.out_shape(s)?;
        if x.len() != s.iter().product::<usize>() {
            return Err(Error::shape(format!("{s:?}"), format!("{} values", x.len())));
        }
        let [b_n, c_in, t_n, f_n] = s;
        let k_n = self.spec.out_channels;
        let tf = t_n * f_n;
        let ck = c_in * 9;

        let mut z = vec![T::zero(); b_n * k_n * tf];
        if c_in <= DIRECT_MAX_IN {
            for b in 0..b_n {
                conv_direct(
                    &x[b * c_in * tf..(b + 1) * c_in * tf],
                    &self.weight.value.data,
                    [c_in, k_n, t_n, f_n],
                    &mut z[b * k_n * tf..(b + 1) * k_n * tf],
                );
            }
        } else {
            let mut cols = vec![T::zero(); ck * tf];
            for b in 0..b_n {
                im2col(&x[b * c_in * tf..(b + 1) * c_in * tf], c_in, t_n, f_n, &mut cols);
                T::gemm(
                    k_n,
                    ck,
                    tf,
                    T::one(),
                    &self.weight.value.data,
                    (ck as isize, 1),
                    &cols,
                    (tf as isize, 1),
                    T::zero(),
                    &mut z[b * k_n * tf..(b + 1) * k_n * tf],
                    (tf as isize, 1),
                );
            }
        }

        // Normalise in place: z becomes xhat.
        let mut inv_std = vec![T::one(); k_n];
        if let Some(bn) = &mut self.bn {
            let count = (b_n * tf) as f64;
            for k in 0..k_n {
                let (mean, var) = if train {
                    let (mut sum, mut sq) = (0.0, 0.0);
                    for b in 0..b_n {
                        let (a, q) = plane_moments(&z[(b * k_n + k) * tf..(b * k_n + k + 1) * tf], f_n);
                        sum += a;
                        sq += q;
                    }
                    let mean = sum / count;
                    let var = (sq / count - mean * mean).max(0.0);
                    // Running variance tracks the unbiased estimate.
                    let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                    let m = T::c(BN_MOMENTUM);
                    let one_m = T::c(1.0 - BN_MOMENTUM);
                    bn.running_mean[k] = m * bn.running_mean[k] + one_m * T::c(mean);
                    bn.running_var[k] = m * bn.running_var[k] + one_m * T::c(unbiased);
                    (mean, var)
                } else {
                    (bn.running_mean[k].to_f64_lossy(), bn.running_var[k].to_f64_lossy())
                };
                let is = 1.0 / (var + BN_EPS).sqrt();
                inv_std[k] = T::c(is);
                let (mean, is) = (T::c(mean), T::c(is));
                for b in 0..b_n {
                    for v in &mut z[(b * k_n + k) * tf..(b * k_n + k + 1) * tf] {
                        *v = (*v - mean) * is;
                    }
                }
            }
        }

        let mut y = vec![T::zero(); out_s.iter().product()];
        let (pt, pf) = (self.spec.pool_t, self.spec.pool_f);
        let (to, fo) = (out_s[2], out_s[3]);
        let inv_pool = T::one() / T::c((pt * pf) as f64);
        for b in 0..b_n {
            for k in 0..k_n {
                let (scale, shift) = self.affine(k);
                let src = &z[(b * k_n + k) * tf..(b * k_n + k + 1) * tf];
                let dst = &mut y[(b * k_n + k) * to * fo..(b * k_n + k + 1) * to * fo];
                relu_pool_plane(src, dst, f_n, (pt, pf), fo, scale, shift, inv_pool);
            }
        }

        self.cache = Some(ConvCache {
            input: x.to_vec(),
            in_shape: s,
            xhat: z,
            inv_std,
            train,
        });
        Ok((y, out_s))
    }

    /// Per-channel `(scale, shift)` applied to xhat before the ReLU.
    fn affine(&self, k: usize) -> (T, T) {
        match (&self.bn, &self.bias) {
            (Some(bn), _) => (bn.gamma.value.data[k], bn.beta.value.data[k]),
            (None, Some(bias)) => (T::one(), bias.value.data[k]),
            (None, None) => (T::one(), T::zero()),
        }
    }

    /// Accumulate parameter gradients; returns the input gradient when
    /// `need_input_grad`.
    pub fn backward(&mut self, dy: &[T], need_input_grad: bool) -> Result<Option<Vec<T>>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidArgument("conv backward without forward".into()))?;
        let s = cache.in_shape;
        let out_s = self.out_shape(s)?;
        if dy.len() != out_s.iter().product::<usize>() {
            return Err(Error::shape(format!("{out_s:?}"), format!("{} values", dy.len())));
        }
        let [b_n, c_in, t_n, f_n] = s;
        let k_n = self.spec.out_channels;
        let tf = t_n * f_n;
        let ck = c_in * 9;
        let (pt, pf) = (self.spec.pool_t, self.spec.pool_f);
        let (to, fo) = (out_s[2], out_s[3]);
        let inv_pool = T::one() / T::c((pt * pf) as f64);
        let xhat = cache.xhat;

        // Through pool and ReLU, then the affine map: dxhat and affine grads.
        let mut dz = vec![T::zero(); b_n * k_n * tf];
        let mut dscale = vec![T::zero(); k_n];
        let mut dshift = vec![T::zero(); k_n];
        for b in 0..b_n {
            for k in 0..k_n {
                let (scale, shift) = self.affine(k);
                let base = (b * k_n + k) * tf;
                let g = &dy[(b * k_n + k) * to * fo..(b * k_n + k + 1) * to * fo];
                let (ds, dh) = relu_pool_backward_plane(
                    &xhat[base..base + tf],
                    g,
                    &mut dz[base..base + tf],
                    f_n,
                    (pt, pf),
                    fo,
                    scale,
                    shift,
                    inv_pool,
                );
                dscale[k] += ds;
                dshift[k] += dh;
            }
        }

        match (&mut self.bn, &mut self.bias) {
            (Some(bn), _) => {
                for k in 0..k_n {
                    bn.gamma.grad[k] += dscale[k];
                    bn.beta.grad[k] += dshift[k];
                }
                // dz currently holds dxhat; map it back to the conv output.
                let n = T::c((b_n * tf) as f64);
                for k in 0..k_n {
                    let is = cache.inv_std[k];
                    if cache.train {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for b in 0..b_n {
                            let base = (b * k_n + k) * tf;
                            for i in base..base + tf {
                                sum_d += dz[i];
                                sum_dx += dz[i] * xhat[i];
                            }
                        }
                        let (md, mdx) = (sum_d / n, sum_dx / n);
                        for b in 0..b_n {
                            let base = (b * k_n + k) * tf;
                            for i in base..base + tf {
                                dz[i] = is * (dz[i] - md - xhat[i] * mdx);
                            }
                        }
                    } else {
                        for b in 0..b_n {
                            let base = (b * k_n + k) * tf;
                            dz[base..base + tf].iter_mut().for_each(|v| *v *= is);
                        }
                    }
                }
            }
            (None, Some(bias)) => {
                for k in 0..k_n {
                    bias.grad[k] += dshift[k];
                }
            }
            (None, None) => {}
        }

        let direct = c_in <= DIRECT_MAX_IN;
        let mut rows = vec![T::zero(); if direct { 0 } else { tf * ck }];
        let mut dcols = vec![T::zero(); ck * tf];
        let mut dx = if need_input_grad {
            Some(vec![T::zero(); cache.input.len()])
        } else {
            None
        };
        for b in 0..b_n {
            let xb = &cache.input[b * c_in * tf..(b + 1) * c_in * tf];
            let dzb = &dz[b * k_n * tf..(b + 1) * k_n * tf];
            if direct {
                conv_direct_dw(xb, dzb, [c_in, k_n, t_n, f_n], &mut self.weight.grad);
            } else {
                im2row(xb, c_in, t_n, f_n, &mut rows);
                // dW += dZ_b * rows
                T::gemm(
                    k_n,
                    tf,
                    ck,
                    T::one(),
                    dzb,
                    (tf as isize, 1),
                    &rows,
                    (ck as isize, 1),
                    T::one(),
                    &mut self.weight.grad,
                    (ck as isize, 1),
                );
            }
            if let Some(dx) = &mut dx {
                // dcols = W^T * dZ_b
                T::gemm(
                    ck,
                    k_n,
                    tf,
                    T::one(),
                    &self.weight.value.data,
                    (1, ck as isize),
                    dzb,
                    (tf as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (tf as isize, 1),
                );
                col2im(&dcols, c_in, t_n, f_n, &mut dx[b * c_in * tf..(b + 1) * c_in * tf]);
            }
        }
        Ok(dx)
    }
}

impl<T: Real> Trainable<T> for ConvBlock<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
        if let Some(bn) = &mut self.bn {
            f(&mut bn.gamma);
            f(&mut bn.beta);
        }
    }
}

/// Sum and sum of squares of a plane, accumulated per row in `T` and
/// across rows in f64.
fn plane_moments<T: Real>(plane: &[T], row_len: usize) -> (f64, f64) {
    let (mut sum, mut sq) = (0.0, 0.0);
    for row in plane.chunks_exact(row_len) {
        let mut a = [T::zero(); 8];
        let mut q = [T::zero(); 8];
        let mut chunks = row.chunks_exact(8);
        for c in &mut chunks {
            for i in 0..8 {
                a[i] += c[i];
                q[i] += c[i] * c[i];
            }
        }
        for &v in chunks.remainder() {
            a[0] += v;
            q[0] += v * v;
        }
        sum += a.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        sq += q.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
    }
    (sum, sq)
}

/// `dst += avgpool(relu(scale * src + shift))` for one `T x F` plane.
#[allow(clippy::too_many_arguments)]
fn relu_pool_plane<T: Real>(
    src: &[T],
    dst: &mut [T],
    f_n: usize,
    (pt, pf): (usize, usize),
    fo: usize,
    scale: T,
    shift: T,
    inv_pool: T,
) {
    for (orow, out) in dst.chunks_exact_mut(fo).enumerate() {
        for dt in 0..pt {
            let row = &src[(orow * pt + dt) * f_n..][..fo * pf];
            for (o, win) in out.iter_mut().zip(row.chunks_exact(pf)) {
                let mut acc = T::zero();
                for &v in win {
                    acc += (scale * v + shift).max(T::zero());
                }
                *o += acc * inv_pool;
            }
        }
    }
}

/// Backward of [`relu_pool_plane`]: writes `d/dsrc` into `dsrc` and returns
/// the `(scale, shift)` gradients.
#[allow(clippy::too_many_arguments)]
fn relu_pool_backward_plane<T: Real>(
    src: &[T],
    g: &[T],
    dsrc: &mut [T],
    f_n: usize,
    (pt, pf): (usize, usize),
    fo: usize,
    scale: T,
    shift: T,
    inv_pool: T,
) -> (T, T) {
    let (mut ds, mut dh) = (T::zero(), T::zero());
    for (orow, gout) in g.chunks_exact(fo).enumerate() {
        for dt in 0..pt {
            let off = (orow * pt + dt) * f_n;
            let row = &src[off..][..fo * pf];
            let drow = &mut dsrc[off..][..fo * pf];
            for ((&gv, win), dwin) in gout.iter().zip(row.chunks_exact(pf)).zip(drow.chunks_exact_mut(pf)) {
                let d = gv * inv_pool;
                for (&v, dv) in win.iter().zip(dwin.iter_mut()) {
                    if scale * v + shift > T::zero() {
                        ds += d * v;
                        dh += d;
                        *dv = d * scale;
                    }
                }
            }
        }
    }
    (ds, dh)
}

/// `cols[(c*9 + ky*3 + kx), t*F + f] = x[c, t+ky-1, f+kx-1]`, zero outside.
fn im2col<T: Real>(x: &[T], c_n: usize, t_n: usize, f_n: usize, cols: &mut [T]) {
    let tf = t_n * f_n;
    for c in 0..c_n {
        let xc = &x[c * tf..(c + 1) * tf];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * tf..(c * 9 + ky * 3 + kx + 1) * tf];
                for t in 0..t_n {
                    let dst = &mut row[t * f_n..(t + 1) * f_n];
                    let ts = t as isize + ky as isize - 1;
                    if ts < 0 || ts >= t_n as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[ts as usize * f_n..(ts as usize + 1) * f_n];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..f_n - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..f_n - 1].copy_from_slice(&src[1..]);
                            dst[f_n - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Inputs this narrow skip im2col: with few channels the column buffer
/// costs more memory traffic than the arithmetic it feeds.
const DIRECT_MAX_IN: usize = 4;

/// `z[kx-shifted] += w * x` along one frequency row (zero padding).
#[inline]
fn axpy_shift<T: Real>(w: T, x: &[T], z: &mut [T], kx: usize) {
    let n = z.len();
    match kx {
        0 => z[1..].iter_mut().zip(&x[..n - 1]).for_each(|(o, &v)| *o += w * v),
        1 => z.iter_mut().zip(x).for_each(|(o, &v)| *o += w * v),
        _ => z[..n - 1].iter_mut().zip(&x[1..]).for_each(|(o, &v)| *o += w * v),
    }
}

/// Dot product with eight independent partial sums so it vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// One item: `z[K, T, F] += conv3x3(x[C, T, F], w[K, C, 3, 3])`.
fn conv_direct<T: Real>(x: &[T], w: &[T], [c_n, k_n, t_n, f_n]: [usize; 4], z: &mut [T]) {
    let tf = t_n * f_n;
    for k in 0..k_n {
        for t in 0..t_n {
            let zrow = &mut z[k * tf + t * f_n..][..f_n];
            for c in 0..c_n {
                for ky in 0..3 {
                    let Some(ts) = (t + ky).checked_sub(1).filter(|&v| v < t_n) else {
                        continue;
                    };
                    let xrow = &x[c * tf + ts * f_n..][..f_n];
                    for kx in 0..3 {
                        axpy_shift(w[((k * c_n + c) * 3 + ky) * 3 + kx], xrow, zrow, kx);
                    }
                }
            }
        }
    }
}

/// One item: `dw[K, C, 3, 3] += sum_{t,f} dz[k, t, f] * x[c, t+ky-1, f+kx-1]`.
fn conv_direct_dw<T: Real>(x: &[T], dz: &[T], [c_n, k_n, t_n, f_n]: [usize; 4], dw: &mut [T]) {
    let tf = t_n * f_n;
    let n = f_n;
    for k in 0..k_n {
        for c in 0..c_n {
            for ky in 0..3 {
                let mut acc = [T::zero(); 3];
                for t in 0..t_n {
                    let Some(ts) = (t + ky).checked_sub(1).filter(|&v| v < t_n) else {
                        continue;
                    };
                    let g = &dz[k * tf + t * f_n..][..f_n];
                    let xr = &x[c * tf + ts * f_n..][..f_n];
                    acc[0] += dot(&g[1..], &xr[..n - 1]);
                    acc[1] += dot(g, xr);
                    acc[2] += dot(&g[..n - 1], &xr[1..]);
                }
                let o = ((k * c_n + c) * 3 + ky) * 3;
                for kx in 0..3 {
                    dw[o + kx] += acc[kx];
                }
            }
        }
    }
}

/// Transposed [`im2col`]: `rows[t*F + f, c*9 + ky*3 + kx]`. The weight
/// gradient GEMM runs much faster on this layout than on a strided view.
fn im2row<T: Real>(x: &[T], c_n: usize, t_n: usize, f_n: usize, rows: &mut [T]) {
    let tf = t_n * f_n;
    let ck = c_n * 9;
    for t in 0..t_n {
        for f in 0..f_n {
            let dst = &mut rows[(t * f_n + f) * ck..][..ck];
            for c in 0..c_n {
                let xc = &x[c * tf..(c + 1) * tf];
                for ky in 0..3 {
                    let ts = t as isize + ky as isize - 1;
                    for kx in 0..3 {
                        let fs = f as isize + kx as isize - 1;
                        dst[c * 9 + ky * 3 + kx] = if ts < 0 || fs < 0 || ts >= t_n as isize || fs >= f_n as isize {
                            T::zero()
                        } else {
                            xc[ts as usize * f_n + fs as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
fn col2im<T: Real>(cols: &[T], c_n: usize, t_n: usize, f_n: usize, dx: &mut [T]) {
    let tf = t_n * f_n;
    for c in 0..c_n {
        let dxc = &mut dx[c * tf..(c + 1) * tf];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * tf..(c * 9 + ky * 3 + kx + 1) * tf];
                for t in 0..t_n {
                    let ts = t as isize + ky as isize - 1;
                    if ts < 0 || ts >= t_n as isize {
                        continue;
                    }
                    let src = &row[t * f_n..(t + 1) * f_n];
                    let dst = &mut dxc[ts as usize * f_n..(ts as usize + 1) * f_n];
                    match kx {
                        0 => dst[..f_n - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..f_n - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

/// Mean over `bands` contiguous frequency groups: `B x C x T x F -> B x T x (C * bands)`.
/// Band `j` covers bins `j*F/bands .. (j+1)*F/bands`.
pub fn freq_pool<T: Real>(x: &[T], s: Shape4, bands: usize) -> Result<Vec<T>> {
    let [b_n, c_n, t_n, f_n] = s;
    if bands == 0 || bands > f_n {
        return Err(Error::InvalidArgument(format!("cannot pool {f_n} bins into {bands} bands")));
    }
    let d = c_n * bands;
    let mut out = vec![T::zero(); b_n * t_n * d];
    for b in 0..b_n {
        for c in 0..c_n {
            for t in 0..t_n {
                let row = &x[((b * c_n + c) * t_n + t) * f_n..][..f_n];
                for j in 0..bands {
                    let (lo, hi) = (j * f_n / bands, (j + 1) * f_n / bands);
                    let m = row[lo..hi].iter().copied().sum::<T>() / T::c((hi - lo) as f64);
                    out[(b * t_n + t) * d + c * bands + j] = m;
                }
            }
        }
    }
    Ok(out)
}

pub fn freq_pool_backward<T: Real>(dy: &[T], s: Shape4, bands: usize) -> Vec<T> {
    let [b_n, c_n, t_n, f_n] = s;
    let d = c_n * bands;
    let mut dx = vec![T::zero(); s.iter().product()];
    for b in 0..b_n {
        for c in 0..c_n {
            for t in 0..t_n {
                let row = &mut dx[((b * c_n + c) * t_n + t) * f_n..][..f_n];
                for j in 0..bands {
                    let (lo, hi) = (j * f_n / bands, (j + 1) * f_n / bands);
                    let g = dy[(b * t_n + t) * d + c * bands + j] / T::c((hi - lo) as f64);
                    row[lo..hi].iter_mut().for_each(|v| *v = g);
                }
            }
        }
    }
    dx
}
