//! Centered short-time Fourier transform.
//!
//! Unnormalised forward DFT, `X[k] = sum_n w[n] x[n] exp(-2 pi i k n / R)`,
//! one-sided (`R/2 + 1` bins). Under this convention Parseval reads
//! `sum_n (w x)^2 = (|X_0|^2 + 2 sum_{0<k<R/2} |X_k|^2 + |X_{R/2}|^2) / R`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_traits::Zero;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

use super::StftConfig;

/// `frames x bins` complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Stft {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Stft {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, k: usize) -> Complex64 {
        self.data[t * self.bins + k]
    }
}

/// Periodic Hann window, `w[n] = 0.5 (1 - cos(2 pi n / R))`.
pub(crate) fn hann(r: usize) -> Vec<f64> {
    (0..r).map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / r as f64).cos())).collect()
}

/// numpy-style `reflect` index (edge sample not repeated), periodic for
/// pads longer than the signal.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let p = 2 * (n as isize - 1);
    let m = i.rem_euclid(p);
    if m >= n as isize {
        (p - m) as usize
    } else {
        m as usize
    }
}

pub(crate) struct StftPlan {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub(crate) fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: *cfg,
            window: hann(cfg.fft_size),
            fft: FftPlanner::new().plan_fft_forward(cfg.fft_size),
        })
    }

    pub(crate) fn run(&self, x: &[f64]) -> Result<Stft> {
        if x.is_empty() {
            return Err(Error::InvalidArgument("stft of empty signal".into()));
        }
        let r = self.cfg.fft_size;
        let bins = self.cfg.n_bins();
        let frames = self.cfg.n_frames(x.len());
        let pad = if self.cfg.centered { (r / 2) as isize } else { 0 };
        let mut buf = vec![Complex64::zero(); r];
        let mut scratch = vec![Complex64::zero(); self.fft.get_inplace_scratch_len()];
        let mut data = Vec::with_capacity(frames * bins);
        for t in 0..frames {
            let start = (t * self.cfg.hop) as isize - pad;
            for (n, b) in buf.iter_mut().enumerate() {
                let i = start + n as isize;
                let v = if self.cfg.centered {
                    x[reflect(i, x.len())]
                } else if i >= 0 && (i as usize) < x.len() {
                    x[i as usize]
                } else {
                    0.0
                };
                *b = Complex64::new(v * self.window[n], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..bins]);
        }
        Ok(Stft { frames, bins, data })
    }
}

pub fn stft(x: &[f64], cfg: &StftConfig) -> Result<Stft> {
    StftPlan::new(cfg)?.run(x)
}

/// `|X|^2`, `frames x bins`.
pub fn power_spectrogram(s: &Stft) -> Vec<f64> {
    s.data.iter().map(|c| c.norm_sqr()).collect()
}
