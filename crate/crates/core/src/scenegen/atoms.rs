//! Event atoms: twelve synthetic signal families that are separable by their
//! spectro-temporal pattern.
//!
//! | atom | family                                   |
//! |------|------------------------------------------|
//! | 0-3  | harmonic stacks                          |
//! | 4    | repeating exponential up-chirp           |
//! | 5    | repeating exponential down-chirp         |
//! | 6-9  | band-limited noise bursts                |
//! | 10   | amplitude-modulated tone, slow           |
//! | 11   | amplitude-modulated tone pair, fast      |
//!
//! Harmonic fundamentals are multiples of `24000 / 1024` Hz, so every partial
//! sits on an STFT bin centre of the analysis grid.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

pub const ATOM_COUNT: usize = 12;

/// 8, 12, 20 and 32 bins of 23.4375 Hz.
pub const HARMONIC_FUNDAMENTALS_HZ: [f64; 4] = [187.5, 281.25, 468.75, 750.0];
const HARMONIC_CEILING_HZ: f64 = 9000.0;
const NOISE_CENTRES_HZ: [f64; 4] = [600.0, 1500.0, 3000.0, 6000.0];
const FADE_S: f64 = 0.01;

/// Synthesise `n` samples of `atom`, normalised to unit RMS with 10 ms fades.
pub fn synthesize_atom<R: Rng + ?Sized>(atom: usize, n: usize, sample_rate: f64, rng: &mut R) -> Vec<f64> {
    let mut x = match atom {
        0..=3 => harmonic(HARMONIC_FUNDAMENTALS_HZ[atom], n, sample_rate, rng),
        4 => chirp(400.0, 3200.0, 0.6, n, sample_rate),
        5 => chirp(4800.0, 900.0, 0.45, n, sample_rate),
        6..=9 => noise_band(NOISE_CENTRES_HZ[atom - 6], n, sample_rate, rng),
        10 => am_tone(&[1100.0], 5.0, n, sample_rate),
        11 => am_tone(&[2600.0, 5200.0], 13.0, n, sample_rate),
        _ => panic!("atom {atom} out of range"),
    };
    normalise(&mut x);
    fade(&mut x, (FADE_S * sample_rate).round() as usize);
    x
}

fn harmonic<R: Rng + ?Sized>(f0: f64, n: usize, fs: f64, rng: &mut R) -> Vec<f64> {
    let partials: Vec<(f64, f64, f64)> = (1..)
        .map(|k| k as f64 * f0)
        .take_while(|&f| f < HARMONIC_CEILING_HZ)
        .enumerate()
        .map(|(i, f)| (f, 1.0 / (i + 1) as f64, rng.random::<f64>() * 2.0 * PI))
        .collect();
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            partials.iter().map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum()
        })
        .collect()
}

fn chirp(f_start: f64, f_end: f64, period_s: f64, n: usize, fs: f64) -> Vec<f64> {
    let ratio = (f_end / f_start).ln();
    // Phase of an exponential sweep, restarted every period.
    (0..n)
        .map(|i| {
            let t = (i as f64 / fs) % period_s;
            let k = ratio / period_s;
            let phase = 2.0 * PI * f_start * ((k * t).exp() - 1.0) / k;
            phase.sin()
        })
        .collect()
}

fn noise_band<R: Rng + ?Sized>(centre: f64, n: usize, fs: f64, rng: &mut R) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let bp = Biquad::bandpass(centre, 4.0, fs);
    bp.run(&bp.run(&white))
}

fn am_tone(carriers: &[f64], mod_hz: f64, n: usize, fs: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let env = 0.55 + 0.45 * (2.0 * PI * mod_hz * t).sin();
            env * carriers.iter().map(|&f| (2.0 * PI * f * t).sin()).sum::<f64>()
        })
        .collect()
}

fn normalise(x: &mut [f64]) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
}

fn fade(x: &mut [f64], len: usize) {
    let len = len.min(x.len() / 2);
    let n = x.len();
    for i in 0..len {
        let g = (i as f64 + 0.5) / len as f64;
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
}

/// RBJ constant-peak bandpass.
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn bandpass(centre: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * centre / fs;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
        }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }
}
