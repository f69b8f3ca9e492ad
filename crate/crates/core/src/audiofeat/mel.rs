//! HTK-style triangular mel filterbank.

use crate::error::{Error, Result};

use super::{MelConfig, StftConfig};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `n_mels x n_bins` weights, row-major, peak weight 1 at each centre.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    /// Edge frequencies; filter `k` spans `edges[k]..edges[k + 2]`, peak at `edges[k + 1]`.
    pub edges_hz: Vec<f64>,
    /// Per filter, the half-open range of bins with nonzero weight.
    support: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.n_bins..(k + 1) * self.n_bins]
    }

    pub fn centre_hz(&self, k: usize) -> f64 {
        self.edges_hz[k + 1]
    }

    /// Apply to one power-spectrum frame.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let (a, b) = self.support[k];
            let row = &self.weights[k * self.n_bins..];
            *o = (a..b).map(|j| row[j] * power[j]).sum();
        }
    }
}

pub fn mel_filterbank(mel: &MelConfig, stft: &StftConfig) -> Result<MelFilterbank> {
    stft.validate()?;
    mel.validate(stft.sample_rate)?;
    let n_bins = stft.n_bins();
    let lo = hz_to_mel(mel.f_min);
    let hi = hz_to_mel(mel.f_max);
    let n_edges = mel.n_mels + 2;
    let edges_hz: Vec<f64> = (0..n_edges)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_edges - 1) as f64))
        .collect();
    let bin_hz = stft.sample_rate as f64 / stft.fft_size as f64;
    let mut weights = vec![0.0; mel.n_mels * n_bins];
    let mut support = Vec::with_capacity(mel.n_mels);
    for k in 0..mel.n_mels {
        let (l, c, u) = (edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]);
        let mut first = n_bins;
        let mut last = 0;
        for j in 0..n_bins {
            let f = j as f64 * bin_hz;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < u {
                (u - f) / (u - c)
            } else {
                0.0
            };
            if w > 0.0 {
                weights[k * n_bins + j] = w;
                first = first.min(j);
                last = j + 1;
            }
        }
        if last == 0 {
            return Err(Error::Config(format!(
                "mel filter {k} ({l:.1}-{u:.1} Hz) covers no FFT bin; too many mel bands for this FFT size"
            )));
        }
        support.push((first, last));
    }
    Ok(MelFilterbank {
        n_mels: mel.n_mels,
        n_bins,
        weights,
        edges_hz,
        support,
    })
}
