//! Log-mel features for multichannel audio.
//!
//! `audio -> stft -> |.|^2 -> mel filterbank -> ln(x + floor) -> z-score`

mod mel;
mod norm;
mod stft;

pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, MelFilterbank};
pub use norm::{NormStats, NORM_MAGIC};
pub use stft::{power_spectrogram, stft, Stft};

use crate::error::{Error, Result};
use crate::scenegen::MultichannelAudio;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    /// Reflection-pad `fft_size / 2` samples on both sides.
    pub centered: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop: 300,
            sample_rate: 24_000,
            centered: true,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() || self.fft_size < 2 {
            return Err(Error::Config(format!("fft size {} is not a power of two", self.fft_size)));
        }
        if self.hop == 0 || self.hop >= self.fft_size {
            return Err(Error::Config(format!("hop {} must be in 1..fft_size", self.hop)));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples / self.hop + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            f_min: 50.0,
            f_max: 12_000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!(
                "mel band {}..{} Hz invalid for {} Hz audio",
                self.f_min, self.f_max, sample_rate
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }
}

/// `C x T x F` features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    channels: usize,
    frames: usize,
    bins: usize,
    values: Vec<f32>,
    pub frame_rate: f64,
    pub normalized: bool,
}

impl FeatureTensor {
    pub fn new(channels: usize, frames: usize, bins: usize, values: Vec<f32>, frame_rate: f64) -> Result<Self> {
        if values.len() != channels * frames * bins {
            return Err(Error::shape(
                format!("{channels}x{frames}x{bins}"),
                format!("{} values", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(Self {
            channels,
            frames,
            bins,
            values,
            frame_rate,
            normalized: false,
        })
    }

    pub fn zeros(channels: usize, frames: usize, bins: usize, frame_rate: f64) -> Self {
        Self {
            channels,
            frames,
            bins,
            values: vec![0.0; channels * frames * bins],
            frame_rate,
            normalized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.frames, self.bins)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, c: usize, t: usize, f: usize) -> usize {
        (c * self.frames + t) * self.bins + f
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, f: usize) -> f32 {
        self.values[self.index(c, t, f)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, t: usize, f: usize, v: f32) {
        let i = self.index(c, t, f);
        self.values[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.frames * self.bins;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.frames * self.bins;
        &mut self.values[c * n..(c + 1) * n]
    }

    /// Frames `start..start + len` of every channel.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(Error::InvalidArgument(format!(
                "frames {start}..{} out of range ({} frames)",
                start + len,
                self.frames
            )));
        }
        let mut values = Vec::with_capacity(self.channels * len * self.bins);
        for c in 0..self.channels {
            let base = self.index(c, start, 0);
            values.extend_from_slice(&self.values[base..base + len * self.bins]);
        }
        Ok(self.like(self.channels, len, values))
    }

    /// Like [`FeatureTensor::slice_frames`] but zero-pads past the end.
    pub fn slice_frames_padded(&self, start: usize, len: usize) -> Self {
        let mut out = self.like(self.channels, len, vec![0.0; self.channels * len * self.bins]);
        let avail = self.frames.saturating_sub(start).min(len);
        for c in 0..self.channels {
            let src = self.index(c, start.min(self.frames), 0);
            let dst = out.index(c, 0, 0);
            out.values[dst..dst + avail * self.bins].copy_from_slice(&self.values[src..src + avail * self.bins]);
        }
        out
    }

    /// Keep only channel `c`.
    pub fn select_channel(&self, c: usize) -> Result<Self> {
        if c >= self.channels {
            return Err(Error::InvalidArgument(format!("channel {c} of {}", self.channels)));
        }
        Ok(self.like(1, self.frames, self.channel(c).to_vec()))
    }

    fn like(&self, channels: usize, frames: usize, values: Vec<f32>) -> Self {
        Self {
            channels,
            frames,
            bins: self.bins,
            values,
            frame_rate: self.frame_rate,
            normalized: self.normalized,
        }
    }
}

/// STFT plan plus filterbank, reusable across recordings.
pub struct FeatureExtractor {
    stft_cfg: StftConfig,
    mel_cfg: MelConfig,
    plan: stft::StftPlan,
    bank: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(stft_cfg: StftConfig, mel_cfg: MelConfig) -> Result<Self> {
        Ok(Self {
            plan: stft::StftPlan::new(&stft_cfg)?,
            bank: mel_filterbank(&mel_cfg, &stft_cfg)?,
            stft_cfg,
            mel_cfg,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn stft_config(&self) -> &StftConfig {
        &self.stft_cfg
    }

    /// Log-mel of one channel, `T x F` row-major.
    pub fn logmel_channel(&self, x: &[f64]) -> Result<Vec<f32>> {
        let s = self.plan.run(x)?;
        Ok(self.logmel_from_power(&power_spectrogram(&s), s.frames))
    }

    /// `ln(power x melᵀ + floor)` for a `frames x bins` power spectrogram.
    pub fn logmel_from_power(&self, power: &[f64], frames: usize) -> Vec<f32> {
        let f = self.mel_cfg.n_mels;
        let mut out = vec![0.0f32; frames * f];
        let mut mel = vec![0.0; f];
        for t in 0..frames {
            self.bank.apply(&power[t * self.bank.n_bins..(t + 1) * self.bank.n_bins], &mut mel);
            for (o, m) in out[t * f..(t + 1) * f].iter_mut().zip(&mel) {
                *o = (m + self.mel_cfg.log_floor).ln() as f32;
            }
        }
        out
    }

    /// Unnormalised log-mel features of every channel.
    pub fn logmel(&self, audio: &MultichannelAudio) -> Result<FeatureTensor> {
        if audio.sample_rate() != self.stft_cfg.sample_rate {
            return Err(Error::Data(format!(
                "audio at {} Hz, features expect {} Hz",
                audio.sample_rate(),
                self.stft_cfg.sample_rate
            )));
        }
        let c_n = audio.channels();
        let frames = self.stft_cfg.n_frames(audio.n_samples());
        let mut values = Vec::with_capacity(c_n * frames * self.mel_cfg.n_mels);
        for c in 0..c_n {
            let x: Vec<f64> = audio.channel(c).iter().map(|&v| v as f64).collect();
            values.extend(self.logmel_channel(&x)?);
        }
        FeatureTensor::new(c_n, frames, self.mel_cfg.n_mels, values, self.stft_cfg.frame_rate())
    }
}

pub fn logmel(audio: &MultichannelAudio, stft_cfg: &StftConfig, mel_cfg: &MelConfig) -> Result<FeatureTensor> {
    FeatureExtractor::new(*stft_cfg, *mel_cfg)?.logmel(audio)
}
