//! Synthetic polyphonic multichannel scenes.
//!
//! Scenes are rendered in two 4-channel formats:
//! - FOA: frequency-flat first-order ambisonic gains `[W, Y, Z, X]`,
//! - MIC: a far-field tetrahedral array where each capsule sees the source
//!   delayed by its projected path difference.
//!
//! Labels are produced alongside the audio on the 100 ms label grid.

mod atoms;
mod dataset;
mod render;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_traits::Zero;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

pub use atoms::{synthesize_atom, ATOM_COUNT, HARMONIC_FUNDAMENTALS_HZ};
pub use dataset::{
    generate_dataset, generate_scene_specs, label_path, read_dataset_config, read_label_csv, read_manifest,
    read_wav, wav_path, write_label_csv, write_wav, DatasetConfig, ManifestEntry, Split,
};
pub use render::{fractional_delay, render_scene, render_scene_parts, RenderedParts, RenderedScene};

pub const DEFAULT_SAMPLE_RATE: u32 = 24_000;
pub const SPEED_OF_SOUND: f64 = 343.0;
/// Trajectory resolution in seconds.
pub const TRAJECTORY_STEP_S: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct EventSpec {
    pub class_id: usize,
    pub onset_s: f64,
    pub duration_s: f64,
    /// Signal family used to synthesise the event.
    pub atom: usize,
    /// RMS amplitude of the synthesised atom.
    pub gain: f64,
    /// `(azimuth, elevation)` in radians, one entry per 100 ms.
    pub trajectory: Vec<(f64, f64)>,
}

impl EventSpec {
    pub fn trajectory_len(duration_s: f64) -> usize {
        ((duration_s / TRAJECTORY_STEP_S) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn offset_s(&self) -> f64 {
        self.onset_s + self.duration_s
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.class_id >= n_classes {
            return Err(Error::InvalidArgument(format!("class {} >= {n_classes}", self.class_id)));
        }
        if !(self.onset_s >= 0.0) || !(self.duration_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "event needs onset >= 0 and duration > 0 (got {}, {})",
                self.onset_s, self.duration_s
            )));
        }
        if self.atom >= ATOM_COUNT {
            return Err(Error::InvalidArgument(format!("unknown atom {}", self.atom)));
        }
        if !self.gain.is_finite() || self.gain < 0.0 {
            return Err(Error::InvalidArgument(format!("bad gain {}", self.gain)));
        }
        let want = Self::trajectory_len(self.duration_s);
        if self.trajectory.len() != want {
            return Err(Error::InvalidArgument(format!(
                "trajectory has {} points, expected {want}",
                self.trajectory.len()
            )));
        }
        for &(az, el) in &self.trajectory {
            check_angles(az, el)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub duration_s: f64,
    pub events: Vec<EventSpec>,
    /// SNR of the diffuse noise relative to the event power; `inf` disables noise.
    pub noise_snr_db: f64,
    pub seed: u64,
    pub sample_rate: u32,
    pub n_classes: usize,
}

impl SceneSpec {
    pub fn new(duration_s: f64, events: Vec<EventSpec>, noise_snr_db: f64, seed: u64) -> Self {
        Self {
            duration_s,
            events,
            noise_snr_db,
            seed,
            sample_rate: DEFAULT_SAMPLE_RATE,
            n_classes: 12,
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    pub fn label_frames(&self) -> usize {
        ((self.duration_s * 10.0) - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(Error::InvalidArgument(format!("bad scene duration {}", self.duration_s)));
        }
        if self.noise_snr_db.is_nan() {
            return Err(Error::InvalidArgument("noise SNR is NaN".into()));
        }
        for ev in &self.events {
            ev.validate(self.n_classes)?;
            if ev.offset_s() > self.duration_s + 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "event ends at {:.3} s after scene end {:.3} s",
                    ev.offset_s(),
                    self.duration_s
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FormatKind {
    Foa,
    Mic,
}

impl FormatKind {
    pub fn name(&self) -> &'static str {
        match self {
            FormatKind::Foa => "foa",
            FormatKind::Mic => "mic",
        }
    }

    pub fn array(&self) -> ArrayFormat {
        match self {
            FormatKind::Foa => ArrayFormat::Foa,
            FormatKind::Mic => ArrayFormat::Mic(MicArray::tetrahedral()),
        }
    }
}

impl fmt::Display for FormatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FormatKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "foa" => Ok(FormatKind::Foa),
            "mic" => Ok(FormatKind::Mic),
            other => Err(Error::Config(format!("unknown format '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicArray {
    pub capsule_dirs: [[f64; 3]; 4],
    pub radius: f64,
    pub speed_of_sound: f64,
}

impl MicArray {
    /// Capsules at (45°, 35°), (−45°, −35°), (135°, −35°), (−135°, 35°), radius 4.2 cm.
    pub fn tetrahedral() -> Self {
        let d = |az: f64, el: f64| doa_vector(az.to_radians(), el.to_radians());
        Self {
            capsule_dirs: [d(45.0, 35.0), d(-45.0, -35.0), d(135.0, -35.0), d(-135.0, 35.0)],
            radius: 0.042,
            speed_of_sound: SPEED_OF_SOUND,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !(self.speed_of_sound > 0.0) {
            return Err(Error::InvalidArgument("radius and speed of sound must be positive".into()));
        }
        for d in &self.capsule_dirs {
            check_unit(d)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayFormat {
    Foa,
    Mic(MicArray),
}

impl ArrayFormat {
    pub fn channels(&self) -> usize {
        4
    }

    pub fn kind(&self) -> FormatKind {
        match self {
            ArrayFormat::Foa => FormatKind::Foa,
            ArrayFormat::Mic(_) => FormatKind::Mic,
        }
    }
}

/// `C x N` sample buffer, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelAudio {
    channels: usize,
    sample_rate: u32,
    data: Vec<f32>,
}

impl MultichannelAudio {
    pub fn zeros(channels: usize, n_samples: usize, sample_rate: u32) -> Self {
        Self {
            channels,
            sample_rate,
            data: vec![0.0; channels * n_samples],
        }
    }

    pub fn from_channels(channels: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self> {
        let n = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidArgument("channels differ in length".into()));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite audio sample".into()));
        }
        Ok(Self {
            channels: channels.len(),
            sample_rate,
            data: channels.concat(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn n_samples(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.data.len() / self.channels
        }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.n_samples();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.n_samples();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Single-channel copy of channel `c`.
    pub fn select(&self, c: usize) -> Result<Self> {
        if c >= self.channels {
            return Err(Error::InvalidArgument(format!("channel {c} of {}", self.channels)));
        }
        Ok(Self {
            channels: 1,
            sample_rate: self.sample_rate,
            data: self.channel(c).to_vec(),
        })
    }

    pub fn peak(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

fn check_angles(az: f64, el: f64) -> Result<()> {
    if !az.is_finite() || !el.is_finite() {
        return Err(Error::InvalidArgument("non-finite angle".into()));
    }
    if !(az > -PI - 1e-12 && az <= PI + 1e-12) || el.abs() > PI / 2.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!("angles out of domain: az {az}, el {el}")));
    }
    Ok(())
}

fn check_unit(v: &[f64; 3]) -> Result<()> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("vector norm {n} is not 1")));
    }
    Ok(())
}

/// Wrap an azimuth onto `(-pi, pi]`.
pub fn wrap_azimuth(az: f64) -> f64 {
    let mut a = (az + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Unit vector `[x, y, z]` for an azimuth/elevation pair.
pub fn doa_vector(azimuth: f64, elevation: f64) -> [f64; 3] {
    [
        azimuth.cos() * elevation.cos(),
        azimuth.sin() * elevation.cos(),
        elevation.sin(),
    ]
}

/// First-order ambisonic gains in `[W, Y, Z, X]` order.
pub fn foa_response(azimuth: f64, elevation: f64) -> Result<[f64; 4]> {
    if !azimuth.is_finite() || !elevation.is_finite() {
        return Err(Error::InvalidArgument("non-finite angle".into()));
    }
    Ok([
        1.0,
        azimuth.sin() * elevation.cos(),
        elevation.sin(),
        azimuth.cos() * elevation.cos(),
    ])
}

/// Far-field phase term for STFT bin `bin`: `exp(-j 2 pi bin d f_s / (R v))`.
pub fn mic_phase(bin: usize, path_diff: f64, fft_size: usize, sample_rate: f64, speed_of_sound: f64) -> Result<Complex64> {
    if fft_size == 0 || !(sample_rate > 0.0) || !(speed_of_sound > 0.0) {
        return Err(Error::InvalidArgument("fft size, sample rate and speed of sound must be positive".into()));
    }
    if bin > fft_size / 2 {
        return Err(Error::InvalidArgument(format!("bin {bin} above Nyquist bin {}", fft_size / 2)));
    }
    if bin == 0 || path_diff.is_zero() {
        return Ok(Complex64::new(1.0, 0.0));
    }
    let phase = -2.0 * PI * bin as f64 * path_diff * sample_rate / (fft_size as f64 * speed_of_sound);
    Ok(Complex64::from_polar(1.0, phase))
}

/// Extra travel distance to a capsule relative to the array centre.
pub fn path_difference(capsule_dir: &[f64; 3], doa: &[f64; 3], radius: f64) -> Result<f64> {
    check_unit(capsule_dir)?;
    check_unit(doa)?;
    let dot: f64 = capsule_dir.iter().zip(doa).map(|(a, b)| a * b).sum();
    Ok(-radius * dot)
}
