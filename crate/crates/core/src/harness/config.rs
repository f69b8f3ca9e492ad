//! Experiment configuration and its flat `key=value` text form.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::nn::{conv_blocks_string, parse_conv_blocks, CrnnConfig};
use crate::objectives::{LossKind, DEFAULT_THRESHOLD};
use crate::scenegen::FormatKind;

use super::chunk::{seconds_to_label_frames, FEATURE_FRAMES_PER_LABEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channels {
    Mono,
    All,
}

impl Channels {
    pub fn name(&self) -> &'static str {
        match self {
            Channels::Mono => "mono",
            Channels::All => "all",
        }
    }

    pub fn count(&self) -> usize {
        match self {
            Channels::Mono => 1,
            Channels::All => 4,
        }
    }
}

impl fmt::Display for Channels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channels {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mono" => Ok(Channels::Mono),
            "all" => Ok(Channels::All),
            other => Err(Error::Config(format!("unknown channel setting '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transfer {
    Scratch,
    MonoPretrained,
}

impl Transfer {
    pub fn name(&self) -> &'static str {
        match self {
            Transfer::Scratch => "scratch",
            Transfer::MonoPretrained => "mono_pretrained",
        }
    }
}

impl fmt::Display for Transfer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Transfer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Transfer::Scratch),
            "mono_pretrained" | "transfer" => Ok(Transfer::MonoPretrained),
            other => Err(Error::Config(format!("unknown transfer mode '{other}'"))),
        }
    }
}

/// Augmentation used by the later experiments: all four techniques for
/// FOA, everything except mixup for MIC.
pub fn format_default_augment(format: FormatKind) -> AugmentConfig {
    match format {
        FormatKind::Foa => AugmentConfig::with_flags(true, true, true, true),
        FormatKind::Mic => AugmentConfig::with_flags(false, true, true, true),
    }
}

/// Parse `"none"` or a `+`-joined subset of `MU`, `CO`, `FS`, `CS`.
pub fn parse_augment_flags(s: &str) -> Result<AugmentConfig> {
    let mut a = AugmentConfig::default();
    if s.trim().eq_ignore_ascii_case("none") || s.trim().is_empty() {
        return Ok(a);
    }
    for part in s.split('+') {
        match part.trim().to_ascii_uppercase().as_str() {
            "MU" => a.mu = true,
            "CO" => a.co = true,
            "FS" => a.fs = true,
            "CS" => a.cs = true,
            other => return Err(Error::Config(format!("unknown augmentation '{other}'"))),
        }
    }
    Ok(a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub format: FormatKind,
    pub channels: Channels,
    pub augment: AugmentConfig,
    pub loss: LossKind,
    pub transfer: Transfer,
    pub chunk_s: f64,
    pub chunk_hop_s: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Backbone; `input_channels` is overridden by `channels`.
    pub model: CrnnConfig,
    pub threshold: f32,
    /// Mono pretraining corpus. `None` uses the training split of `dataset`.
    pub pretrain_dataset: Option<PathBuf>,
    pub pretrain_epochs: usize,
    /// Training-chunk hop during pretraining.
    pub pretrain_hop_s: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            format: FormatKind::Foa,
            channels: Channels::All,
            augment: AugmentConfig::default(),
            loss: LossKind::Bce,
            transfer: Transfer::Scratch,
            chunk_s: 4.0,
            chunk_hop_s: 0.5,
            epochs: 30,
            batch: 32,
            seed: 0,
            model: CrnnConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            pretrain_dataset: None,
            pretrain_epochs: 10,
            pretrain_hop_s: 0.5,
        }
    }
}

const KEYS: &[&str] = &[
    "dataset",
    "format",
    "channels",
    "augment",
    "loss",
    "transfer",
    "chunk_s",
    "chunk_hop_s",
    "epochs",
    "batch",
    "seed",
    "conv_blocks",
    "freq_bands",
    "gru_units",
    "n_classes",
    "label_pool",
    "batch_norm",
    "threshold",
    "pretrain_dataset",
    "pretrain_epochs",
    "pretrain_hop_s",
];

impl ExperimentConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Set one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = || Error::Config(format!("bad value '{v}' for {key}"));
        let us = || v.parse::<usize>().map_err(|_| bad());
        let fl = || v.parse::<f64>().map_err(|_| bad());
        match key.trim() {
            "dataset" => self.dataset = PathBuf::from(v),
            "format" => self.format = v.parse()?,
            "channels" => self.channels = v.parse()?,
            "augment" => self.augment = parse_augment_flags(v)?,
            "loss" => self.loss = v.parse()?,
            "transfer" => self.transfer = v.parse()?,
            "chunk_s" => self.chunk_s = fl()?,
            "chunk_hop_s" => self.chunk_hop_s = fl()?,
            "epochs" => self.epochs = us()?,
            "batch" => self.batch = us()?,
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            "conv_blocks" => self.model.conv_blocks = parse_conv_blocks(v)?,
            "freq_bands" => self.model.freq_bands = us()?,
            "gru_units" => self.model.gru_units = us()?,
            "n_classes" => self.model.n_classes = us()?,
            "label_pool" => self.model.label_pool = us()?,
            "batch_norm" => {
                self.model.batch_norm = match v {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    _ => return Err(bad()),
                }
            }
            "threshold" => self.threshold = v.parse().map_err(|_| bad())?,
            "pretrain_dataset" => self.pretrain_dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "pretrain_epochs" => self.pretrain_epochs = us()?,
            "pretrain_hop_s" => self.pretrain_hop_s = fl()?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines on top of `self`. `#` starts a comment line.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Canonical text form; every key, fixed order.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        put("dataset", self.dataset.display().to_string());
        put("format", self.format.to_string());
        put("channels", self.channels.to_string());
        put("augment", self.augment.label());
        put("loss", self.loss.name().into());
        put("transfer", self.transfer.to_string());
        put("chunk_s", self.chunk_s.to_string());
        put("chunk_hop_s", self.chunk_hop_s.to_string());
        put("epochs", self.epochs.to_string());
        put("batch", self.batch.to_string());
        put("seed", self.seed.to_string());
        put("conv_blocks", conv_blocks_string(&m.conv_blocks));
        put("freq_bands", m.freq_bands.to_string());
        put("gru_units", m.gru_units.to_string());
        put("n_classes", m.n_classes.to_string());
        put("label_pool", m.label_pool.to_string());
        put("batch_norm", (m.batch_norm as u8).to_string());
        put("threshold", self.threshold.to_string());
        put(
            "pretrain_dataset",
            self.pretrain_dataset
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        put("pretrain_epochs", self.pretrain_epochs.to_string());
        put("pretrain_hop_s", self.pretrain_hop_s.to_string());
        s
    }

    /// First 16 hex digits of SHA-256 over [`ExperimentConfig::to_kv`].
    pub fn hash_hex(&self) -> String {
        let d = Sha256::digest(self.to_kv().as_bytes());
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash_u64(&self) -> u64 {
        let d = Sha256::digest(self.to_kv().as_bytes());
        u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
    }

    /// Model configuration with the input width implied by `channels`.
    pub fn model_config(&self) -> CrnnConfig {
        CrnnConfig {
            input_channels: self.channels.count(),
            ..self.model.clone()
        }
    }

    /// Augmentation actually applied: channel swap needs four channels.
    pub fn effective_augment(&self) -> AugmentConfig {
        let mut a = self.augment;
        if self.channels == Channels::Mono {
            a.cs = false;
        }
        a
    }

    pub fn validate(&self) -> Result<()> {
        let chunk = seconds_to_label_frames(self.chunk_s)?;
        seconds_to_label_frames(self.chunk_hop_s)?;
        seconds_to_label_frames(self.pretrain_hop_s)?;
        if chunk == 0 {
            return Err(Error::Config("chunk_s must be positive".into()));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if self.transfer == Transfer::MonoPretrained && self.pretrain_epochs == 0 {
            return Err(Error::Config("mono pretraining needs pretrain_epochs > 0".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must be in (0, 1)".into()));
        }
        self.augment.validate()?;
        let m = self.model_config();
        m.validate()?;
        if m.time_downsample() != FEATURE_FRAMES_PER_LABEL {
            return Err(Error::Config(format!(
                "model maps {} feature frames to a label frame; the label grid needs {FEATURE_FRAMES_PER_LABEL}",
                m.time_downsample()
            )));
        }
        m.output_frames(chunk * FEATURE_FRAMES_PER_LABEL)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip_and_hash() {
        let mut c = ExperimentConfig::default();
        c.apply_kv("format=mic\naugment=CO+FS\nloss=bce_dice\n# comment\n\ntransfer=mono_pretrained\nseed=7")
            .unwrap();
        let back = ExperimentConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash_hex(), c.hash_hex());
        assert_eq!(c.hash_hex().len(), 16);
        let mut d = c.clone();
        d.seed = 8;
        assert_ne!(d.hash_hex(), c.hash_hex());
        assert_eq!(u64::from_str_radix(&c.hash_hex(), 16).unwrap(), c.hash_u64());
    }

    #[test]
    fn every_key_is_emitted() {
        let kv = ExperimentConfig::default().to_kv();
        let keys: Vec<&str> = kv.lines().map(|l| l.split_once('=').unwrap().0).collect();
        assert_eq!(keys, KEYS);
    }

    #[test]
    fn invalid_settings() {
        assert!(ExperimentConfig::from_kv("format=xyz").is_err());
        assert!(ExperimentConfig::from_kv("nope=1").is_err());
        assert!(ExperimentConfig::from_kv("chunk_s=4.05").is_err());
        assert!(ExperimentConfig::from_kv("epochs=0").is_err());
        // 16x pooling in time no longer lands on the 100 ms label grid.
        assert!(ExperimentConfig::from_kv("conv_blocks=16:4x2,32:2x2,64:1x2").is_err());
        assert!(matches!(ExperimentConfig::from_kv("line without equals"), Err(Error::Config(_))));
    }

    #[test]
    fn augment_flags() {
        assert_eq!(parse_augment_flags("none").unwrap(), AugmentConfig::default());
        let a = parse_augment_flags("mu+cs").unwrap();
        assert!(a.mu && a.cs && !a.co && !a.fs);
        assert_eq!(a.label(), "MU+CS");
        assert!(parse_augment_flags("MU+XX").is_err());
        let m = format_default_augment(FormatKind::Mic);
        assert_eq!(m.label(), "CO+FS+CS");
    }

    #[test]
    fn mono_disables_channel_swap() {
        let mut c = ExperimentConfig::default();
        c.augment = AugmentConfig::with_flags(true, true, true, true);
        c.channels = Channels::Mono;
        assert!(!c.effective_augment().cs);
        assert_eq!(c.model_config().input_channels, 1);
    }
}
