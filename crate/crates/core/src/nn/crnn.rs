//! Conv blocks -> frequency pooling -> BiGRU -> sigmoid head.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::objectives::{LossConfig, LossKind};
use crate::real::Real;
use crate::seed;

use super::conv::{freq_pool, freq_pool_backward, ConvBlock, ConvSpec, Shape4};
use super::gru::BiGru;
use super::head::Head;
use super::param::{Param, Trainable};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrnnConfig {
    pub input_channels: usize,
    pub conv_blocks: Vec<ConvSpec>,
    /// Number of frequency bands kept by the pooling before the GRU.
    pub freq_bands: usize,
    pub gru_units: usize,
    pub n_classes: usize,
    /// Frames averaged by the head to reach the label rate.
    pub label_pool: usize,
    pub batch_norm: bool,
}

impl Default for CrnnConfig {
    fn default() -> Self {
        Self {
            input_channels: 4,
            conv_blocks: parse_conv_blocks("16:2x2,32:2x2,64:1x2").unwrap(),
            freq_bands: 4,
            gru_units: 32,
            n_classes: 12,
            label_pool: 2,
            batch_norm: true,
        }
    }
}

/// Parse `"16:2x2,32:2x2,64:1x2"` (out channels : time pool x freq pool).
pub fn parse_conv_blocks(s: &str) -> Result<Vec<ConvSpec>> {
    let bad = || Error::Config(format!("bad conv block list '{s}' (expected e.g. 16:2x2,32:2x2)"));
    s.split(',')
        .map(|part| {
            let (k, pools) = part.trim().split_once(':').ok_or_else(bad)?;
            let (pt, pf) = pools.split_once('x').ok_or_else(bad)?;
            let spec = ConvSpec {
                out_channels: k.trim().parse().map_err(|_| bad())?,
                pool_t: pt.trim().parse().map_err(|_| bad())?,
                pool_f: pf.trim().parse().map_err(|_| bad())?,
            };
            if spec.out_channels == 0 || spec.pool_t == 0 || spec.pool_f == 0 {
                return Err(bad());
            }
            Ok(spec)
        })
        .collect()
}

pub fn conv_blocks_string(blocks: &[ConvSpec]) -> String {
    blocks
        .iter()
        .map(|b| format!("{}:{}x{}", b.out_channels, b.pool_t, b.pool_f))
        .collect::<Vec<_>>()
        .join(",")
}

impl CrnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.conv_blocks.is_empty() {
            return Err(Error::Config("model needs input channels and at least one conv block".into()));
        }
        if self.freq_bands == 0 || self.gru_units == 0 || self.n_classes == 0 || self.label_pool == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        Ok(())
    }

    /// Feature frames per label frame.
    pub fn time_downsample(&self) -> usize {
        self.conv_blocks.iter().map(|b| b.pool_t).product::<usize>() * self.label_pool
    }

    pub fn freq_downsample(&self) -> usize {
        self.conv_blocks.iter().map(|b| b.pool_f).product()
    }

    /// Label frames produced for `frames` input frames, or an error if the
    /// pooling does not tile the input exactly.
    pub fn output_frames(&self, frames: usize) -> Result<usize> {
        let k = self.time_downsample();
        if frames == 0 || frames % k != 0 {
            return Err(Error::Config(format!(
                "{frames} input frames are not a multiple of the model's time downsampling {k}"
            )));
        }
        Ok(frames / k)
    }

    pub fn gru_input(&self) -> usize {
        self.conv_blocks.last().map_or(0, |b| b.out_channels) * self.freq_bands
    }
}

impl fmt::Display for CrnnConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "in={};blocks={};bands={};gru={};classes={};label_pool={};bn={}",
            self.input_channels,
            conv_blocks_string(&self.conv_blocks),
            self.freq_bands,
            self.gru_units,
            self.n_classes,
            self.label_pool,
            self.batch_norm as u8
        )
    }
}

impl FromStr for CrnnConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = CrnnConfig::default();
        let bad = |k: &str| Error::Config(format!("bad model field '{k}' in '{s}'"));
        for kv in s.split(';') {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(kv))?;
            let num = || v.parse::<usize>().map_err(|_| bad(k));
            match k {
                "in" => cfg.input_channels = num()?,
                "blocks" => cfg.conv_blocks = parse_conv_blocks(v)?,
                "bands" => cfg.freq_bands = num()?,
                "gru" => cfg.gru_units = num()?,
                "classes" => cfg.n_classes = num()?,
                "label_pool" => cfg.label_pool = num()?,
                "bn" => cfg.batch_norm = num()? != 0,
                _ => return Err(bad(k)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct Crnn<T> {
    pub cfg: CrnnConfig,
    pub blocks: Vec<ConvBlock<T>>,
    pub gru: BiGru<T>,
    pub head: Head<T>,
    pooled: Option<Shape4>,
}

impl<T: Real> Crnn<T> {
    pub fn new(cfg: &CrnnConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(init_seed, &[seed::tag("init")]);
        let mut c = cfg.input_channels;
        let blocks = cfg
            .conv_blocks
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let b = ConvBlock::new(&format!("conv{i}"), c, *spec, cfg.batch_norm, &mut rng);
                c = spec.out_channels;
                b
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            gru: BiGru::new("gru", cfg.gru_input(), cfg.gru_units, &mut rng),
            head: Head::new("head", 2 * cfg.gru_units, cfg.n_classes, cfg.label_pool, &mut rng),
            pooled: None,
        })
    }

    /// `x`: `B x C x T x F` features. Returns `B x T_lab x L` probabilities.
    pub fn forward(&mut self, x: &[T], shape: Shape4, train: bool) -> Result<Vec<T>> {
        if shape[1] != self.cfg.input_channels {
            return Err(Error::shape(
                format!("{} input channels", self.cfg.input_channels),
                format!("{}", shape[1]),
            ));
        }
        self.cfg.output_frames(shape[2])?;
        let mut h = x.to_vec();
        let mut s = shape;
        for b in &mut self.blocks {
            let (y, ys) = b.forward(&h, s, train)?;
            h = y;
            s = ys;
        }
        let seq = freq_pool(&h, s, self.cfg.freq_bands)?;
        self.pooled = Some(s);
        let g = self.gru.forward(&seq, s[0], s[2])?;
        let out = self.head.forward(&g, s[0], s[2])?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite model output".into()));
        }
        Ok(out)
    }

    /// Accumulate parameter gradients for the last forward pass.
    pub fn backward(&mut self, dpred: &[T]) -> Result<()> {
        let s = self
            .pooled
            .take()
            .ok_or_else(|| Error::InvalidArgument("model backward without forward".into()))?;
        let dg = self.head.backward(dpred)?;
        let dseq = self.gru.backward(&dg)?;
        let mut d = freq_pool_backward(&dseq, s, self.cfg.freq_bands);
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            match b.backward(&d, i > 0)? {
                Some(dx) => d = dx,
                None => debug_assert_eq!(i, 0),
            }
        }
        Ok(())
    }

    /// Forward, loss, backward. Gradients accumulate into the parameters.
    pub fn loss_and_grad(
        &mut self,
        x: &[T],
        shape: Shape4,
        target: &[T],
        loss: LossKind,
        loss_cfg: &LossConfig,
    ) -> Result<(T, Vec<T>)> {
        let pred = self.forward(x, shape, true)?;
        let lv = loss.evaluate(&pred, target, shape[0], loss_cfg)?;
        if !lv.value.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        self.backward(&lv.grad)?;
        Ok((lv.value, pred))
    }

    /// Convert precision, keeping every parameter, moment and BN statistic.
    pub fn cast<U: Real>(&self) -> Crnn<U> {
        let mut out = Crnn::<U>::new(&self.cfg, 0).expect("config already validated");
        let mut src: Vec<Param<U>> = Vec::new();
        let mut me = self.clone();
        me.visit_params(&mut |p| src.push(p.cast()));
        let mut it = src.into_iter();
        out.visit_params(&mut |p| *p = it.next().expect("same architecture"));
        for (a, b) in out.blocks.iter_mut().zip(&self.blocks) {
            if let (Some(x), Some(y)) = (&mut a.bn, &b.bn) {
                x.running_mean = y.running_mean.iter().map(|v| U::c(v.to_f64_lossy())).collect();
                x.running_var = y.running_var.iter().map(|v| U::c(v.to_f64_lossy())).collect();
            }
        }
        out
    }

    /// Parameter values plus BN running statistics, by name.
    pub fn named_state(&mut self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.value.shape.clone(), p.value.data.clone())));
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(bn) = &b.bn {
                out.push((format!("conv{i}.bn.running_mean"), vec![bn.running_mean.len()], bn.running_mean.clone()));
                out.push((format!("conv{i}.bn.running_var"), vec![bn.running_var.len()], bn.running_var.clone()));
            }
        }
        out
    }

    /// Mutable access to a BN running-statistics buffer by name.
    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Vec<T>> {
        let rest = name.strip_prefix("conv")?;
        let (idx, field) = rest.split_once('.')?;
        let bn = self.blocks.get_mut(idx.parse::<usize>().ok()?)?.bn.as_mut()?;
        match field {
            "bn.running_mean" => Some(&mut bn.running_mean),
            "bn.running_var" => Some(&mut bn.running_var),
            _ => None,
        }
    }
}

impl<T: Real> Trainable<T> for Crnn<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.blocks {
            b.visit_params(f);
        }
        self.gru.visit_params(f);
        self.head.visit_params(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_string_roundtrip() {
        let c = CrnnConfig::default();
        let s = c.to_string();
        assert_eq!(s, "in=4;blocks=16:2x2,32:2x2,64:1x2;bands=4;gru=32;classes=12;label_pool=2;bn=1");
        assert_eq!(s.parse::<CrnnConfig>().unwrap(), c);
        assert_eq!(c.time_downsample(), 8);
        assert_eq!(c.output_frames(320).unwrap(), 40);
        assert!(c.output_frames(321).is_err());
        assert!(parse_conv_blocks("16:2").is_err());
        assert!(parse_conv_blocks("0:1x1").is_err());
    }

    #[test]
    fn forward_shapes_and_range() {
        let cfg = CrnnConfig {
            conv_blocks: parse_conv_blocks("4:2x2,8:1x2").unwrap(),
            gru_units: 5,
            n_classes: 3,
            ..Default::default()
        };
        let mut m = Crnn::<f32>::new(&cfg, 1).unwrap();
        let x: Vec<f32> = (0..2 * 4 * 16 * 16).map(|i| ((i % 13) as f32 - 6.0) / 4.0).collect();
        let y = m.forward(&x, [2, 4, 16, 16], true).unwrap();
        assert_eq!(y.len(), 2 * 4 * 3);
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(m.forward(&x, [2, 4, 16, 16], false).is_ok());
        assert!(m.forward(&x[..2 * 4 * 15 * 16], [2, 4, 15, 16], true).is_err());
    }

    #[test]
    fn cast_roundtrip_preserves_outputs() {
        let cfg = CrnnConfig {
            conv_blocks: parse_conv_blocks("4:2x2").unwrap(),
            freq_bands: 2,
            gru_units: 3,
            n_classes: 2,
            input_channels: 1,
            ..Default::default()
        };
        let mut m = Crnn::<f32>::new(&cfg, 4).unwrap();
        let x: Vec<f32> = (0..8 * 8).map(|i| (i as f32 * 0.37).sin()).collect();
        let a = m.forward(&x, [1, 1, 8, 8], false).unwrap();
        let mut m64: Crnn<f64> = m.cast();
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let b = m64.forward(&x64, [1, 1, 8, 8], false).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((*p as f64 - q).abs() < 1e-5);
        }
    }
}
