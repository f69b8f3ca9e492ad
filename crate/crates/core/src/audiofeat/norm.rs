//! Per-(channel, mel bin) z-score statistics.
//!
//! File layout (little-endian): 8-byte magic, `u32` channels, `u32` bins,
//! then `C*F` f64 means followed by `C*F` f64 standard deviations.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::FeatureTensor;

pub const NORM_MAGIC: &[u8; 8] = b"SEDNORM\0";
const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub channels: usize,
    pub bins: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation over every frame of every
    /// tensor. Two passes, accumulated in input order.
    pub fn fit<'a, I>(tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureTensor>,
        I::IntoIter: Clone,
    {
        let it = tensors.into_iter();
        let first = it
            .clone()
            .next()
            .ok_or_else(|| Error::InvalidArgument("normalisation needs at least one tensor".into()))?;
        let (channels, _, bins) = first.shape();
        let mut sum = vec![0.0f64; channels * bins];
        let mut count = 0usize;
        for x in it.clone() {
            if x.channels() != channels || x.bins() != bins {
                return Err(Error::shape(
                    format!("{channels}x*x{bins}"),
                    format!("{}x*x{}", x.channels(), x.bins()),
                ));
            }
            accumulate(x, &mut sum, |v, _| v);
            count += x.frames();
        }
        if count == 0 {
            return Err(Error::InvalidArgument("normalisation tensors have no frames".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0f64; channels * bins];
        for x in it {
            accumulate(x, &mut sq, |v, i| (v - mean[i]).powi(2));
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self {
            channels,
            bins,
            mean,
            std,
        })
    }

    fn check(&self, x: &FeatureTensor) -> Result<()> {
        if x.channels() != self.channels || x.bins() != self.bins {
            return Err(Error::shape(
                format!("{}x*x{}", self.channels, self.bins),
                format!("{}x*x{}", x.channels(), x.bins()),
            ));
        }
        Ok(())
    }

    /// `(x - mean) / std`.
    pub fn apply(&self, x: &FeatureTensor) -> Result<FeatureTensor> {
        self.check(x)?;
        let mut out = x.clone();
        self.map(&mut out, |v, m, s| (v - m) / s);
        out.normalized = true;
        Ok(out)
    }

    /// `x * std + mean`.
    pub fn unapply(&self, x: &FeatureTensor) -> Result<FeatureTensor> {
        self.check(x)?;
        let mut out = x.clone();
        self.map(&mut out, |v, m, s| v * s + m);
        out.normalized = false;
        Ok(out)
    }

    fn map(&self, x: &mut FeatureTensor, f: impl Fn(f64, f64, f64) -> f64) {
        let (c_n, t_n, f_n) = x.shape();
        let values = x.values_mut();
        for c in 0..c_n {
            for t in 0..t_n {
                let row = &mut values[(c * t_n + t) * f_n..][..f_n];
                for (b, v) in row.iter_mut().enumerate() {
                    let i = c * f_n + b;
                    *v = f(*v as f64, self.mean[i], self.std[i]) as f32;
                }
            }
        }
    }

    /// Keep the statistics of one channel.
    pub fn select_channel(&self, c: usize) -> Result<Self> {
        if c >= self.channels {
            return Err(Error::InvalidArgument(format!("channel {c} of {}", self.channels)));
        }
        let r = c * self.bins..(c + 1) * self.bins;
        Ok(Self {
            channels: 1,
            bins: self.bins,
            mean: self.mean[r.clone()].to_vec(),
            std: self.std[r].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(16 + 16 * self.mean.len());
        b.extend_from_slice(NORM_MAGIC);
        b.extend_from_slice(&(self.channels as u32).to_le_bytes());
        b.extend_from_slice(&(self.bins as u32).to_le_bytes());
        for v in self.mean.iter().chain(&self.std) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < 16 || &b[..8] != NORM_MAGIC {
            return Err(Error::Data("not a normalisation statistics file".into()));
        }
        let channels = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let bins = u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize;
        let n = channels * bins;
        if b.len() != 16 + 16 * n {
            return Err(Error::Data(format!(
                "normalisation file length {} does not match {channels}x{bins}",
                b.len()
            )));
        }
        let vals: Vec<f64> = b[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let stats = Self {
            channels,
            bins,
            mean: vals[..n].to_vec(),
            std: vals[n..].to_vec(),
        };
        if stats.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || stats.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Data("normalisation file has invalid statistics".into()));
        }
        Ok(stats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn accumulate(x: &FeatureTensor, acc: &mut [f64], f: impl Fn(f64, usize) -> f64) {
    let (c_n, t_n, f_n) = x.shape();
    for c in 0..c_n {
        for t in 0..t_n {
            for b in 0..f_n {
                let i = c * f_n + b;
                acc[i] += f(x.get(c, t, b) as f64, i);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(c: usize, t: usize, f: usize, seed: u64) -> FeatureTensor {
        use rand::Rng;
        let mut rng = crate::seed::rng(seed, &[]);
        let v = (0..c * t * f).map(|i| rng.random_range(-20.0..5.0) + (i % f) as f32).collect();
        FeatureTensor::new(c, t, f, v, 80.0).unwrap()
    }

    #[test]
    fn applied_training_set_is_standardised() {
        let xs = [tensor(2, 50, 6, 1), tensor(2, 30, 6, 2)];
        let s = NormStats::fit(&xs).unwrap();
        let zs: Vec<FeatureTensor> = xs.iter().map(|x| s.apply(x).unwrap()).collect();
        let again = NormStats::fit(&zs).unwrap();
        assert!(again.mean.iter().all(|m| m.abs() < 1e-6));
        assert!(again.std.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn constant_bin_is_floored() {
        let x = FeatureTensor::new(1, 4, 1, vec![3.0; 4], 80.0).unwrap();
        let s = NormStats::fit([&x]).unwrap();
        assert_eq!(s.std[0], STD_FLOOR);
        assert!(s.apply(&x).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn file_roundtrip_is_bit_identical() {
        let x = tensor(4, 40, 8, 3);
        let s = NormStats::fit([&x]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.bin");
        s.save(&p).unwrap();
        let back = NormStats::load(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.apply(&x).unwrap(), s.apply(&x).unwrap());
    }

    #[test]
    fn unapply_inverts_apply() {
        let x = tensor(2, 20, 5, 4);
        let s = NormStats::fit([&x]).unwrap();
        let y = s.unapply(&s.apply(&x).unwrap()).unwrap();
        for (a, b) in x.values().iter().zip(y.values()) {
            // f32 storage: error relative to the value's magnitude.
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(NormStats::fit(std::iter::empty::<&FeatureTensor>()).is_err());
        let s = NormStats::fit([&tensor(2, 5, 3, 0)]).unwrap();
        assert!(s.apply(&tensor(1, 5, 3, 0)).is_err());
        assert!(NormStats::from_bytes(b"garbage").is_err());
        let mut b = s.to_bytes();
        b.pop();
        assert!(NormStats::from_bytes(&b).is_err());
    }
}
