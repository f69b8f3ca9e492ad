//! Versioned binary checkpoints, little-endian:
//!
//! ```text
//! magic "SEDCKPT\0" | u32 version | u64 config hash | u64 adam step
//! | u32 len + norm-stats reference (UTF-8) | u32 len + model config (UTF-8)
//! | u32 blob count | blobs
//! blob: u32 len + name | u32 ndim | ndim x u32 dims | f32 data
//! ```
//!
//! Parameters are stored under their own names, Adam moments under
//! `<name>.adam_m` / `<name>.adam_v`, BN statistics under
//! `convN.bn.running_mean` / `convN.bn.running_var`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::adam::Adam;
use super::crnn::{Crnn, CrnnConfig};
use super::param::Trainable;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Crnn<f32>,
    pub adam: Adam,
    pub config_hash: u64,
    pub norm_ref: String,
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

fn put_blob(b: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_str(b, name);
    b.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.config_hash.to_le_bytes());
        b.extend_from_slice(&self.adam.step.to_le_bytes());
        put_str(&mut b, &self.norm_ref);
        put_str(&mut b, &self.model.cfg.to_string());
        let mut model = self.model.clone();
        let mut blobs: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        model.visit_params(&mut |p| {
            blobs.push((p.name.clone(), p.value.shape.clone(), p.value.data.clone()));
            blobs.push((format!("{}.adam_m", p.name), p.value.shape.clone(), p.adam_m.clone()));
            blobs.push((format!("{}.adam_v", p.name), p.value.shape.clone(), p.adam_v.clone()));
        });
        blobs.extend(model.named_state().into_iter().filter(|(n, _, _)| n.contains("running_")));
        b.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (name, shape, data) in &blobs {
            put_blob(&mut b, name, shape, data);
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.u64()?;
        let step = r.u64()?;
        let norm_ref = r.string()?;
        let cfg: CrnnConfig = r.string()?.parse()?;
        let n = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let nd = r.u32()? as usize;
            let shape: Vec<usize> = (0..nd).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count * 4)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            blobs.push((name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }

        let mut model = Crnn::<f32>::new(&cfg, 0)?;
        let mut missing = Vec::new();
        let find = |name: &str, shape: &[usize]| {
            blobs
                .iter()
                .find(|(n, s, _)| n == name && s == shape)
                .map(|(_, _, d)| d.clone())
        };
        model.visit_params(&mut |p| {
            let shape = p.value.shape.clone();
            match (
                find(&p.name, &shape),
                find(&format!("{}.adam_m", p.name), &shape),
                find(&format!("{}.adam_v", p.name), &shape),
            ) {
                (Some(v), Some(m), Some(s)) => {
                    p.value.data = v;
                    p.adam_m = m;
                    p.adam_v = s;
                }
                _ => missing.push(p.name.clone()),
            }
        });
        for (name, _, data) in blobs.iter().filter(|(n, _, _)| n.contains("running_")) {
            match model.buffer_mut(name) {
                Some(buf) if buf.len() == data.len() => buf.clone_from(data),
                _ => missing.push(name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Data(format!("checkpoint is missing {}", missing.join(", "))));
        }
        if blobs.iter().any(|(_, _, d)| d.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("checkpoint contains non-finite values".into()));
        }
        Ok(Self {
            model,
            adam: Adam {
                step,
                ..Adam::default()
            },
            config_hash,
            norm_ref,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::crnn::parse_conv_blocks;

    fn small() -> CrnnConfig {
        CrnnConfig {
            conv_blocks: parse_conv_blocks("3:2x2,4:1x2").unwrap(),
            gru_units: 3,
            n_classes: 2,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut model = Crnn::<f32>::new(&small(), 3).unwrap();
        let x: Vec<f32> = (0..4 * 8 * 16).map(|i| (i as f32 * 0.1).cos()).collect();
        model.forward(&x, [1, 4, 8, 16], true).unwrap();
        model.visit_params(&mut |p| p.adam_m.iter_mut().for_each(|m| *m = 0.125));
        let ck = Checkpoint {
            model,
            adam: Adam {
                step: 17,
                ..Adam::default()
            },
            config_hash: 0xdead_beef,
            norm_ref: "norm.bin".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert_eq!((back.adam.step, back.config_hash, back.norm_ref.as_str()), (17, 0xdead_beef, "norm.bin"));
        let mut a = ck.model.clone();
        let mut b = back.model.clone();
        assert_eq!(a.forward(&x, [1, 4, 8, 16], false).unwrap(), b.forward(&x, [1, 4, 8, 16], false).unwrap());
    }

    #[test]
    fn corrupt_files_rejected() {
        let ck = Checkpoint {
            model: Crnn::<f32>::new(&small(), 3).unwrap(),
            adam: Adam::default(),
            config_hash: 1,
            norm_ref: String::new(),
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"SEDCKPT\0\x09\0\0\0").is_err());
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }
}
