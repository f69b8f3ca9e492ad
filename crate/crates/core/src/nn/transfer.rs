//! First-layer weight replication for moving a model pretrained on fewer
//! input channels to more.

use crate::error::{Error, Result};
use crate::real::Real;

use super::crnn::{Crnn, CrnnConfig};
use super::param::{Tensor, Trainable};

/// `K x C_pre x 3 x 3 -> K x C x 3 x 3`: input-channel slices tiled
/// cyclically, scaled by `C_pre / C` so that identical copies of the
/// pretraining input give the same pre-activation.
pub fn replicate_first_layer<T: Real>(w: &Tensor<T>, target_channels: usize) -> Result<Tensor<T>> {
    if w.shape.len() != 4 {
        return Err(Error::shape("K x C x kh x kw", format!("{:?}", w.shape)));
    }
    let [k_n, c_pre, kh, kw] = [w.shape[0], w.shape[1], w.shape[2], w.shape[3]];
    if c_pre == 0 || c_pre > target_channels {
        return Err(Error::InvalidArgument(format!(
            "cannot replicate {c_pre} pretrained input channels to {target_channels}"
        )));
    }
    let scale = T::c(c_pre as f64 / target_channels as f64);
    let plane = kh * kw;
    let mut out = Tensor::zeros(&[k_n, target_channels, kh, kw]);
    for k in 0..k_n {
        for c in 0..target_channels {
            let src = &w.data[(k * c_pre + c % c_pre) * plane..][..plane];
            let dst = &mut out.data[(k * target_channels + c) * plane..][..plane];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s * scale);
        }
    }
    Ok(out)
}

/// Build a `target` model initialised from `pretrained`: the first conv
/// weight is replicated, every other parameter and BN statistic with a
/// matching name and shape is copied, Adam moments start from zero.
pub fn transfer_from<T: Real>(pretrained: &Crnn<T>, target: &CrnnConfig, init_seed: u64) -> Result<Crnn<T>> {
    let mut src = pretrained.clone();
    let mut dst = Crnn::<T>::new(target, init_seed)?;
    let state = src.named_state();
    let first = format!("{}", dst.blocks[0].weight.name);
    let mut copied = 0usize;
    let mut missing = Vec::new();
    dst.visit_params(&mut |p| {
        let Some((_, shape, data)) = state.iter().find(|(n, _, _)| *n == p.name) else {
            missing.push(p.name.clone());
            return;
        };
        if p.name == first && *shape != p.value.shape {
            match Tensor::from_vec(shape, data.clone()).and_then(|w| replicate_first_layer(&w, p.value.shape[1])) {
                Ok(w) if w.shape == p.value.shape => {
                    p.value = w;
                    copied += 1;
                }
                _ => missing.push(p.name.clone()),
            }
        } else if *shape == p.value.shape {
            p.value.data.clone_from(data);
            copied += 1;
        } else {
            missing.push(p.name.clone());
        }
    });
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "pretrained model does not match target architecture: {}",
            missing.join(", ")
        )));
    }
    for (name, _, data) in state.iter().filter(|(n, _, _)| n.contains("running_")) {
        if let Some(buf) = dst.buffer_mut(name) {
            if buf.len() == data.len() {
                buf.clone_from(data);
            }
        }
    }
    debug_assert!(copied > 0);
    Ok(dst)
}
