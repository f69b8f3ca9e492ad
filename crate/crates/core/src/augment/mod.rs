//! Spectrogram augmentation: mixup (MU), cutout family (CO), frequency
//! shift (FS) and channel swap (CS).
//!
//! All operations act on normalised features. Randomness comes from
//! counter-based streams keyed by `(batch seed, technique, sample index)`,
//! so a sample's augmentation does not depend on how the batch is split
//! across threads.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::audiofeat::FeatureTensor;
use crate::error::{Error, Result};
use crate::objectives::LabelGrid;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: FeatureTensor,
    pub labels: LabelGrid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub mu: bool,
    pub co: bool,
    pub fs: bool,
    pub cs: bool,
    pub p_mixup: f64,
    pub p_other: f64,
    pub mixup_beta: (f64, f64),
    /// Mixup is skipped when the drawn weight falls in this closed band.
    pub mixup_skip_band: (f64, f64),
    pub fs_max_bins: usize,
    pub cutout_area: (f64, f64),
    pub multi_cutouts: usize,
    pub multi_cutout_size: usize,
    pub specaug_time_frac: f64,
    pub specaug_freq_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mu: false,
            co: false,
            fs: false,
            cs: false,
            p_mixup: 0.8,
            p_other: 0.5,
            mixup_beta: (0.5, 0.5),
            mixup_skip_band: (0.3, 0.7),
            fs_max_bins: 10,
            cutout_area: (0.02, 0.30),
            multi_cutouts: 8,
            multi_cutout_size: 8,
            specaug_time_frac: 0.15,
            specaug_freq_frac: 0.20,
        }
    }
}

impl AugmentConfig {
    pub fn with_flags(mu: bool, co: bool, fs: bool, cs: bool) -> Self {
        Self {
            mu,
            co,
            fs,
            cs,
            ..Default::default()
        }
    }

    pub fn any(&self) -> bool {
        self.mu || self.co || self.fs || self.cs
    }

    /// `"none"` or e.g. `"MU+FS"`.
    pub fn label(&self) -> String {
        let names: Vec<&str> = [(self.mu, "MU"), (self.co, "CO"), (self.fs, "FS"), (self.cs, "CS")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        let open = |p: f64| p > 0.0 && p < 1.0;
        if !unit(self.p_mixup) || !unit(self.p_other) {
            return Err(Error::Config("augmentation probabilities must be in [0,1]".into()));
        }
        if !(self.mixup_beta.0 > 0.0 && self.mixup_beta.1 > 0.0) {
            return Err(Error::Config("mixup Beta parameters must be positive".into()));
        }
        let (a, b) = self.cutout_area;
        if !(open(a) && open(b) && a <= b) || !open(self.specaug_time_frac) || !open(self.specaug_freq_frac) {
            return Err(Error::Config("augmentation fractions must be in (0,1)".into()));
        }
        if self.multi_cutout_size == 0 {
            return Err(Error::Config("cutout patch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Technique {
    Mixup,
    Cutout,
    FreqShift,
    ChannelSwap,
}

impl Technique {
    pub const ALL: [Technique; 4] = [
        Technique::Mixup,
        Technique::Cutout,
        Technique::FreqShift,
        Technique::ChannelSwap,
    ];

    fn stream_tag(&self) -> u64 {
        seed::tag(match self {
            Technique::Mixup => "aug/mu",
            Technique::Cutout => "aug/co",
            Technique::FreqShift => "aug/fs",
            Technique::ChannelSwap => "aug/cs",
        })
    }
}

/// Random stream for one technique applied to sample `index` of a batch.
pub fn technique_rng(batch_seed: u64, technique: Technique, index: usize) -> ChaCha8Rng {
    seed::rng(batch_seed, &[technique.stream_tag(), index as u64])
}

fn check_same_shape(a: &Sample, b: &Sample) -> Result<()> {
    if a.features.shape() != b.features.shape()
        || (a.labels.frames(), a.labels.classes()) != (b.labels.frames(), b.labels.classes())
    {
        return Err(Error::shape(
            format!("{:?}", a.features.shape()),
            format!("{:?}", b.features.shape()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------- mixup

/// Mix with weight `lambda`; weights inside `skip_band` return `a` as is.
pub fn mixup_with(a: &Sample, b: &Sample, lambda: f64, skip_band: (f64, f64)) -> Result<Sample> {
    check_same_shape(a, b)?;
    if lambda >= skip_band.0 && lambda <= skip_band.1 {
        return Ok(a.clone());
    }
    let mix = |x: f32, y: f32| (lambda * x as f64 + (1.0 - lambda) * y as f64) as f32;
    let mut features = a.features.clone();
    for (o, y) in features.values_mut().iter_mut().zip(b.features.values()) {
        *o = mix(*o, *y);
    }
    let labels: Vec<f32> = a
        .labels
        .values()
        .iter()
        .zip(b.labels.values())
        .map(|(&x, &y)| mix(x, y).clamp(0.0, 1.0))
        .collect();
    Ok(Sample {
        features,
        labels: LabelGrid::from_vec(a.labels.frames(), a.labels.classes(), labels)?,
    })
}

pub fn mixup<R: Rng + ?Sized>(a: &Sample, b: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    let beta = Beta::new(cfg.mixup_beta.0, cfg.mixup_beta.1).map_err(|e| Error::Config(e.to_string()))?;
    let lambda = beta.sample(rng);
    mixup_with(a, b, lambda, cfg.mixup_skip_band)
}

// ------------------------------------------------------- frequency shift

/// Shift along the mel axis by `k` bins (positive = up); vacated bins are 0.
pub fn freq_shift_by(s: &Sample, k: isize) -> Sample {
    let mut out = s.clone();
    let (c_n, t_n, f_n) = s.features.shape();
    for c in 0..c_n {
        for t in 0..t_n {
            for f in 0..f_n {
                let src = f as isize - k;
                let v = if src >= 0 && (src as usize) < f_n {
                    s.features.get(c, t, src as usize)
                } else {
                    0.0
                };
                out.features.set(c, t, f, v);
            }
        }
    }
    out
}

pub fn freq_shift<R: Rng + ?Sized>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let m = cfg.fs_max_bins as i64;
    freq_shift_by(s, rng.random_range(-m..=m) as isize)
}

// ---------------------------------------------------------- channel swap

/// Output channel `i` is input channel `perm[i]`.
pub fn channel_permute(s: &Sample, perm: &[usize]) -> Result<Sample> {
    let c_n = s.features.channels();
    let mut seen = vec![false; c_n];
    if perm.len() != c_n || perm.iter().any(|&p| p >= c_n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation of {c_n} channels")));
    }
    let mut out = s.clone();
    for (i, &p) in perm.iter().enumerate() {
        out.features.channel_mut(i).copy_from_slice(s.features.channel(p));
    }
    Ok(out)
}

/// The 24 permutations of four channels in lexicographic order.
pub fn all_permutations4() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    if (0..4).all(|x| p.contains(&x)) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

pub fn channel_swap<R: Rng + ?Sized>(s: &Sample, rng: &mut R) -> Result<Sample> {
    if s.features.channels() != 4 {
        return Err(Error::InvalidArgument(format!(
            "channel swap needs 4 channels, got {}",
            s.features.channels()
        )));
    }
    let perms = all_permutations4();
    channel_permute(s, &perms[rng.random_range(0..perms.len())])
}

// ---------------------------------------------------------------- cutout

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub t0: usize,
    pub f0: usize,
    pub frames: usize,
    pub bins: usize,
    pub fill: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CutoutOp {
    Single(Patch),
    Multiple(Vec<Patch>),
    /// One time stripe and one frequency stripe, both filled with 0.
    SpecAugment {
        t0: usize,
        t_width: usize,
        f0: usize,
        f_width: usize,
    },
}

fn value_range(x: &FeatureTensor) -> (f32, f32) {
    x.values()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn draw_fill<R: Rng + ?Sized>(lo: f32, hi: f32, rng: &mut R) -> f32 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Rectangle with the spectrogram's aspect ratio covering `area` of it.
pub fn single_cutout_dims(frames: usize, bins: usize, area: f64) -> (usize, usize) {
    let s = area.sqrt();
    let h = ((s * frames as f64).round() as usize).clamp(1, frames);
    let w = ((s * bins as f64).round() as usize).clamp(1, bins);
    (h, w)
}

pub fn draw_cutout<R: Rng + ?Sized>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<CutoutOp> {
    let (_, t_n, f_n) = s.features.shape();
    let p = cfg.multi_cutout_size;
    if t_n < p || f_n < p {
        return Err(Error::InvalidArgument(format!(
            "cutout needs at least {p} frames and {p} bins, got {t_n}x{f_n}"
        )));
    }
    let (lo, hi) = value_range(&s.features);
    Ok(match rng.random_range(0..3) {
        0 => {
            let area = rng.random_range(cfg.cutout_area.0..=cfg.cutout_area.1);
            let (h, w) = single_cutout_dims(t_n, f_n, area);
            CutoutOp::Single(Patch {
                t0: rng.random_range(0..=t_n - h),
                f0: rng.random_range(0..=f_n - w),
                frames: h,
                bins: w,
                fill: draw_fill(lo, hi, rng),
            })
        }
        1 => CutoutOp::Multiple(
            (0..cfg.multi_cutouts)
                .map(|_| Patch {
                    t0: rng.random_range(0..=t_n - p),
                    f0: rng.random_range(0..=f_n - p),
                    frames: p,
                    bins: p,
                    fill: draw_fill(lo, hi, rng),
                })
                .collect(),
        ),
        _ => {
            let t_width = rng.random_range(0..=(cfg.specaug_time_frac * t_n as f64).floor() as usize);
            let f_width = rng.random_range(0..=(cfg.specaug_freq_frac * f_n as f64).floor() as usize);
            CutoutOp::SpecAugment {
                t0: rng.random_range(0..=t_n - t_width),
                t_width,
                f0: rng.random_range(0..=f_n - f_width),
                f_width,
            }
        }
    })
}

fn fill_rect(x: &mut FeatureTensor, t0: usize, t1: usize, f0: usize, f1: usize, v: f32) {
    let (c_n, t_n, f_n) = x.shape();
    for c in 0..c_n {
        for t in t0..t1.min(t_n) {
            for f in f0..f1.min(f_n) {
                x.set(c, t, f, v);
            }
        }
    }
}

pub fn apply_cutout(s: &Sample, op: &CutoutOp) -> Sample {
    let mut out = s.clone();
    let x = &mut out.features;
    let (_, t_n, f_n) = x.shape();
    match op {
        CutoutOp::Single(p) => fill_rect(x, p.t0, p.t0 + p.frames, p.f0, p.f0 + p.bins, p.fill),
        CutoutOp::Multiple(ps) => {
            for p in ps {
                fill_rect(x, p.t0, p.t0 + p.frames, p.f0, p.f0 + p.bins, p.fill);
            }
        }
        CutoutOp::SpecAugment {
            t0,
            t_width,
            f0,
            f_width,
        } => {
            fill_rect(x, *t0, t0 + t_width, 0, f_n, 0.0);
            fill_rect(x, 0, t_n, *f0, f0 + f_width, 0.0);
        }
    }
    out
}

pub fn cutout_composite<R: Rng + ?Sized>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    Ok(apply_cutout(s, &draw_cutout(s, cfg, rng)?))
}

// -------------------------------------------------------------- pipeline

/// Which techniques fire for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Gates {
    pub mu: bool,
    pub co: bool,
    pub fs: bool,
    pub cs: bool,
}

/// Gate draws for sample `index`. Four uniforms are always consumed, in
/// MU, CO, FS, CS order, whether or not a technique is enabled.
pub fn draw_gates(cfg: &AugmentConfig, batch_seed: u64, index: usize) -> Gates {
    let mut rng = seed::rng(batch_seed, &[seed::tag("aug/gate"), index as u64]);
    let u: [f64; 4] = std::array::from_fn(|_| rng.random());
    Gates {
        mu: cfg.mu && u[0] < cfg.p_mixup,
        co: cfg.co && u[1] < cfg.p_other,
        fs: cfg.fs && u[2] < cfg.p_other,
        cs: cfg.cs && u[3] < cfg.p_other,
    }
}

/// Augment sample `index` of `batch` with the given gates. The mixup
/// partner is drawn uniformly from the other samples of the (unaugmented)
/// batch; a batch of one skips mixup.
pub fn augment_sample(
    batch: &[Sample],
    index: usize,
    gates: Gates,
    cfg: &AugmentConfig,
    batch_seed: u64,
) -> Result<Sample> {
    let mut s = batch[index].clone();
    if gates.mu && batch.len() > 1 {
        let mut rng = technique_rng(batch_seed, Technique::Mixup, index);
        let mut j = rng.random_range(0..batch.len() - 1);
        if j >= index {
            j += 1;
        }
        s = mixup(&s, &batch[j], cfg, &mut rng)?;
    }
    if gates.co {
        s = cutout_composite(&s, cfg, &mut technique_rng(batch_seed, Technique::Cutout, index))?;
    }
    if gates.fs {
        s = freq_shift(&s, cfg, &mut technique_rng(batch_seed, Technique::FreqShift, index));
    }
    if gates.cs {
        s = channel_swap(&s, &mut technique_rng(batch_seed, Technique::ChannelSwap, index))?;
    }
    Ok(s)
}

/// MU -> CO -> FS -> CS per sample, each gated independently.
pub fn apply_pipeline(batch: &[Sample], cfg: &AugmentConfig, batch_seed: u64) -> Result<Vec<Sample>> {
    if !cfg.any() {
        return Ok(batch.to_vec());
    }
    cfg.validate()?;
    (0..batch.len())
        .map(|i| augment_sample(batch, i, draw_gates(cfg, batch_seed, i), cfg, batch_seed))
        .collect()
}

/// Shuffle helper shared with the trainer.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
