//! Dataset synthesis and the on-disk layout.
//!
//! ```text
//! <root>/manifest.csv        split,scene_id,duration_s
//! <root>/dataset.cfg         resolved generator settings (key=value)
//! <root>/foa/<scene>.wav     4-channel float32, 24 kHz
//! <root>/mic/<scene>.wav
//! <root>/labels/<scene>.csv  onset_s,offset_s,class_id
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::objectives::{LabelEvent, LabelGrid};
use crate::seed;

use super::render::render_scene;
use super::{wrap_azimuth, EventSpec, FormatKind, MultichannelAudio, SceneSpec, DEFAULT_SAMPLE_RATE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub scene_duration_s: f64,
    pub n_classes: usize,
    pub max_polyphony: usize,
    pub event_len_median_s: f64,
    pub event_len_mean_s: f64,
    pub min_event_s: f64,
    /// Mean silent gap between consecutive events on one polyphony track.
    pub mean_gap_s: f64,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    /// Probability that an event is static; moving events sweep in azimuth.
    pub static_prob: f64,
    pub max_angular_speed_deg_s: f64,
    pub master_seed: u64,
    pub sample_rate: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 60,
            n_val: 15,
            n_test: 15,
            scene_duration_s: 20.0,
            n_classes: 12,
            max_polyphony: 3,
            event_len_median_s: 3.2,
            event_len_mean_s: 8.3,
            min_event_s: 0.5,
            mean_gap_s: 10.0,
            snr_db_min: 10.0,
            snr_db_max: 30.0,
            static_prob: 0.5,
            max_angular_speed_deg_s: 30.0,
            master_seed: 2021,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl DatasetConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.scene_duration_s > 0.0) {
            return bad("scene duration must be positive");
        }
        if self.n_classes == 0 || self.n_classes > super::ATOM_COUNT {
            return bad("class count must be in 1..=12");
        }
        if self.max_polyphony == 0 || self.max_polyphony > self.n_classes {
            return bad("polyphony must be in 1..=classes");
        }
        if !(self.event_len_mean_s > self.event_len_median_s && self.event_len_median_s > 0.0) {
            return bad("log-normal event lengths need mean > median > 0");
        }
        if !(self.min_event_s > 0.0) || !(self.mean_gap_s > 0.0) {
            return bad("minimum event length and mean gap must be positive");
        }
        if self.snr_db_min > self.snr_db_max || !(0.0..=1.0).contains(&self.static_prob) {
            return bad("bad SNR range or static probability");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "n_train={}\nn_val={}\nn_test={}\nscene_duration_s={}\nn_classes={}\nmax_polyphony={}\n\
             event_len_median_s={}\nevent_len_mean_s={}\nmin_event_s={}\nmean_gap_s={}\nsnr_db_min={}\n\
             snr_db_max={}\nstatic_prob={}\nmax_angular_speed_deg_s={}\nmaster_seed={}\nsample_rate={}\n",
            self.n_train,
            self.n_val,
            self.n_test,
            self.scene_duration_s,
            self.n_classes,
            self.max_polyphony,
            self.event_len_median_s,
            self.event_len_mean_s,
            self.min_event_s,
            self.mean_gap_s,
            self.snr_db_min,
            self.snr_db_max,
            self.static_prob,
            self.max_angular_speed_deg_s,
            self.master_seed,
            self.sample_rate
        )
    }
}

impl FromStr for DatasetConfig {
    type Err = Error;

    /// Parse the `key=value` form written by [`DatasetConfig::to_kv`].
    /// Missing keys keep their defaults.
    fn from_str(text: &str) -> Result<Self> {
        let mut c = DatasetConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{line}'")))?;
            let v = v.trim();
            let bad = || Error::Config(format!("bad value '{v}' for {k}"));
            let us = || v.parse::<usize>().map_err(|_| bad());
            let fl = || v.parse::<f64>().map_err(|_| bad());
            match k.trim() {
                "n_train" => c.n_train = us()?,
                "n_val" => c.n_val = us()?,
                "n_test" => c.n_test = us()?,
                "scene_duration_s" => c.scene_duration_s = fl()?,
                "n_classes" => c.n_classes = us()?,
                "max_polyphony" => c.max_polyphony = us()?,
                "event_len_median_s" => c.event_len_median_s = fl()?,
                "event_len_mean_s" => c.event_len_mean_s = fl()?,
                "min_event_s" => c.min_event_s = fl()?,
                "mean_gap_s" => c.mean_gap_s = fl()?,
                "snr_db_min" => c.snr_db_min = fl()?,
                "snr_db_max" => c.snr_db_max = fl()?,
                "static_prob" => c.static_prob = fl()?,
                "max_angular_speed_deg_s" => c.max_angular_speed_deg_s = fl()?,
                "master_seed" => c.master_seed = v.parse().map_err(|_| bad())?,
                "sample_rate" => c.sample_rate = v.parse().map_err(|_| bad())?,
                other => return Err(Error::Config(format!("unknown dataset key '{other}'"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Read `<root>/dataset.cfg`.
pub fn read_dataset_config(root: &Path) -> Result<DatasetConfig> {
    let path = root.join("dataset.cfg");
    fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?.parse()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub scene_id: String,
    pub duration_s: f64,
}

fn quantise_ms(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Draw the scene descriptions for every split. Pure function of the config.
pub fn generate_scene_specs(cfg: &DatasetConfig) -> Result<Vec<(ManifestEntry, SceneSpec)>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for split in Split::ALL {
        for index in 0..cfg.count(split) {
            let scene_seed = seed::derive(cfg.master_seed, &[seed::tag(split.name()), index as u64]);
            let spec = draw_scene(cfg, scene_seed)?;
            out.push((
                ManifestEntry {
                    split,
                    scene_id: format!("{}_{index:04}", split.name()),
                    duration_s: cfg.scene_duration_s,
                },
                spec,
            ));
        }
    }
    Ok(out)
}

fn draw_scene(cfg: &DatasetConfig, scene_seed: u64) -> Result<SceneSpec> {
    let mut rng = seed::rng(scene_seed, &[seed::tag("layout")]);
    let mu = cfg.event_len_median_s.ln();
    let sigma = (2.0 * (cfg.event_len_mean_s / cfg.event_len_median_s).ln()).sqrt();
    let lengths = LogNormal::new(mu, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let gaps = Exp::new(1.0 / cfg.mean_gap_s).map_err(|e| Error::Config(e.to_string()))?;
    let total = cfg.scene_duration_s;

    let mut events: Vec<EventSpec> = Vec::new();
    for _track in 0..cfg.max_polyphony {
        let mut t = quantise_ms(rng.random::<f64>() * cfg.mean_gap_s);
        loop {
            let room = quantise_ms(total - t);
            if room < cfg.min_event_s {
                break;
            }
            let dur = quantise_ms(lengths.sample(&mut rng).clamp(cfg.min_event_s, room));
            let onset = t;
            let offset = onset + dur;
            let busy: Vec<usize> = events
                .iter()
                .filter(|e| e.onset_s < offset && e.offset_s() > onset)
                .map(|e| e.class_id)
                .collect();
            let free: Vec<usize> = (0..cfg.n_classes).filter(|c| !busy.contains(c)).collect();
            if !free.is_empty() {
                let class_id = free[rng.random_range(0..free.len())];
                events.push(EventSpec {
                    class_id,
                    onset_s: onset,
                    duration_s: dur,
                    atom: class_id,
                    gain: 0.1 * 10f64.powf(rng.random_range(-6.0..0.0) / 20.0),
                    trajectory: draw_trajectory(cfg, dur, &mut rng),
                });
            }
            // Next onset starts on a fresh label frame so a track never
            // contributes two events to one 100 ms frame.
            t = quantise_ms((offset * 10.0).ceil() / 10.0 + gaps.sample(&mut rng));
        }
    }
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s).then(a.class_id.cmp(&b.class_id)));

    let snr = rng.random_range(cfg.snr_db_min..=cfg.snr_db_max);
    let mut spec = SceneSpec::new(total, events, snr, rng.random());
    spec.sample_rate = cfg.sample_rate;
    spec.n_classes = cfg.n_classes;
    spec.validate()?;
    Ok(spec)
}

fn draw_trajectory<R: Rng + ?Sized>(cfg: &DatasetConfig, dur: f64, rng: &mut R) -> Vec<(f64, f64)> {
    let n = EventSpec::trajectory_len(dur);
    let az0 = wrap_azimuth(rng.random_range(-PI..PI));
    let el = rng.random_range(-PI / 4.0..PI / 4.0);
    let speed = if rng.random::<f64>() < cfg.static_prob {
        0.0
    } else {
        rng.random_range(-1.0..1.0) * cfg.max_angular_speed_deg_s.to_radians()
    };
    (0..n)
        .map(|k| (wrap_azimuth(az0 + speed * k as f64 * super::TRAJECTORY_STEP_S), el))
        .collect()
}

/// Write the full dataset (both formats) under `root`. Scenes render in
/// parallel; each scene's output depends only on its own seed.
pub fn generate_dataset(cfg: &DatasetConfig, root: &Path) -> Result<Vec<ManifestEntry>> {
    let scenes = generate_scene_specs(cfg)?;
    for dir in ["foa", "mic", "labels"] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    scenes.par_iter().try_for_each(|(entry, spec)| -> Result<()> {
        for kind in [FormatKind::Foa, FormatKind::Mic] {
            let r = render_scene(spec, &kind.array())?;
            write_wav(&wav_path(root, kind, &entry.scene_id), &r.audio)?;
        }
        let events: Vec<LabelEvent> = spec
            .events
            .iter()
            .map(|e| LabelEvent {
                onset_ms: (e.onset_s * 1000.0).round() as u64,
                offset_ms: (e.offset_s() * 1000.0).round() as u64,
                class_id: e.class_id,
            })
            .collect();
        write_label_csv(&label_path(root, &entry.scene_id), &events)
    })?;

    let entries: Vec<ManifestEntry> = scenes.into_iter().map(|(e, _)| e).collect();
    let mut manifest = String::from("split,scene_id,duration_s\n");
    for e in &entries {
        manifest.push_str(&format!("{},{},{:.3}\n", e.split, e.scene_id, e.duration_s));
    }
    write_text(&root.join("manifest.csv"), &manifest)?;
    write_text(&root.join("dataset.cfg"), &cfg.to_kv())?;
    Ok(entries)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join("manifest.csv");
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Data(format!("{}:{}: expected 3 fields", path.display(), i + 1)));
        }
        out.push(ManifestEntry {
            split: parts[0].parse()?,
            scene_id: parts[1].to_string(),
            duration_s: parts[2]
                .parse()
                .map_err(|_| Error::Data(format!("bad duration '{}'", parts[2])))?,
        });
    }
    Ok(out)
}

/// Float32 little-endian PCM.
pub fn write_wav(path: &Path, audio: &MultichannelAudio) -> Result<()> {
    let spec = hound::WavSpec {
        channels: audio.channels() as u16,
        sample_rate: audio.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = hound::WavWriter::new(BufWriter::new(file), spec).map_err(wav_err)?;
    for i in 0..audio.n_samples() {
        for c in 0..audio.channels() {
            w.write_sample(audio.channel(c)[i]).map_err(wav_err)?;
        }
    }
    w.finalize().map_err(wav_err)
}

pub fn read_wav(path: &Path) -> Result<MultichannelAudio> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut r = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = r.spec();
    if spec.sample_format != hound::SampleFormat::Float || spec.bits_per_sample != 32 {
        return Err(Error::Data(format!("{}: expected float32 PCM", path.display())));
    }
    let channels = spec.channels as usize;
    let samples: Vec<f32> = r.samples::<f32>().collect::<std::result::Result<_, _>>().map_err(wav_err)?;
    let n = samples.len() / channels.max(1);
    let mut per: Vec<Vec<f32>> = vec![Vec::with_capacity(n); channels];
    for frame in samples.chunks_exact(channels) {
        for (c, &v) in frame.iter().enumerate() {
            per[c].push(v);
        }
    }
    MultichannelAudio::from_channels(per, spec.sample_rate)
}

pub fn write_label_csv(path: &Path, events: &[LabelEvent]) -> Result<()> {
    let mut sorted = events.to_vec();
    sorted.sort();
    let mut text = String::from("onset_s,offset_s,class_id\n");
    for e in &sorted {
        text.push_str(&format!("{:.3},{:.3},{}\n", e.onset_s(), e.offset_s(), e.class_id));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn parse_ms(s: &str) -> Result<u64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("bad time '{s}'")))?;
    if !(v >= 0.0) {
        return Err(Error::Data(format!("negative time '{s}'")));
    }
    Ok((v * 1000.0).round() as u64)
}

pub fn read_label_csv(path: &Path, frames: usize, classes: usize) -> Result<LabelGrid> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("onset_s,offset_s,class_id") => {}
        _ => return Err(Error::Data(format!("{}: missing label header", path.display()))),
    }
    let mut events = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Data(format!("{}: bad row '{line}'", path.display())));
        }
        events.push(LabelEvent {
            onset_ms: parse_ms(f[0])?,
            offset_ms: parse_ms(f[1])?,
            class_id: f[2]
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad class '{}'", f[2])))?,
        });
    }
    LabelGrid::from_events(&events, frames, classes)
}

/// Path of a scene's WAV for a format.
pub fn wav_path(root: &Path, kind: FormatKind, scene_id: &str) -> PathBuf {
    root.join(kind.name()).join(format!("{scene_id}.wav"))
}

pub fn label_path(root: &Path, scene_id: &str) -> PathBuf {
    root.join("labels").join(format!("{scene_id}.csv"))
}
