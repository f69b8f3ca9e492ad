//! Training runs: chunked minibatch training with augmentation and the
//! warm-up / plateau / decay schedule, per-epoch validation, best-SEDE
//! checkpoint selection and a single test evaluation.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use crate::augment::{apply_pipeline, shuffled_indices, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::nn::{lr_schedule, transfer_from, Adam, Checkpoint, Crnn, CrnnConfig, Trainable};
use crate::objectives::{
    binarize, segment_counts, LabelGrid, LossConfig, LossKind, MetricsReport, SegmentCounts, FRAMES_PER_SEGMENT,
};
use crate::scenegen::FormatKind;
use crate::seed;

use super::chunk::{cut, seconds_to_label_frames, window_starts, FEATURE_FRAMES_PER_LABEL};
use super::config::{Channels, ExperimentConfig, Transfer};
use super::data::{DataCache, FormatData, OnceMap, Recording, SplitData};
use super::report::{results_csv, ResultRow};
use super::write_atomic;

/// Chunks evaluated per forward pass at inference time.
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    /// Zero-based epoch with the lowest validation SEDE (earliest on ties).
    pub best_epoch: usize,
    pub best_checkpoint: String,
    pub test: MetricsReport,
    pub wall_time_s: f64,
}

impl RunRecord {
    /// Equality of everything except wall time.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        self.config_hash == other.config_hash
            && self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.best_checkpoint == other.best_checkpoint
            && self.test == other.test
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "config_hash={}\nbest_epoch={}\nbest_checkpoint={}\nwall_time_s={:.3}\ntest={}\n\nepoch,train_loss,{}\n",
            self.config_hash,
            self.best_epoch,
            self.best_checkpoint,
            self.wall_time_s,
            self.test.to_csv_row(),
            MetricsReport::CSV_HEADER
        );
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val.to_csv_row()));
        }
        s
    }
}

pub struct TrainOutput {
    pub record: RunRecord,
    pub best: Checkpoint,
}

/// What one call to [`fit`] trains on and how.
#[derive(Clone, Debug)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch: usize,
    pub loss: LossKind,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Chunk length and hop, in label frames.
    pub chunk_len: usize,
    pub hop: usize,
}

/// `(recording, start label frame)` of every training chunk.
pub fn chunk_index(split: &SplitData, chunk_len: usize, hop: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (r, rec) in split.recordings.iter().enumerate() {
        for s in window_starts(rec.labels.frames(), chunk_len, hop)? {
            out.push((r, s));
        }
    }
    Ok(out)
}

/// Stack samples into a `B x C x T x F` buffer and a `B x T_lab x L` target.
pub fn stack(samples: &[Sample]) -> Result<(Vec<f32>, [usize; 4], Vec<f32>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (c, t, f) = first.features.shape();
    let mut x = Vec::with_capacity(samples.len() * c * t * f);
    let mut y = Vec::with_capacity(samples.len() * first.labels.values().len());
    for s in samples {
        if s.features.shape() != (c, t, f) || s.labels.frames() != first.labels.frames() {
            return Err(Error::shape(format!("{c}x{t}x{f}"), format!("{:?}", s.features.shape())));
        }
        x.extend_from_slice(s.features.values());
        y.extend_from_slice(s.labels.values());
    }
    Ok((x, [samples.len(), c, t, f], y))
}

/// Minibatch training. `after_epoch(epoch, mean_loss, model, adam)` runs at
/// the end of every epoch. The learning rate follows the schedule in the
/// fraction of optimizer steps completed.
pub fn fit(
    model: &mut Crnn<f32>,
    adam: &mut Adam,
    train: &SplitData,
    opts: &FitOptions,
    mut after_epoch: impl FnMut(usize, f64, &mut Crnn<f32>, &Adam) -> Result<()>,
) -> Result<()> {
    let chunks = chunk_index(train, opts.chunk_len, opts.hop)?;
    if chunks.is_empty() {
        return Err(Error::Data("no training chunks".into()));
    }
    let per_epoch = chunks.len().div_ceil(opts.batch);
    let total = (per_epoch * opts.epochs) as f64;
    let loss_cfg = LossConfig::default();
    let mut step = 0usize;
    for epoch in 0..opts.epochs {
        let order = shuffled_indices(chunks.len(), &mut seed::rng(opts.seed, &[seed::tag("shuffle"), epoch as u64]));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(opts.batch).enumerate() {
            let ctx = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            };
            let batch: Vec<Sample> = idx
                .iter()
                .map(|&k| {
                    let (r, s) = chunks[k];
                    let rec = &train.recordings[r];
                    cut(&rec.features, &rec.labels, s, opts.chunk_len)
                })
                .collect::<Result<_>>()?;
            let batch_seed = seed::derive(opts.seed, &[seed::tag("batch"), epoch as u64, b as u64]);
            let batch = apply_pipeline(&batch, &opts.augment, batch_seed)?;
            let (x, shape, y) = stack(&batch)?;
            model.zero_grad();
            let (loss, pred) = model.loss_and_grad(&x, shape, &y, opts.loss, &loss_cfg).map_err(ctx)?;
            if pred.iter().any(|p| !(*p >= 0.0 && *p <= 1.0)) {
                return Err(ctx(Error::Numeric("prediction outside [0, 1]".into())));
            }
            adam.step(model, lr_schedule(step as f64 / total)).map_err(ctx)?;
            step += 1;
            loss_sum += loss as f64;
        }
        after_epoch(epoch, loss_sum / per_epoch as f64, model, adam)?;
    }
    Ok(())
}

/// Frame-wise probabilities for a whole recording: non-overlapping chunks
/// of `chunk_len` label frames, the last one zero-padded, concatenated and
/// trimmed back to the recording length.
pub fn predict_recording(model: &mut Crnn<f32>, rec: &Recording, chunk_len: usize) -> Result<LabelGrid> {
    let frames = rec.labels.frames();
    let classes = model.cfg.n_classes;
    let starts: Vec<usize> = (0..frames).step_by(chunk_len).collect();
    let mut out = Vec::with_capacity(starts.len() * chunk_len * classes);
    for group in starts.chunks(EVAL_BATCH) {
        let feats: Vec<_> = group
            .iter()
            .map(|&s| {
                rec.features
                    .slice_frames_padded(s * FEATURE_FRAMES_PER_LABEL, chunk_len * FEATURE_FRAMES_PER_LABEL)
            })
            .collect();
        let (c, t, f) = feats[0].shape();
        let mut x = Vec::with_capacity(group.len() * c * t * f);
        for ft in &feats {
            x.extend_from_slice(ft.values());
        }
        out.extend(model.forward(&x, [group.len(), c, t, f], false)?);
    }
    out.truncate(frames * classes);
    LabelGrid::from_vec(frames, classes, out)
}

/// Segment metrics over a split; counts are pooled across recordings.
pub fn evaluate(model: &mut Crnn<f32>, split: &SplitData, chunk_len: usize, threshold: f32) -> Result<MetricsReport> {
    let mut total = SegmentCounts::default();
    for rec in &split.recordings {
        let p = predict_recording(model, rec, chunk_len)?;
        total += segment_counts(&binarize(&p, threshold), &rec.labels, FRAMES_PER_SEGMENT)?;
    }
    Ok(MetricsReport::from_counts(total))
}

fn pretrain_cache() -> &'static OnceMap<String, Crnn<f32>> {
    static CACHE: OnceLock<OnceMap<String, Crnn<f32>>> = OnceLock::new();
    CACHE.get_or_init(OnceMap::default)
}

/// Single-channel model trained with BCE and no augmentation on the
/// channel-0 (W) features of the FOA pretraining corpus. The last epoch is
/// kept. Results are memoized per process.
pub fn pretrain_mono(cfg: &ExperimentConfig, corpus: &FormatData) -> Result<std::sync::Arc<Crnn<f32>>> {
    if corpus.channels() != 1 {
        return Err(Error::InvalidArgument("pretraining corpus must be single-channel".into()));
    }
    let mono_cfg = CrnnConfig {
        input_channels: 1,
        ..cfg.model.clone()
    };
    let corpus_path = cfg.pretrain_dataset.as_ref().unwrap_or(&cfg.dataset);
    let key = format!(
        "{}|{}|{}|{}|{}|{}|{}",
        corpus_path.display(),
        mono_cfg,
        cfg.chunk_s,
        cfg.pretrain_hop_s,
        cfg.batch,
        cfg.pretrain_epochs,
        cfg.seed
    );
    pretrain_cache().get_or_try_init(&key, || {
        let pseed = seed::derive(cfg.seed, &[seed::tag("pretrain")]);
        let mut model = Crnn::<f32>::new(&mono_cfg, pseed)?;
        let opts = FitOptions {
            epochs: cfg.pretrain_epochs,
            batch: cfg.batch,
            loss: LossKind::Bce,
            augment: AugmentConfig::default(),
            seed: pseed,
            chunk_len: seconds_to_label_frames(cfg.chunk_s)?,
            hop: seconds_to_label_frames(cfg.pretrain_hop_s)?,
        };
        fit(&mut model, &mut Adam::default(), &corpus.train, &opts, |_, _, _, _| Ok(()))?;
        Ok(model)
    })
}

/// Train, select by validation SEDE, evaluate test once. `data` must
/// already match `cfg.channels`; `pretrain` is the mono FOA corpus when
/// `cfg.transfer` asks for it. With `out_dir`, writes `config.lock`,
/// `best.ckpt`, `record.txt` and `results.csv` there.
pub fn train_with_data(
    cfg: &ExperimentConfig,
    data: &FormatData,
    pretrain: Option<&FormatData>,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    let start = Instant::now();
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    if data.channels() != model_cfg.input_channels {
        return Err(Error::Config(format!(
            "data has {} channels, model expects {}",
            data.channels(),
            model_cfg.input_channels
        )));
    }
    if data.n_classes != model_cfg.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            data.n_classes, model_cfg.n_classes
        )));
    }
    if data.val.is_empty() || data.test.is_empty() {
        return Err(Error::Data("validation and test splits must be non-empty".into()));
    }
    let hash = cfg.hash_hex();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("config.lock"), cfg.to_kv().as_bytes())?;
    }

    let result = (|| {
        let init_seed = seed::derive(cfg.seed, &[seed::tag("model")]);
        let mut model = match cfg.transfer {
            Transfer::Scratch => Crnn::<f32>::new(&model_cfg, init_seed)?,
            Transfer::MonoPretrained => {
                let corpus = pretrain.ok_or_else(|| Error::InvalidArgument("transfer run without a pretraining corpus".into()))?;
                transfer_from(pretrain_mono(cfg, corpus)?.as_ref(), &model_cfg, init_seed)?
            }
        };
        let chunk_len = seconds_to_label_frames(cfg.chunk_s)?;
        let opts = FitOptions {
            epochs: cfg.epochs,
            batch: cfg.batch,
            loss: cfg.loss,
            augment: cfg.effective_augment(),
            seed: seed::derive(cfg.seed, &[seed::tag("train")]),
            chunk_len,
            hop: seconds_to_label_frames(cfg.chunk_hop_s)?,
        };
        let mut epochs = Vec::new();
        let mut best: Option<(usize, f64, Checkpoint)> = None;
        fit(&mut model, &mut Adam::default(), &data.train, &opts, |epoch, loss, m, adam| {
            let val = evaluate(m, &data.val, chunk_len, cfg.threshold)?;
            epochs.push(EpochRecord {
                epoch,
                train_loss: loss,
                val,
            });
            if best.as_ref().is_none_or(|(_, s, _)| val.sede < *s) {
                let ck = Checkpoint {
                    model: m.clone(),
                    adam: *adam,
                    config_hash: cfg.hash_u64(),
                    norm_ref: data.norm_ref.clone(),
                };
                if let Some(dir) = out_dir {
                    ck.save(&dir.join("best.ckpt"))?;
                }
                best = Some((epoch, val.sede, ck));
            }
            Ok(())
        })?;
        let (best_epoch, _, mut ck) = best.expect("at least one epoch");
        let test = evaluate(&mut ck.model, &data.test, chunk_len, cfg.threshold)?;
        Ok(TrainOutput {
            record: RunRecord {
                config_hash: hash.clone(),
                epochs,
                best_epoch,
                best_checkpoint: format!("best.ckpt#epoch{best_epoch}"),
                test,
                wall_time_s: start.elapsed().as_secs_f64(),
            },
            best: ck,
        })
    })();

    if let Some(dir) = out_dir {
        match &result {
            Ok(out) => {
                write_atomic(&dir.join("record.txt"), out.record.to_text().as_bytes())?;
                let row = ResultRow::new(cfg, &out.record.test);
                write_atomic(&dir.join("results.csv"), results_csv(&[row]).as_bytes())?;
            }
            Err(e) => write_atomic(&dir.join("failure.txt"), format!("{e}\n").as_bytes())?,
        }
    }
    result
}

/// Load data through `cache` and run [`train_with_data`].
pub fn train_run(cfg: &ExperimentConfig, cache: &DataCache, out_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    let data = cache.get(&cfg.dataset, cfg.format, cfg.channels == Channels::Mono)?;
    let pre = match cfg.transfer {
        Transfer::Scratch => None,
        Transfer::MonoPretrained => Some(cache.get(
            cfg.pretrain_dataset.as_ref().unwrap_or(&cfg.dataset),
            FormatKind::Foa,
            true,
        )?),
    };
    train_with_data(cfg, &data, pre.as_deref(), out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audiofeat::FeatureTensor;
    use crate::scenegen::Split;

    fn split(split: Split, n: usize, seconds: usize, seed_v: u64) -> SplitData {
        use rand::Rng;
        let mut rng = seed::rng(seed_v, &[]);
        let recs = (0..n)
            .map(|i| {
                let lf = seconds * 10;
                let tf = lf * 8 + 1;
                let labels: Vec<f32> = (0..lf * 2).map(|_| (rng.random::<f64>() < 0.3) as u8 as f32).collect();
                let mut feats = vec![0f32; 4 * tf * 16];
                for c in 0..4 {
                    for t in 0..tf {
                        for f in 0..16 {
                            let on = labels[(t / 8).min(lf - 1) * 2 + (f / 8)];
                            feats[(c * tf + t) * 16 + f] = on * 2.0 + rng.random_range(-0.1..0.1);
                        }
                    }
                }
                Recording {
                    scene_id: format!("r{i}"),
                    features: FeatureTensor::new(4, tf, 16, feats, 80.0).unwrap(),
                    labels: LabelGrid::from_vec(lf, 2, labels).unwrap(),
                }
            })
            .collect();
        SplitData::new(split, recs)
    }

    fn tiny_model() -> CrnnConfig {
        CrnnConfig {
            input_channels: 4,
            conv_blocks: crate::nn::parse_conv_blocks("4:2x2,4:2x2").unwrap(),
            freq_bands: 2,
            gru_units: 4,
            n_classes: 2,
            label_pool: 2,
            batch_norm: true,
        }
    }

    #[test]
    fn prediction_covers_recording_exactly() {
        let s = split(Split::Val, 1, 3, 1);
        let mut m = Crnn::<f32>::new(&tiny_model(), 0).unwrap();
        // 30 label frames in chunks of 20: the second chunk is padded.
        let p = predict_recording(&mut m, &s.recordings[0], 20).unwrap();
        assert_eq!((p.frames(), p.classes()), (30, 2));
        assert!(p.values().iter().all(|v| *v > 0.0 && *v < 1.0));
        // Eval mode is stateless: the first chunk predicts the same frames
        // whatever else shares its batch.
        let q = predict_recording(&mut m, &s.recordings[0], 20).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn fit_reduces_loss_and_is_deterministic() {
        let train = split(Split::Train, 2, 4, 3);
        let opts = FitOptions {
            epochs: 4,
            batch: 4,
            loss: LossKind::BceDice,
            augment: AugmentConfig::default(),
            seed: 5,
            chunk_len: 20,
            hop: 5,
        };
        let run = || {
            let mut m = Crnn::<f32>::new(&tiny_model(), 1).unwrap();
            let mut losses = Vec::new();
            fit(&mut m, &mut Adam::default(), &train, &opts, |_, l, _, _| {
                losses.push(l);
                Ok(())
            })
            .unwrap();
            losses
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.len(), 4);
        assert!(a[3] < a[0], "{a:?}");
    }

    #[test]
    fn empty_training_split_errors() {
        let train = SplitData::new(Split::Train, vec![]);
        let opts = FitOptions {
            epochs: 1,
            batch: 2,
            loss: LossKind::Bce,
            augment: AugmentConfig::default(),
            seed: 0,
            chunk_len: 20,
            hop: 5,
        };
        let mut m = Crnn::<f32>::new(&tiny_model(), 1).unwrap();
        let r = fit(&mut m, &mut Adam::default(), &train, &opts, |_, _, _, _| Ok(()));
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
