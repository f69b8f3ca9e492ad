//! Loading a generated dataset into normalized, split-tagged feature sets.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::audiofeat::{FeatureExtractor, FeatureTensor, MelConfig, NormStats, StftConfig};
use crate::error::{Error, Result};
use crate::objectives::{LabelGrid, LABEL_RATE};
use crate::scenegen::{
    label_path, read_dataset_config, read_label_csv, read_manifest, read_wav, wav_path, FormatKind,
    MultichannelAudio, Split,
};

/// Single-channel view used by the mono experiments: W for FOA, capsule 0
/// for MIC. Both are channel 0 of the rendered array.
pub fn mono_select(audio: &MultichannelAudio, format: FormatKind) -> Result<MultichannelAudio> {
    if audio.channels() != format.array().channels() {
        return Err(Error::shape(
            format!("{} channels for {format}", format.array().channels()),
            format!("{}", audio.channels()),
        ));
    }
    audio.select(0)
}

#[derive(Clone, Debug)]
pub struct Recording {
    pub scene_id: String,
    pub features: FeatureTensor,
    pub labels: LabelGrid,
}

/// Recordings of one split. The split tag is fixed at load time so that
/// statistics fitting can refuse anything but training data.
#[derive(Clone, Debug)]
pub struct SplitData {
    split: Split,
    pub recordings: Vec<Recording>,
}

impl SplitData {
    pub fn new(split: Split, recordings: Vec<Recording>) -> Self {
        Self { split, recordings }
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recordings.is_empty()
    }

    fn map_features(&self, f: impl Fn(&FeatureTensor) -> Result<FeatureTensor> + Sync) -> Result<Self> {
        let recordings = self
            .recordings
            .par_iter()
            .map(|r| {
                Ok(Recording {
                    scene_id: r.scene_id.clone(),
                    features: f(&r.features)?,
                    labels: r.labels.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            split: self.split,
            recordings,
        })
    }
}

/// Normalization statistics from the training split only.
pub fn fit_norm(train: &SplitData) -> Result<NormStats> {
    if train.split != Split::Train {
        return Err(Error::InvalidArgument(format!(
            "normalization statistics must come from the train split, not {}",
            train.split
        )));
    }
    if train.is_empty() {
        return Err(Error::Data("no training recordings to fit normalization on".into()));
    }
    NormStats::fit(train.recordings.iter().map(|r| &r.features))
}

pub fn norm_path(root: &Path, format: FormatKind) -> PathBuf {
    root.join(format!("norm_{format}.bin"))
}

/// Raw (unnormalized) log-mel features and label grids of one split.
pub fn load_split(root: &Path, format: FormatKind, split: Split) -> Result<SplitData> {
    let ds = read_dataset_config(root)?;
    let extractor = FeatureExtractor::new(StftConfig::default(), MelConfig::default())?;
    let entries: Vec<_> = read_manifest(root)?.into_iter().filter(|e| e.split == split).collect();
    let recordings = entries
        .par_iter()
        .map(|e| {
            let audio = read_wav(&wav_path(root, format, &e.scene_id))?;
            let frames = (e.duration_s * LABEL_RATE as f64).round() as usize;
            Ok(Recording {
                scene_id: e.scene_id.clone(),
                features: extractor.logmel(&audio)?,
                labels: read_label_csv(&label_path(root, &e.scene_id), frames, ds.n_classes)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitData::new(split, recordings))
}

/// One format of a dataset, normalized with training-split statistics.
#[derive(Clone, Debug)]
pub struct FormatData {
    pub format: FormatKind,
    pub norm: NormStats,
    /// Where the statistics came from: a file path or `fitted:train`.
    pub norm_ref: String,
    pub n_classes: usize,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl FormatData {
    /// Uses `<root>/norm_<format>.bin` when present, otherwise fits on the
    /// training split in memory.
    pub fn load(root: &Path, format: FormatKind) -> Result<Self> {
        let n_classes = read_dataset_config(root)?.n_classes;
        let train = load_split(root, format, Split::Train)?;
        let np = norm_path(root, format);
        let (norm, norm_ref) = if np.exists() {
            (NormStats::load(&np)?, np.display().to_string())
        } else {
            (fit_norm(&train)?, "fitted:train".to_string())
        };
        let apply = |d: SplitData| d.map_features(|f| norm.apply(f));
        Ok(Self {
            format,
            train: apply(train)?,
            val: apply(load_split(root, format, Split::Val)?)?,
            test: apply(load_split(root, format, Split::Test)?)?,
            norm,
            norm_ref,
            n_classes,
        })
    }

    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn channels(&self) -> usize {
        self.norm.channels
    }

    /// Channel-0 view of every split. Normalized features are per channel,
    /// so selecting after normalization equals normalizing the mono signal
    /// with the channel-0 statistics.
    pub fn mono(&self) -> Result<Self> {
        let sel = |d: &SplitData| d.map_features(|f| f.select_channel(0));
        Ok(Self {
            format: self.format,
            norm: self.norm.select_channel(0)?,
            norm_ref: format!("{}#ch0", self.norm_ref),
            n_classes: self.n_classes,
            train: sel(&self.train)?,
            val: sel(&self.val)?,
            test: sel(&self.test)?,
        })
    }
}

/// Compute-once map: concurrent callers for the same key wait for a single
/// computation. Failures are not cached.
pub struct OnceMap<K, V> {
    slots: Mutex<HashMap<K, Arc<Mutex<Option<Arc<V>>>>>>,
}

impl<K: Eq + Hash + Clone, V> Default for OnceMap<K, V> {
    fn default() -> Self {
        Self {
            slots: Mutex::new(HashMap::new()),
        }
    }
}

impl<K: Eq + Hash + Clone, V> OnceMap<K, V> {
    pub fn get_or_try_init(&self, key: &K, init: impl FnOnce() -> Result<V>) -> Result<Arc<V>> {
        let slot = self
            .slots
            .lock()
            .expect("slot map poisoned")
            .entry(key.clone())
            .or_default()
            .clone();
        let mut guard = slot.lock().expect("slot poisoned");
        if let Some(v) = guard.as_ref() {
            return Ok(v.clone());
        }
        let v = Arc::new(init()?);
        *guard = Some(v.clone());
        Ok(v)
    }
}

/// Loaded datasets shared between grid cells, keyed by (root, format, mono).
#[derive(Default)]
pub struct DataCache {
    map: OnceMap<(PathBuf, FormatKind, bool), FormatData>,
}

impl DataCache {
    pub fn get(&self, root: &Path, format: FormatKind, mono: bool) -> Result<Arc<FormatData>> {
        self.map.get_or_try_init(&(root.to_path_buf(), format, mono), || {
            if mono {
                self.get(root, format, false)?.mono()
            } else {
                FormatData::load(root, format)
            }
        })
    }
}
