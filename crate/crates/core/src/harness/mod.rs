//! Experiment harness: chunking, training runs with checkpoint selection,
//! chunked evaluation, the ablation grids and the results report.

mod chunk;
mod config;
mod data;
mod grid;
mod report;
mod train;

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

pub use chunk::{
    chunk, chunk_count, cut, seconds_to_label_frames, window_count, window_starts, FEATURE_FRAMES_PER_LABEL,
};
pub use config::{format_default_augment, parse_augment_flags, Channels, ExperimentConfig, Transfer};
pub use data::{fit_norm, load_split, mono_select, norm_path, DataCache, FormatData, OnceMap, Recording, SplitData};
pub use grid::{
    augmentation_combinations, cell_path, grid_cells, run_grid, train_executor, GridKind, GridOptions, GridOutcome,
};
pub use report::{parse_results_csv, report_markdown, results_csv, ResultRow, RESULTS_HEADER};
pub use train::{
    chunk_index, evaluate, fit, predict_recording, pretrain_mono, stack, train_run, train_with_data, EpochRecord,
    FitOptions, RunRecord, TrainOutput,
};

use crate::error::{Error, Result};

/// Write via a unique temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = path.with_extension(format!("tmp.{}.{n}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
