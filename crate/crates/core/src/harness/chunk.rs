//! Sliding-window chunking of recordings into training samples.
//!
//! All positions are kept in label frames (100 ms); a label frame spans
//! eight feature frames (80 fps). A chunk starting at label frame `s` covers
//! feature frames `8s .. 8(s + len)`.

use crate::audiofeat::FeatureTensor;
use crate::augment::Sample;
use crate::error::{Error, Result};
use crate::objectives::{LabelGrid, LABEL_RATE};

pub const FEATURE_FRAMES_PER_LABEL: usize = 8;

/// Whole number of label frames in `s` seconds.
pub fn seconds_to_label_frames(s: f64) -> Result<usize> {
    let x = s * LABEL_RATE as f64;
    let r = x.round();
    if !(s >= 0.0) || (x - r).abs() > 1e-6 {
        return Err(Error::Config(format!("{s} s is not a whole number of 100 ms label frames")));
    }
    Ok(r as usize)
}

/// `floor((n - len) / hop) + 1` windows; incomplete trailing windows are dropped.
pub fn window_count(n: usize, len: usize, hop: usize) -> Result<usize> {
    if len == 0 || hop == 0 {
        return Err(Error::InvalidArgument("chunk length and hop must be positive".into()));
    }
    if n < len {
        return Err(Error::Data(format!("recording of {n} frames is shorter than a {len}-frame chunk")));
    }
    Ok((n - len) / hop + 1)
}

pub fn window_starts(n: usize, len: usize, hop: usize) -> Result<Vec<usize>> {
    Ok((0..window_count(n, len, hop)?).map(|k| k * hop).collect())
}

/// Chunk count for a recording of `duration_s` seconds.
pub fn chunk_count(duration_s: f64, chunk_s: f64, hop_s: f64) -> Result<usize> {
    window_count(
        seconds_to_label_frames(duration_s)?,
        seconds_to_label_frames(chunk_s)?,
        seconds_to_label_frames(hop_s)?,
    )
}

fn check_alignment(features: &FeatureTensor, labels: &LabelGrid) -> Result<()> {
    if features.frames() < labels.frames() * FEATURE_FRAMES_PER_LABEL {
        return Err(Error::shape(
            format!(">= {} feature frames", labels.frames() * FEATURE_FRAMES_PER_LABEL),
            format!("{}", features.frames()),
        ));
    }
    Ok(())
}

/// Cut one chunk of `len` label frames starting at label frame `start`.
pub fn cut(features: &FeatureTensor, labels: &LabelGrid, start: usize, len: usize) -> Result<Sample> {
    check_alignment(features, labels)?;
    Ok(Sample {
        features: features.slice_frames(start * FEATURE_FRAMES_PER_LABEL, len * FEATURE_FRAMES_PER_LABEL)?,
        labels: labels.slice_frames(start, len)?,
    })
}

/// Every chunk of a recording, in time order.
pub fn chunk(features: &FeatureTensor, labels: &LabelGrid, chunk_s: f64, hop_s: f64) -> Result<Vec<Sample>> {
    check_alignment(features, labels)?;
    let len = seconds_to_label_frames(chunk_s)?;
    let hop = seconds_to_label_frames(hop_s)?;
    window_starts(labels.frames(), len, hop)?
        .into_iter()
        .map(|s| cut(features, labels, s, len))
        .collect()
}
