//! Training objectives and segment-based evaluation.

mod labels;
mod loss;
mod metrics;

pub use labels::{LabelEvent, LabelGrid, LABEL_HOP_S, LABEL_RATE};
pub use loss::{bce, bce_dice, dice_loss, sdc, LossConfig, LossKind, LossValue};
pub use metrics::{
    binarize, sede, segment_counts, segment_metrics, MetricsReport, SegmentCounts, DEFAULT_THRESHOLD,
    FRAMES_PER_SEGMENT,
};
