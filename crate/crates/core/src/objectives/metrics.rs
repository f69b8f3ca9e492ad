//! Segment-based F1 / error rate and the combined SEDE score.
//!
//! A segment is active for a class if any of its label frames is active.
//! Counts are micro-aggregated: per-clip [`SegmentCounts`] simply add.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};

use super::LabelGrid;

/// Prediction threshold; a frame is active when `pred > threshold`.
pub const DEFAULT_THRESHOLD: f32 = 0.3;
/// 1 s evaluation segments on the 100 ms label grid.
pub const FRAMES_PER_SEGMENT: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SegmentCounts {
    pub n: u64,
    pub s: u64,
    pub d: u64,
    pub i: u64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Add for SegmentCounts {
    type Output = SegmentCounts;

    fn add(self, o: SegmentCounts) -> SegmentCounts {
        SegmentCounts {
            n: self.n + o.n,
            s: self.s + o.s,
            d: self.d + o.d,
            i: self.i + o.i,
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for SegmentCounts {
    fn add_assign(&mut self, o: SegmentCounts) {
        *self = *self + o;
    }
}

impl Sum for SegmentCounts {
    fn sum<I: Iterator<Item = SegmentCounts>>(iter: I) -> Self {
        iter.fold(SegmentCounts::default(), Add::add)
    }
}

impl SegmentCounts {
    /// `(S + D + I) / N`; with no reference activity, the insertion count.
    pub fn error_rate(&self) -> f64 {
        if self.n == 0 {
            self.i as f64
        } else {
            (self.s + self.d + self.i) as f64 / self.n as f64
        }
    }

    /// `2 TP / (2 TP + FP + FN)`; 0 when there are no true positives.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
        }
    }
}

pub fn sede(er: f64, f1: f64) -> f64 {
    0.5 * er + 0.5 * (1.0 - f1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub counts: SegmentCounts,
    pub er: f64,
    pub f1: f64,
    pub sede: f64,
    pub segment_length_s: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "er,f1,sede,sumN,sumS,sumD,sumI,sumTP,sumFP,sumFN";

    pub fn from_counts(counts: SegmentCounts) -> Self {
        let er = counts.error_rate();
        let f1 = counts.f1();
        Self {
            counts,
            er,
            f1,
            sede: sede(er, f1),
            segment_length_s: 1.0,
        }
    }

    pub fn to_csv_row(&self) -> String {
        let c = &self.counts;
        format!(
            "{:.6},{:.6},{:.6},{},{},{},{},{},{},{}",
            self.er, self.f1, self.sede, c.n, c.s, c.d, c.i, c.tp, c.fp, c.fn_
        )
    }

    /// Parse a row written by [`MetricsReport::to_csv_row`]. Counts are
    /// authoritative; ER/F1/SEDE are recomputed from them.
    pub fn parse_csv_row(row: &str) -> Result<Self> {
        let fields: Vec<&str> = row.trim().split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Data(format!("metrics row needs 10 fields, got {}", fields.len())));
        }
        let int = |i: usize| -> Result<u64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Data(format!("bad count '{}'", fields[i])))
        };
        Ok(Self::from_counts(SegmentCounts {
            n: int(3)?,
            s: int(4)?,
            d: int(5)?,
            i: int(6)?,
            tp: int(7)?,
            fp: int(8)?,
            fn_: int(9)?,
        }))
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.counts;
        writeln!(f, "segment length : {:.1} s", self.segment_length_s)?;
        writeln!(f, "ER             : {:.6}", self.er)?;
        writeln!(f, "F1             : {:.6}", self.f1)?;
        writeln!(f, "SEDE           : {:.6}", self.sede)?;
        writeln!(f, "N / S / D / I  : {} / {} / {} / {}", c.n, c.s, c.d, c.i)?;
        write!(f, "TP / FP / FN   : {} / {} / {}", c.tp, c.fp, c.fn_)
    }
}

pub fn binarize(pred: &LabelGrid, threshold: f32) -> LabelGrid {
    let values = pred
        .values()
        .iter()
        .map(|&v| if v > threshold { 1.0 } else { 0.0 })
        .collect();
    LabelGrid::from_vec(pred.frames(), pred.classes(), values).expect("binary values are in range")
}

/// Segment counts for one clip. The final partial segment is kept.
pub fn segment_counts(pred: &LabelGrid, reference: &LabelGrid, frames_per_segment: usize) -> Result<SegmentCounts> {
    if pred.frames() != reference.frames() || pred.classes() != reference.classes() {
        return Err(Error::shape(
            format!("{}x{}", reference.frames(), reference.classes()),
            format!("{}x{}", pred.frames(), pred.classes()),
        ));
    }
    if frames_per_segment == 0 {
        return Err(Error::InvalidArgument("segment length must be positive".into()));
    }
    let classes = pred.classes();
    let mut total = SegmentCounts::default();
    let mut p_act = vec![false; classes];
    let mut r_act = vec![false; classes];
    for start in (0..pred.frames()).step_by(frames_per_segment) {
        let end = (start + frames_per_segment).min(pred.frames());
        p_act.iter_mut().for_each(|a| *a = false);
        r_act.iter_mut().for_each(|a| *a = false);
        for t in start..end {
            for l in 0..classes {
                p_act[l] |= pred.get(t, l) > 0.5;
                r_act[l] |= reference.get(t, l) > 0.5;
            }
        }
        let (mut tp, mut fp, mut fn_, mut n) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &r) in p_act.iter().zip(&r_act) {
            tp += (p && r) as u64;
            fp += (p && !r) as u64;
            fn_ += (!p && r) as u64;
            n += r as u64;
        }
        total += SegmentCounts {
            n,
            s: fn_.min(fp),
            d: fn_.saturating_sub(fp),
            i: fp.saturating_sub(fn_),
            tp,
            fp,
            fn_,
        };
    }
    Ok(total)
}

pub fn segment_metrics(pred: &LabelGrid, reference: &LabelGrid, frames_per_segment: usize) -> Result<MetricsReport> {
    Ok(MetricsReport::from_counts(segment_counts(pred, reference, frames_per_segment)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(frames: usize, classes: usize, on: &[(usize, usize)]) -> LabelGrid {
        let mut g = LabelGrid::zeros(frames, classes);
        for &(t, l) in on {
            g.set(t, l, 1.0);
        }
        g
    }

    #[test]
    fn perfect_and_all_miss() {
        let r = grid(25, 3, &[(0, 0), (12, 1), (24, 2)]);
        let m = segment_metrics(&r, &r, FRAMES_PER_SEGMENT).unwrap();
        assert_eq!((m.er, m.f1, m.sede), (0.0, 1.0, 0.0));

        let z = LabelGrid::zeros(25, 3);
        let m = segment_metrics(&z, &r, FRAMES_PER_SEGMENT).unwrap();
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.er, 1.0);
        assert_eq!(m.counts.d, 3);
    }

    #[test]
    fn final_partial_segment_counts() {
        // 25 frames -> segments [0,10), [10,20), [20,25).
        let r = grid(25, 1, &[(22, 0)]);
        assert_eq!(segment_counts(&r, &r, 10).unwrap().n, 1);
    }

    #[test]
    fn substitution_is_min_of_misses_and_false_alarms() {
        let r = grid(10, 3, &[(0, 0), (0, 1)]);
        let p = grid(10, 3, &[(0, 2)]);
        let c = segment_counts(&p, &r, 10).unwrap();
        assert_eq!((c.n, c.s, c.d, c.i), (2, 1, 1, 0));
        assert_eq!(c.error_rate(), 1.0);
    }

    #[test]
    fn empty_reference_conventions() {
        let r = LabelGrid::zeros(20, 2);
        let p = grid(20, 2, &[(3, 1), (15, 0)]);
        let m = segment_metrics(&p, &r, 10).unwrap();
        assert_eq!(m.er, 2.0);
        assert_eq!(m.f1, 0.0);
        let m = segment_metrics(&r, &r, 10).unwrap();
        assert_eq!((m.er, m.f1), (0.0, 0.0));
    }

    #[test]
    fn binarize_is_strict() {
        let g = LabelGrid::from_vec(1, 4, vec![0.3, 0.31, 0.5, 0.0]).unwrap();
        assert_eq!(binarize(&g, DEFAULT_THRESHOLD).values(), &[0.0, 1.0, 1.0, 0.0]);
        let half = LabelGrid::from_vec(2, 2, vec![0.5; 4]).unwrap();
        assert!(binarize(&half, 0.3).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sede_examples() {
        assert_eq!(sede(0.0, 1.0), 0.0);
        assert_eq!(sede(1.0, 0.0), 1.0);
        assert!((sede(0.337, 0.762) - 0.2875).abs() < 1e-12);
    }

    #[test]
    fn csv_row_is_fixed_precision_and_reparses() {
        let m = MetricsReport::from_counts(SegmentCounts {
            n: 10,
            s: 1,
            d: 2,
            i: 3,
            tp: 7,
            fp: 4,
            fn_: 3,
        });
        let row = m.to_csv_row();
        assert_eq!(row, "0.600000,0.666667,0.466667,10,1,2,3,7,4,3");
        assert_eq!(MetricsReport::parse_csv_row(&row).unwrap(), m);
        assert!(m.to_string().contains("SEDE           : 0.466667"));
    }

    #[test]
    fn shape_mismatch_errors() {
        assert!(segment_counts(&LabelGrid::zeros(10, 2), &LabelGrid::zeros(10, 3), 10).is_err());
    }

    #[test]
    fn adding_true_positive_never_lowers_f1() {
        let r = grid(30, 3, &[(0, 0), (5, 1), (14, 2), (25, 0)]);
        let mut p = grid(30, 3, &[(1, 2), (14, 2)]);
        let before = segment_metrics(&p, &r, 10).unwrap().f1;
        p.set(25, 0, 1.0);
        assert!(segment_metrics(&p, &r, 10).unwrap().f1 >= before);
    }
}
