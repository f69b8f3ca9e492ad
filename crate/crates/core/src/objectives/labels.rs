use crate::error::{Error, Result};

/// Label frame hop in seconds.
pub const LABEL_HOP_S: f64 = 0.1;
/// Label frames per second.
pub const LABEL_RATE: usize = 10;

/// One labelled interval, in milliseconds so that CSV round trips are exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct LabelEvent {
    pub onset_ms: u64,
    pub offset_ms: u64,
    pub class_id: usize,
}

impl LabelEvent {
    pub fn onset_s(&self) -> f64 {
        self.onset_ms as f64 / 1000.0
    }

    pub fn offset_s(&self) -> f64 {
        self.offset_ms as f64 / 1000.0
    }
}

/// Frame-by-class activity matrix on the 100 ms label grid.
///
/// Targets are binary; predictions and mixup targets are continuous in
/// `[0, 1]`. Storage is row-major `frames x classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    frames: usize,
    classes: usize,
    values: Vec<f32>,
}

impl LabelGrid {
    pub fn zeros(frames: usize, classes: usize) -> Self {
        Self {
            frames,
            classes,
            values: vec![0.0; frames * classes],
        }
    }

    pub fn from_vec(frames: usize, classes: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * classes {
            return Err(Error::shape(
                format!("{frames}x{classes} = {} values", frames * classes),
                format!("{} values", values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("label value {v} outside [0, 1]")));
        }
        Ok(Self { frames, classes, values })
    }

    /// Rasterise events: frame `k` is active for an event when the event
    /// overlaps `[k * 100 ms, (k + 1) * 100 ms)`.
    pub fn from_events(events: &[LabelEvent], frames: usize, classes: usize) -> Result<Self> {
        let mut grid = Self::zeros(frames, classes);
        let hop_ms = (LABEL_HOP_S * 1000.0).round() as u64;
        for ev in events {
            if ev.class_id >= classes {
                return Err(Error::Data(format!(
                    "class id {} out of range for {classes} classes",
                    ev.class_id
                )));
            }
            if ev.offset_ms <= ev.onset_ms {
                continue;
            }
            let first = (ev.onset_ms / hop_ms) as usize;
            let last = ev.offset_ms.div_ceil(hop_ms) as usize;
            for t in first..last.min(frames) {
                grid.set(t, ev.class_id, 1.0);
            }
        }
        Ok(grid)
    }

    /// Contiguous active runs per class, ordered by onset then class.
    pub fn to_events(&self) -> Vec<LabelEvent> {
        let hop_ms = (LABEL_HOP_S * 1000.0).round() as u64;
        let mut events = Vec::new();
        for l in 0..self.classes {
            let mut start = None;
            for t in 0..=self.frames {
                let active = t < self.frames && self.get(t, l) > 0.5;
                match (active, start) {
                    (true, None) => start = Some(t),
                    (false, Some(s)) => {
                        events.push(LabelEvent {
                            onset_ms: s as u64 * hop_ms,
                            offset_ms: t as u64 * hop_ms,
                            class_id: l,
                        });
                        start = None;
                    }
                    _ => {}
                }
            }
        }
        events.sort();
        events
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, frame: usize, class: usize) -> f32 {
        self.values[frame * self.classes + class]
    }

    #[inline]
    pub fn set(&mut self, frame: usize, class: usize, v: f32) {
        self.values[frame * self.classes + class] = v;
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.values[frame * self.classes..(frame + 1) * self.classes]
    }

    /// Frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(Error::InvalidArgument(format!(
                "frame range {start}..{} exceeds {} label frames",
                start + len,
                self.frames
            )));
        }
        Ok(Self {
            frames: len,
            classes: self.classes,
            values: self.values[start * self.classes..(start + len) * self.classes].to_vec(),
        })
    }

    /// Stack grids along time.
    pub fn concat(grids: &[LabelGrid]) -> Result<Self> {
        let classes = grids.first().map_or(0, |g| g.classes);
        let mut values = Vec::new();
        let mut frames = 0;
        for g in grids {
            if g.classes != classes {
                return Err(Error::shape(format!("{classes} classes"), format!("{} classes", g.classes)));
            }
            values.extend_from_slice(&g.values);
            frames += g.frames;
        }
        Ok(Self { frames, classes, values })
    }

    /// Fraction of active cells.
    pub fn positive_rate(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().filter(|&&v| v > 0.5).count() as f64 / self.values.len() as f64
    }

    /// Largest number of simultaneously active classes in any frame.
    pub fn max_polyphony(&self) -> usize {
        (0..self.frames)
            .map(|t| self.row(t).iter().filter(|&&v| v > 0.5).count())
            .max()
            .unwrap_or(0)
    }
}
