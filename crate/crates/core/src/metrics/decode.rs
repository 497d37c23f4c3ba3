//! Greedy CTC decoding.

use crate::nn::tensor::Tensor;
use crate::window::StitchedPosteriors;

/// A run of frames whose argmax is the same non-blank class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub class_id: usize,
    pub start: usize,
    /// One past the last frame.
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Collapsed class sequence without blanks.
    pub sequence: Vec<usize>,
    /// Argmax per frame before collapsing; blank is `classes`.
    pub frame_labels: Vec<usize>,
    /// One segment per entry of `sequence`.
    pub segments: Vec<Segment>,
    pub blank: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Collapse a per-frame label path: merge runs, drop blanks.
pub fn collapse(frame_labels: &[usize], blank: usize) -> Decoded {
    let mut segments: Vec<Segment> = Vec::new();
    let mut prev = None;
    for (t, &k) in frame_labels.iter().enumerate() {
        if Some(k) == prev {
            if k != blank {
                segments.last_mut().expect("run in progress").end = t + 1;
            }
        } else if k != blank {
            segments.push(Segment { class_id: k, start: t, end: t + 1 });
        }
        prev = Some(k);
    }
    Decoded {
        sequence: segments.iter().map(|s| s.class_id).collect(),
        frame_labels: frame_labels.to_vec(),
        segments,
        blank,
    }
}

/// Greedy decode of `[T, C+1]` frame distributions (blank last).
pub fn greedy_decode_rows(rows: &Tensor) -> Decoded {
    let width = *rows.shape().last().unwrap_or(&1);
    let labels: Vec<usize> = rows.data().chunks(width.max(1)).map(argmax).collect();
    collapse(&labels, width.saturating_sub(1))
}

pub fn greedy_decode(posteriors: &StitchedPosteriors) -> Decoded {
    greedy_decode_rows(&posteriors.frames)
}
