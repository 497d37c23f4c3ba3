//! Corpus metrics over aligned utterances: error rate, ground-truth
//! probability, F1 and the confusion matrix.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::align::{AlignOp, AlignmentResult};
use crate::metrics::decode::Segment;
use crate::nn::tensor::Tensor;

/// Per-class sums of ground-truth probability scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GpTally {
    pub sum: Vec<f64>,
    pub count: Vec<usize>,
}

impl GpTally {
    pub fn new(classes: usize) -> Self {
        Self {
            sum: vec![0.0; classes],
            count: vec![0; classes],
        }
    }

    pub fn add(&mut self, class_id: usize, score: f64) {
        self.sum[class_id] += score;
        self.count[class_id] += 1;
    }

    pub fn merge(&mut self, other: &GpTally) {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
    }

    /// Unweighted mean over classes of their mean score.
    pub fn macro_mean(&self) -> Option<f64> {
        let means: Vec<f64> = self
            .sum
            .iter()
            .zip(&self.count)
            .filter(|(_, &n)| n > 0)
            .map(|(s, &n)| s / n as f64)
            .collect();
        (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    }

    /// Mean over all aligned truth occurrences.
    pub fn weighted_mean(&self) -> Option<f64> {
        let n: usize = self.count.iter().sum();
        (n > 0).then(|| self.sum.iter().sum::<f64>() / n as f64)
    }
}

/// Score each matched or substituted truth phoneme by the mean probability of
/// its true class over the frames of the predicted segment aligned to it.
pub fn gp_scores(posteriors: &Tensor, ar: &AlignmentResult, segments: &[Segment]) -> Result<GpTally> {
    let [frames, width] = posteriors.shape()[..] else {
        return Err(Error::shape("gp", format!("posteriors must be [T, C+1], got {:?}", posteriors.shape())));
    };
    if segments.len() != ar.pred.len() {
        return Err(Error::shape(
            "gp",
            format!("{} segments for {} predicted phonemes", segments.len(), ar.pred.len()),
        ));
    }
    let mut tally = GpTally::new(width - 1);
    for op in &ar.ops {
        let (AlignOp::Match(t, p) | AlignOp::Substitute(t, p)) = *op else { continue };
        let seg = segments[p];
        let class = ar.truth[t];
        if seg.is_empty() || seg.end > frames || class >= width - 1 {
            return Err(Error::InvalidArgument(format!("segment {seg:?} or class {class} out of range")));
        }
        let score = (seg.start..seg.end).map(|f| posteriors.data()[f * width + class]).sum::<f64>() / seg.len() as f64;
        tally.add(class, score);
    }
    Ok(tally)
}

/// `(GPm, GPw)` for one utterance; absent when nothing was aligned.
pub fn gp(posteriors: &Tensor, ar: &AlignmentResult, segments: &[Segment]) -> Result<(Option<f64>, Option<f64>)> {
    let t = gp_scores(posteriors, ar, segments)?;
    Ok((t.macro_mean(), t.weighted_mean()))
}

/// `(C+1) x (C+1)` counts; the last row and column are "unaligned".
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes + 1]; classes + 1],
        }
    }

    pub fn unaligned(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, ar: &AlignmentResult) {
        let un = self.classes;
        for op in &ar.ops {
            let (t, p) = match *op {
                AlignOp::Match(t, p) | AlignOp::Substitute(t, p) => (ar.truth[t], ar.pred[p]),
                AlignOp::Delete(t) => (ar.truth[t], un),
                AlignOp::Insert(p) => (un, ar.pred[p]),
            };
            self.counts[t][p] += 1;
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Tab-separated matrix with a header row and row labels. `labels` names
    /// the `C` classes; the extra row and column are labelled `Un`.
    pub fn to_tsv(&self, labels: &[String]) -> Result<String> {
        if labels.len() < self.classes {
            return Err(Error::InvalidArgument(format!("{} labels for {} classes", labels.len(), self.classes)));
        }
        let names: Vec<&str> = labels[..self.classes].iter().map(String::as_str).chain(["Un"]).collect();
        let mut out = format!("truth\\pred\t{}\n", names.join("\t"));
        for (row, name) in self.counts.iter().zip(&names) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            out.push_str(&format!("{name}\t{}\n", cells.join("\t")));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ClassStats {
    pub support: u64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class stats from confusion counts: matches are true positives,
/// substitutions and insertions predicting `c` are false positives,
/// substitutions and deletions of a true `c` are false negatives.
pub fn class_stats(conf: &Confusion) -> Vec<ClassStats> {
    let c = conf.classes;
    (0..c)
        .map(|k| {
            let tp = conf.counts[k][k];
            let fp: u64 = (0..=c).filter(|&t| t != k).map(|t| conf.counts[t][k]).sum();
            let fn_: u64 = (0..=c).filter(|&p| p != k).map(|p| conf.counts[k][p]).sum();
            let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            ClassStats {
                support: tp + fn_,
                true_positives: tp,
                false_positives: fp,
                false_negatives: fn_,
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
                f1: ratio(2 * tp, 2 * tp + fp + fn_),
            }
        })
        .collect()
}

/// Macro F1 over classes present in the truth.
pub fn f1_macro(ars: &[AlignmentResult], classes: usize) -> f64 {
    let mut conf = Confusion::new(classes);
    for ar in ars {
        conf.add(ar);
    }
    macro_f1(&class_stats(&conf))
}

fn macro_f1(stats: &[ClassStats]) -> f64 {
    let present: Vec<f64> = stats.iter().filter(|s| s.support > 0).map(|s| s.f1).collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

pub fn confusion(ars: &[AlignmentResult], classes: usize) -> Confusion {
    let mut conf = Confusion::new(classes);
    for ar in ars {
        conf.add(ar);
    }
    conf
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub utterances: usize,
    pub truth_phonemes: usize,
    pub matches: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    /// Corpus error rate: total edits over total truth length (floor 1).
    pub per: f64,
    pub gp_macro: Option<f64>,
    pub gp_weighted: Option<f64>,
    pub f1_macro: f64,
    pub per_class: Vec<ClassStats>,
    pub confusion: Confusion,
}

/// Streaming aggregation of utterance results; `merge` is associative.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsAccumulator {
    classes: usize,
    utterances: usize,
    truth: usize,
    m: usize,
    s: usize,
    i: usize,
    d: usize,
    gp: GpTally,
    confusion: Confusion,
}

impl MetricsAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            utterances: 0,
            truth: 0,
            m: 0,
            s: 0,
            i: 0,
            d: 0,
            gp: GpTally::new(classes),
            confusion: Confusion::new(classes),
        }
    }

    pub fn add(&mut self, ar: &AlignmentResult, posteriors: &Tensor, segments: &[Segment]) -> Result<()> {
        if ar.truth.iter().chain(&ar.pred).any(|&k| k >= self.classes) {
            return Err(Error::InvalidArgument(format!("class id outside 0..{}", self.classes)));
        }
        self.gp.merge(&gp_scores(posteriors, ar, segments)?);
        self.confusion.add(ar);
        self.utterances += 1;
        self.truth += ar.truth.len();
        self.m += ar.matches;
        self.s += ar.substitutions;
        self.i += ar.insertions;
        self.d += ar.deletions;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.utterances += other.utterances;
        self.truth += other.truth;
        self.m += other.m;
        self.s += other.s;
        self.i += other.i;
        self.d += other.d;
        self.gp.merge(&other.gp);
        self.confusion.merge(&other.confusion);
    }

    pub fn report(&self) -> MetricsReport {
        let per_class = class_stats(&self.confusion);
        MetricsReport {
            utterances: self.utterances,
            truth_phonemes: self.truth,
            matches: self.m,
            substitutions: self.s,
            insertions: self.i,
            deletions: self.d,
            per: (self.s + self.i + self.d) as f64 / self.truth.max(1) as f64,
            gp_macro: self.gp.macro_mean(),
            gp_weighted: self.gp.weighted_mean(),
            f1_macro: macro_f1(&per_class),
            per_class,
            confusion: self.confusion.clone(),
        }
    }
}
