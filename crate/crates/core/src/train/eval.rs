//! Evaluation and inference with a trained classifier.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{align, greedy_decode, per, timeline_export, MetricsAccumulator, MetricsReport};
use crate::model::EncoderState;
use crate::phonemap::PhonemeInventory;
use crate::train::corpus::{Corpus, Utterance};
use crate::window::StitchedPosteriors;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtteranceResult {
    pub id: String,
    pub truth: Vec<String>,
    pub predicted: Vec<String>,
    pub per: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub utterances: Vec<UtteranceResult>,
}

/// Fail unless the model's classifier matches the inventory.
pub fn check_classes(model: &EncoderState, inv: &PhonemeInventory) -> Result<()> {
    if !model.has_classifier() {
        return Err(Error::Missing("classifier head"));
    }
    if model.config.num_classes != inv.num_classes() {
        return Err(Error::Config(format!(
            "model predicts {} classes but the inventory has {}",
            model.config.num_classes,
            inv.num_classes()
        )));
    }
    Ok(())
}

fn symbols(inv: &PhonemeInventory, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&k| inv.symbol(k).to_string()).collect()
}

struct Scored {
    result: UtteranceResult,
    metrics: MetricsAccumulator,
}

fn score(model: &EncoderState, u: &Utterance, inv: &PhonemeInventory, timelines: Option<&Path>) -> Result<Scored> {
    let target = u.target.as_ref().ok_or(Error::Missing("utterance labels"))?;
    let post = model.forward_clip(&u.audio)?;
    let decoded = greedy_decode(&post);
    let ar = align(&target.class_ids, &decoded.sequence);
    let mut metrics = MetricsAccumulator::new(inv.num_classes());
    metrics.add(&ar, &post.frames, &decoded.segments)?;
    if let Some(dir) = timelines {
        let name = u.id.replace(['/', '\\'], "_");
        timeline_export(&dir.join(format!("{name}.csv")), &post.frames, post.frame_hop, &inv.labels(), None)?;
    }
    Ok(Scored {
        result: UtteranceResult {
            id: u.id.clone(),
            truth: symbols(inv, &target.class_ids),
            predicted: symbols(inv, &decoded.sequence),
            per: per(&ar),
        },
        metrics,
    })
}

/// Decode and score every utterance. Utterances are spread over threads and
/// the per-thread metrics merged in corpus order.
pub fn evaluate_corpus(model: &EncoderState, corpus: &Corpus, inv: &PhonemeInventory, timelines: Option<&Path>) -> Result<EvalOutput> {
    check_classes(model, inv)?;
    if let Some(dir) = timelines {
        fs::create_dir_all(dir)?;
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(corpus.len()).max(1);
    let chunk = corpus.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Scored>>> = std::thread::scope(|s| {
        let handles: Vec<_> = corpus
            .utterances
            .chunks(chunk.max(1))
            .map(|utts| s.spawn(move || utts.iter().map(|u| score(model, u, inv, timelines)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut metrics = MetricsAccumulator::new(inv.num_classes());
    let mut utterances = Vec::with_capacity(corpus.len());
    for part in parts {
        for scored in part? {
            metrics.merge(&scored.metrics);
            utterances.push(scored.result);
        }
    }
    Ok(EvalOutput {
        report: metrics.report(),
        utterances,
    })
}

/// Write `report.json`, `confusion.tsv` and `utterances.jsonl` under `dir`.
pub fn write_eval(dir: &Path, out: &EvalOutput, inv: &PhonemeInventory) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&out.report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(dir.join("report.json"), json + "\n")?;
    fs::write(dir.join("confusion.tsv"), out.report.confusion.to_tsv(&inv.classes)?)?;
    let mut lines = String::new();
    for u in &out.utterances {
        lines.push_str(&serde_json::to_string(u).map_err(|e| Error::InvalidArgument(e.to_string()))?);
        lines.push('\n');
    }
    fs::write(dir.join("utterances.jsonl"), lines)?;
    Ok(())
}

/// One decoded phoneme with its frame span.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodedPhone {
    pub symbol: String,
    pub class_id: usize,
    pub start_frame: usize,
    /// One past the last frame.
    pub end_frame: usize,
    pub start_s: f64,
    pub end_s: f64,
    /// Mean posterior of the class over its span.
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub posteriors: StitchedPosteriors,
    pub phones: Vec<DecodedPhone>,
}

impl Inference {
    pub fn symbols(&self) -> Vec<&str> {
        self.phones.iter().map(|p| p.symbol.as_str()).collect()
    }
}

/// Decode one clip of 16 kHz samples.
pub fn infer(model: &EncoderState, audio: &[f64], inv: &PhonemeInventory) -> Result<Inference> {
    check_classes(model, inv)?;
    let posteriors = model.forward_clip(audio)?;
    let decoded = greedy_decode(&posteriors);
    let hop = posteriors.frame_hop;
    let phones = decoded
        .segments
        .iter()
        .map(|s| DecodedPhone {
            symbol: inv.symbol(s.class_id).to_string(),
            class_id: s.class_id,
            start_frame: s.start,
            end_frame: s.end,
            start_s: s.start as f64 * hop,
            end_s: s.end as f64 * hop,
            confidence: (s.start..s.end).map(|g| posteriors.row(g)[s.class_id]).sum::<f64>() / s.len() as f64,
        })
        .collect();
    Ok(Inference { posteriors, phones })
}
