//! Supervised CTC training and fine-tuning from a pretrained encoder.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::EncoderState;
use crate::nn::graph::{mix_seed, BnUpdate};
use crate::nn::params::{ParamGroup, ParamId};
use crate::phonemap::PhonemeInventory;
use crate::train::config::TrainConfig;
use crate::train::corpus::{stack_windows, BatchSampler, Corpus, Utterance};
use crate::train::eval::{check_classes, evaluate_corpus};
use crate::train::optim::{clip_global_norm, AdamW, GroupRates, OneCycle};
use crate::train::state::{run_kind, RunKind, RunState};
use crate::window::StitchMode;

/// Floor applied to stitched probabilities before the log.
pub const PROB_FLOOR: f64 = 1e-12;

const SUPERVISED_SALT: u64 = 0x5355_5045_5256;
const FINETUNE_SALT: u64 = 0x4649_4e45_5455;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Batch mean of the CTC terms.
    pub ctc: f64,
    /// Batch mean of the unweighted silence terms.
    pub silence: f64,
    pub lr: BTreeMap<ParamGroup, f64>,
    pub beta1: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub per: f64,
    pub gp_macro: Option<f64>,
}

/// A finished supervised or fine-tuning run.
pub struct TrainOutcome {
    pub kind: RunKind,
    pub model: EncoderState,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub steps_run: usize,
    pub history: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn checkpoint(&self, inv: &PhonemeInventory) -> Result<Checkpoint> {
        RunState {
            kind: self.kind,
            step: self.steps_run as u64,
            model: &self.model,
            config: &self.config,
            inventory: Some(inv),
            optimizer: &self.optimizer,
            codebook: None,
        }
        .to_checkpoint()
    }
}

/// Forward and backward of one batch.
pub struct BatchGradients {
    pub loss: f64,
    pub ctc: Vec<f64>,
    pub silence: Vec<f64>,
    pub grads: Vec<(ParamId, Vec<f64>)>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Batch mean of `ctc + alpha_s * silence` over utterances, with gradients
/// of every trainable parameter.
pub fn batch_gradients(model: &EncoderState, batch: &[&Utterance], alpha_s: f64, seed: u64) -> Result<BatchGradients> {
    let (x, firsts) = stack_windows(batch, model.config.window.window_samples)?;
    let mut g = model.graph(seed);
    let x = g.tape.constant(x);
    let emb = model.encode_on(&mut g, x, true)?;
    let logits = model.classify_on(&mut g, emb, true)?;
    let probs = g.tape.softmax(logits);
    let blank = model.config.blank();
    let mut terms = Vec::with_capacity(batch.len());
    let (mut ctc_values, mut sil_values) = (Vec::new(), Vec::new());
    for (u, &first) in batch.iter().zip(&firsts) {
        let target = u.target.as_ref().ok_or(Error::Missing("utterance labels"))?;
        let stitched = g.tape.stitch(probs, first, &u.plan, StitchMode::Probabilities)?;
        let log_probs = g.tape.log_clamped(stitched, PROB_FLOOR);
        let ctc = g.tape.ctc_loss(log_probs, target)?;
        let blank_probs = g.tape.select_column(stitched, blank)?;
        let sil = g.tape.silence_loss(blank_probs, &u.silence)?;
        ctc_values.push(g.tape.value(ctc).data()[0]);
        sil_values.push(g.tape.value(sil).data()[0]);
        let weighted = g.tape.scale(sil, alpha_s);
        terms.push(g.tape.add(ctc, weighted)?);
    }
    let sum = g.tape.add_all(&terms)?;
    let loss = g.tape.scale(sum, 1.0 / batch.len() as f64);
    let loss_value = g.tape.value(loss).data()[0];
    let mut grads = Vec::new();
    if loss_value.is_finite() {
        let mut all = g.tape.backward(loss)?;
        grads = g.param_grads(&mut all);
    }
    Ok(BatchGradients {
        loss: loss_value,
        ctc: ctc_values,
        silence: sil_values,
        grads,
        bn_updates: g.take_bn_updates(),
    })
}

fn non_finite_dump(step: usize, batch: &[&Utterance], b: &BatchGradients, grad_norm: f64) -> Error {
    let dump = json!({
        "event": "non_finite",
        "step": step,
        "loss": format!("{}", b.loss),
        "grad_norm": format!("{grad_norm}"),
        "utterances": batch.iter().map(|u| &u.id).collect::<Vec<_>>(),
        "ctc": b.ctc.iter().map(|v| format!("{v}")).collect::<Vec<_>>(),
        "silence": b.silence.iter().map(|v| format!("{v}")).collect::<Vec<_>>(),
        "frames": batch.iter().map(|u| u.frames()).collect::<Vec<_>>(),
        "target_lengths": batch.iter().map(|u| u.target.as_ref().map_or(0, |t| t.len())).collect::<Vec<_>>(),
    });
    log::error!(target: "cupe::train", "{dump}");
    Error::NonFinite(format!("training aborted at step {step}; batch dump: {dump}"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Train a fresh model with CTC plus the silence penalty.
pub fn train_supervised(cfg: &TrainConfig, corpus: &Corpus, valid: Option<&Corpus>, inv: &PhonemeInventory) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = EncoderState::build(cfg.model.clone(), cfg.seed)?;
    run(model, cfg, cfg.lr, RunKind::Supervised, corpus, valid, inv)
}

/// Replace a pretrained model's heads with a fresh classifier and train it at
/// the reduced fine-tuning rate, optionally with a frozen feature extractor.
pub fn finetune(cfg: &TrainConfig, pretrained: &Checkpoint, corpus: &Corpus, valid: Option<&Corpus>, inv: &PhonemeInventory) -> Result<TrainOutcome> {
    cfg.validate()?;
    if run_kind(pretrained) != Some(RunKind::Pretrain) {
        return Err(Error::Checkpoint("fine-tuning needs a pretraining checkpoint".into()));
    }
    if pretrained.model.num_classes != inv.num_classes() {
        return Err(Error::Config(format!(
            "pretrained config declares {} classes but the inventory has {}",
            pretrained.model.num_classes,
            inv.num_classes()
        )));
    }
    let mut model = EncoderState::from_checkpoint(pretrained)?;
    let head = model.drop_pretraining_head();
    let ssl = model.drop_ssl_components();
    model.attach_classifier(mix_seed(cfg.seed, FINETUNE_SALT))?;
    model.frozen_feature_extractor = cfg.finetune.freeze_features;
    log::info!(target: "cupe::train", "{}", json!({
        "event": "finetune_setup",
        "dropped_head_values": head,
        "dropped_ssl_values": ssl,
        "freeze_features": cfg.finetune.freeze_features,
        "params": model.store.trainable_count(),
    }));
    run(model, cfg, cfg.lr * cfg.finetune.lr_scale, RunKind::Finetune, corpus, valid, inv)
}

/// Fine-tuning regime applied to a randomly initialised model: the same
/// steps, rate and freezing, without pretrained weights.
pub fn finetune_from_scratch(cfg: &TrainConfig, corpus: &Corpus, valid: Option<&Corpus>, inv: &PhonemeInventory) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = EncoderState::build(cfg.model.clone(), cfg.seed)?;
    model.attach_classifier(mix_seed(cfg.seed, FINETUNE_SALT))?;
    model.frozen_feature_extractor = cfg.finetune.freeze_features;
    run(model, cfg, cfg.lr * cfg.finetune.lr_scale, RunKind::Finetune, corpus, valid, inv)
}

fn run(
    mut model: EncoderState,
    cfg: &TrainConfig,
    peak_lr: f64,
    kind: RunKind,
    corpus: &Corpus,
    valid: Option<&Corpus>,
    inv: &PhonemeInventory,
) -> Result<TrainOutcome> {
    check_classes(&model, inv)?;
    let usable = corpus.trainable()?;
    let salt = if kind == RunKind::Finetune { FINETUNE_SALT } else { SUPERVISED_SALT };
    let schedule = OneCycle::new(cfg.steps, &cfg.schedule);
    let rates = GroupRates::uniform(peak_lr, cfg.weight_decay);
    let mut optimizer = AdamW::new(cfg.adam.clone());
    let mut sampler = BatchSampler::new(usable.len(), mix_seed(cfg.seed, salt));
    let mut history = Vec::with_capacity(cfg.steps);
    let mut validations = Vec::new();
    let mut stopped_early = false;
    let mut steps_run = 0;
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &corpus.utterances[usable[i]]).collect();
        let mut b = batch_gradients(&model, &batch, cfg.alpha_s, mix_seed(cfg.seed ^ salt, step as u64))?;
        let (grad_norm, clipped_norm) = clip_global_norm(&mut b.grads, cfg.grad_clip);
        if !b.loss.is_finite() || !grad_norm.is_finite() {
            return Err(non_finite_dump(step, &batch, &b, grad_norm));
        }
        let point = schedule.at(step);
        let lr = rates.current(point);
        optimizer.update(&mut model.store, &b.grads, &lr, rates.weight_decay, point.beta1)?;
        model.apply_bn_updates(&b.bn_updates);
        let record = StepRecord {
            step,
            loss: b.loss,
            ctc: mean(&b.ctc),
            silence: mean(&b.silence),
            lr: lr.into_iter().filter(|(g, _)| model.store.count_where(|p| p.group == *g) > 0).collect(),
            beta1: point.beta1,
            grad_norm,
            clipped_norm,
        };
        log::info!(target: "cupe::train", "{}", json!({"event": "step", "kind": kind, "record": record}));
        history.push(record);
        steps_run = step + 1;
        let last = step + 1 == cfg.steps;
        if last || (cfg.validate_every > 0 && (step + 1) % cfg.validate_every == 0) {
            let out = evaluate_corpus(&model, valid.unwrap_or(corpus), inv, None)?;
            let v = ValidationRecord {
                step: step + 1,
                per: out.report.per,
                gp_macro: out.report.gp_macro,
            };
            log::info!(target: "cupe::train", "{}", json!({"event": "validation", "kind": kind, "record": v}));
            let hit = cfg.early_stop_per.is_some_and(|t| v.per < t);
            validations.push(v);
            if hit && !last {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        kind,
        model,
        optimizer,
        config: cfg.clone(),
        steps_run,
        history,
        validations,
        stopped_early,
    })
}
