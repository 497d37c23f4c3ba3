//! Masked-prediction pretraining against an EMA vector-quantized codebook.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::EncoderState;
use crate::nn::graph::mix_seed;
use crate::nn::params::ParamGroup;
use crate::objectives::vq::code_perplexity;
use crate::objectives::{frame_energies, select_mask, vq_assign, vq_ema_update, CodebookState, Curriculum, SslComponents};
use crate::train::config::TrainConfig;
use crate::train::corpus::{stack_windows, BatchSampler, Corpus, Utterance};
use crate::train::optim::{clip_global_norm, AdamW, GroupRates, OneCycle};
use crate::train::state::{RunKind, RunState};

const PRETRAIN_SALT: u64 = 0x5052_4554_5241;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub losses: SslComponents,
    pub masked_frames: usize,
    pub mask_ratio: f64,
    pub lr: BTreeMap<ParamGroup, f64>,
    pub beta1: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

pub struct PretrainOutcome {
    pub model: EncoderState,
    pub codebook: CodebookState,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub steps_run: usize,
    pub history: Vec<PretrainRecord>,
}

impl PretrainOutcome {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        RunState {
            kind: RunKind::Pretrain,
            step: self.steps_run as u64,
            model: &self.model,
            config: &self.config,
            inventory: None,
            optimizer: &self.optimizer,
            codebook: Some(&self.codebook),
        }
        .to_checkpoint()
    }

    /// Code-usage perplexity of the codebook over the whole corpus.
    pub fn corpus_perplexity(&self, corpus: &Corpus) -> Result<f64> {
        let mut codes = Vec::new();
        for u in &corpus.utterances {
            let q = quantizer_features(&self.model, u)?;
            codes.extend(vq_assign(&q, &self.codebook)?);
        }
        Ok(code_perplexity(&codes, self.codebook.size()))
    }
}

/// Quantizer inputs `[N*F, P]` of every frame of one utterance (eval mode).
pub fn quantizer_features(model: &EncoderState, u: &Utterance) -> Result<crate::nn::tensor::Tensor> {
    let (x, _) = stack_windows(&[u], model.config.window.window_samples)?;
    let mut g = model.graph(0);
    let x = g.tape.constant(x);
    let feats = model.features_on(&mut g, x, false, None)?;
    let frames = g.tape.transpose12(feats)?;
    let [n, f, c] = g.tape.shape(frames)[..] else { unreachable!("rank checked by transpose12") };
    let flat = g.tape.reshape(frames, &[n * f, c])?;
    let q = model.quantizer_on(&mut g, flat)?;
    Ok(g.tape.value(q).clone())
}

/// Hierarchical peak rates: encoder (feature extractor, transformer and mask
/// embedding), quantizer projection and prediction head.
pub fn pretrain_rates(cfg: &TrainConfig) -> GroupRates {
    let p = &cfg.pretrain;
    GroupRates::uniform(p.lr_encoder, p.weight_decay)
        .with(ParamGroup::Quantizer, p.lr_quantizer)
        .with(ParamGroup::Projection, p.lr_head)
}

/// Pretrain a fresh encoder on unlabelled audio.
pub fn pretrain_ssl(cfg: &TrainConfig, corpus: &Corpus) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let mut model = EncoderState::build(cfg.model.clone(), cfg.seed)?;
    model.drop_classifier();
    model.attach_pretraining(mix_seed(cfg.seed, PRETRAIN_SALT))?;
    let ssl = model.ssl().ok_or(Error::Missing("pretraining components"))?;
    let mask_embedding = ssl.mask_embedding;
    let p = &cfg.pretrain;
    let schedule = OneCycle::new(cfg.steps, &cfg.schedule);
    let rates = pretrain_rates(cfg);
    let mut optimizer = AdamW::new(cfg.adam.clone());
    let mut sampler = BatchSampler::new(corpus.len(), mix_seed(cfg.seed, PRETRAIN_SALT));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, PRETRAIN_SALT ^ 1));
    let mut codebook: Option<CodebookState> = None;
    let mut history = Vec::with_capacity(cfg.steps);
    let w = model.config.window.window_samples;
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &corpus.utterances[i]).collect();
        let (x, _) = stack_windows(&batch, w)?;
        let plan = select_mask(&frame_energies(&x, model.config.frames_per_window())?, p.mask_ratio, &mut rng)?;
        let masked = plan.flat_indices();
        let mut g = model.graph(mix_seed(cfg.seed ^ PRETRAIN_SALT, step as u64));
        let xv = g.tape.constant(x);
        let feats = model.features_on(&mut g, xv, true, None)?;
        let frames = g.tape.transpose12(feats)?;
        let [n, f, c] = g.tape.shape(frames)[..] else { unreachable!("rank checked by transpose12") };
        let flat = g.tape.reshape(frames, &[n * f, c])?;
        let me = g.param(mask_embedding);
        let replaced = g.tape.replace_rows(flat, me, &plan.flags())?;
        let replaced = g.tape.reshape(replaced, &[n, f, c])?;
        let emb = model.transform_on(&mut g, replaced, true)?;
        let d = model.config.model_dim;
        let emb = g.tape.reshape(emb, &[n * f, d])?;
        let emb = g.tape.gather_rows(emb, &masked)?;
        let predictions = model.project_on(&mut g, emb, true)?;
        let targets_in = g.tape.gather_rows(flat, &masked)?;
        let quantized = model.quantizer_on(&mut g, targets_in)?;
        let q_value = g.tape.value(quantized).clone();
        let cb = match codebook.take() {
            Some(cb) => cb,
            None => CodebookState::from_features(&q_value, p.codebook_size, p.codebook_decay, p.laplace_epsilon, &mut rng)?,
        };
        let curriculum = Curriculum {
            step,
            warmup_steps: schedule.warmup_steps,
        };
        let (loss, comps) = g.tape.ssl_loss(predictions, quantized, &cb, &p.loss, curriculum, &mut rng)?;
        let (mut grads, grad_norm, clipped_norm) = if comps.total.is_finite() {
            let mut all = g.tape.backward(loss)?;
            let mut grads = g.param_grads(&mut all);
            let (a, b) = clip_global_norm(&mut grads, cfg.grad_clip);
            (grads, a, b)
        } else {
            (Vec::new(), f64::NAN, f64::NAN)
        };
        let bn = g.take_bn_updates();
        drop(g);
        if !grad_norm.is_finite() {
            let dump = json!({
                "event": "non_finite",
                "step": step,
                "losses": format!("{comps:?}"),
                "utterances": batch.iter().map(|u| &u.id).collect::<Vec<_>>(),
            });
            log::error!(target: "cupe::pretrain", "{dump}");
            return Err(Error::NonFinite(format!("pretraining aborted at step {step}; batch dump: {dump}")));
        }
        let point = schedule.at(step);
        let lr = rates.current(point);
        optimizer.update(&mut model.store, &grads, &lr, rates.weight_decay, point.beta1)?;
        grads.clear();
        model.apply_bn_updates(&bn);
        let codes = vq_assign(&q_value, &cb)?;
        codebook = Some(vq_ema_update(&cb, &q_value, &codes)?);
        let record = PretrainRecord {
            step,
            losses: comps,
            masked_frames: masked.len(),
            mask_ratio: plan.batch_ratio,
            lr: lr.into_iter().filter(|(g, _)| model.store.count_where(|p| p.group == *g) > 0).collect(),
            beta1: point.beta1,
            grad_norm,
            clipped_norm,
        };
        log::info!(target: "cupe::pretrain", "{}", json!({"event": "step", "kind": RunKind::Pretrain, "record": record}));
        history.push(record);
    }
    Ok(PretrainOutcome {
        model,
        codebook: codebook.ok_or(Error::Empty("pretraining ran zero steps"))?,
        optimizer,
        config: cfg.clone(),
        steps_run: cfg.steps,
        history,
    })
}
