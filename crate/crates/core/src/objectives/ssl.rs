//! Masked-prediction pretraining objective: reconstruction of quantized
//! targets, contrastive discrimination against other masked frames, codebook
//! diversity and codebook similarity.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::{Backward, Grads, Tape, Var};
use crate::nn::tensor::Tensor;
use crate::objectives::vq::{code_perplexity, vq_assign, CodebookState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslWeights {
    pub reconstruction: f64,
    pub contrastive: f64,
    pub diversity: f64,
    pub similarity: f64,
    pub temperature: f64,
    pub negatives_start: usize,
    pub negatives_end: usize,
}

impl Default for SslWeights {
    fn default() -> Self {
        Self {
            reconstruction: 1.0,
            contrastive: 1.0,
            diversity: 0.1,
            similarity: 0.05,
            temperature: 0.1,
            negatives_start: 8,
            negatives_end: 64,
        }
    }
}

/// Position in the negative-count ramp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Curriculum {
    pub step: usize,
    pub warmup_steps: usize,
}

impl Curriculum {
    /// Negatives per positive: linear from start to end over the warmup,
    /// then held.
    pub fn negatives(&self, w: &SslWeights) -> usize {
        if self.warmup_steps == 0 || self.step >= self.warmup_steps {
            return w.negatives_end;
        }
        let frac = self.step as f64 / self.warmup_steps as f64;
        let (a, b) = (w.negatives_start as f64, w.negatives_end as f64);
        (a + (b - a) * frac).round() as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SslComponents {
    pub total: f64,
    pub reconstruction: f64,
    pub contrastive: f64,
    pub diversity: f64,
    pub similarity: f64,
    /// Set when fewer than two masked frames left nothing to contrast.
    pub contrastive_skipped: bool,
    pub negatives: usize,
    /// Perplexity of the hard code assignment.
    pub code_perplexity: f64,
    /// Perplexity of the batch-averaged soft assignment.
    pub soft_perplexity: f64,
}

/// Mean smooth L1 (beta 1) between `x` and a constant target.
struct SmoothL1Op {
    x: Var,
    target: Vec<f64>,
}

impl Backward for SmoothL1Op {
    fn backward(&self, _: &Tensor, g: &[f64], tape: &Tape, grads: &mut Grads<'_>) {
        let n = self.target.len() as f64;
        let x = tape.data(self.x);
        if let Some(buf) = grads.slot(self.x) {
            for ((b, a), t) in buf.iter_mut().zip(x).zip(&self.target) {
                *b += g[0] * (a - t).clamp(-1.0, 1.0) / n;
            }
        }
    }
}

pub fn smooth_l1(x: &[f64], target: &[f64]) -> f64 {
    let s: f64 = x
        .iter()
        .zip(target)
        .map(|(a, t)| {
            let d = (a - t).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum();
    s / x.len().max(1) as f64
}

/// `1 - perplexity(mean_i P[i, :]) / K` for row-stochastic `P [M, K]`.
struct DiversityOp {
    p: Var,
    k: usize,
    mean: Vec<f64>,
    perplexity: f64,
}

impl Backward for DiversityOp {
    fn backward(&self, _: &Tensor, g: &[f64], tape: &Tape, grads: &mut Grads<'_>) {
        let rows = (tape.value(self.p).len() / self.k) as f64;
        let coef: Vec<f64> = self
            .mean
            .iter()
            .map(|&p| self.perplexity / self.k as f64 * (p.max(1e-12).ln() + 1.0) / rows)
            .collect();
        if let Some(buf) = grads.slot(self.p) {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += g[0] * coef[i % self.k];
            }
        }
    }
}

/// Diversity loss of a batch-averaged code distribution.
pub fn diversity_from_usage(usage: &[f64]) -> f64 {
    1.0 - crate::objectives::vq::perplexity(usage) / usage.len() as f64
}

impl Tape {
    pub fn smooth_l1(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::shape(
                "smooth_l1",
                format!("{:?} vs target {:?}", self.shape(x), target.shape()),
            ));
        }
        let v = smooth_l1(self.data(x), target.data());
        Ok(self.push(
            Tensor::scalar(v),
            &[x],
            SmoothL1Op {
                x,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Diversity loss of row-stochastic assignment probabilities `[M, K]`.
    pub fn diversity(&mut self, probs: Var) -> Result<Var> {
        let [m, k] = self.shape(probs)[..] else {
            return Err(Error::shape("diversity", format!("expected [M, K], got {:?}", self.shape(probs))));
        };
        if m == 0 {
            return Err(Error::Empty("diversity over zero rows"));
        }
        let mut mean = vec![0.0; k];
        for row in self.data(probs).chunks(k) {
            for (a, p) in mean.iter_mut().zip(row) {
                *a += p / m as f64;
            }
        }
        let perplexity = crate::objectives::vq::perplexity(&mean);
        let value = Tensor::scalar(1.0 - perplexity / k as f64);
        Ok(self.push(value, &[probs], DiversityOp { p: probs, k, mean, perplexity }))
    }

    /// Masked-prediction loss.
    ///
    /// `predictions [M, D]` are the projection-head outputs at the masked
    /// frames and `quantized [M, D]` the quantizer outputs of the same frames
    /// before masking. Targets are the nearest codebook entries of
    /// `quantized`; negatives for each frame are other masked frames' targets.
    pub fn ssl_loss<R: Rng + ?Sized>(
        &mut self,
        predictions: Var,
        quantized: Var,
        cb: &CodebookState,
        weights: &SslWeights,
        curriculum: Curriculum,
        rng: &mut R,
    ) -> Result<(Var, SslComponents)> {
        let ps = self.shape(predictions).to_vec();
        if ps.len() != 2 || ps[1] != cb.dim() || self.shape(quantized) != ps.as_slice() {
            return Err(Error::shape(
                "ssl_loss",
                format!(
                    "predictions {ps:?} and quantized {:?} must both be [M, {}]",
                    self.shape(quantized),
                    cb.dim()
                ),
            ));
        }
        let m = ps[0];
        if m == 0 {
            return Err(Error::Empty("ssl loss over zero masked frames"));
        }
        let codes = vq_assign(self.value(quantized), cb)?;
        let targets = cb.lookup(&codes)?;
        let mut comp = SslComponents {
            code_perplexity: code_perplexity(&codes, cb.size()),
            ..Default::default()
        };

        let recon = self.smooth_l1(predictions, &targets)?;
        comp.reconstruction = self.value(recon).data()[0];
        let mut terms = vec![self.scale(recon, weights.reconstruction)];

        let negatives = curriculum.negatives(weights).min(m.saturating_sub(1));
        comp.negatives = negatives;
        if m < 2 || negatives == 0 {
            comp.contrastive_skipped = true;
        } else {
            let unit_pred = self.normalize_rows(predictions, 1e-8);
            let mut unit_t = targets.clone();
            for row in unit_t.data_mut().chunks_mut(cb.dim()) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
                row.iter_mut().for_each(|v| *v /= n);
            }
            let t = self.constant(unit_t);
            let sims = self.linear(unit_pred, t, None)?;
            let logits = self.scale(sims, 1.0 / weights.temperature);
            let per_row = negatives + 1;
            let mut cols = Vec::with_capacity(m * per_row);
            for i in 0..m {
                cols.push(i);
                cols.extend(sample(rng, m - 1, negatives).into_iter().map(|j| if j >= i { j + 1 } else { j }));
            }
            let picked = self.take_columns(logits, &cols, per_row)?;
            let lsm = self.log_softmax(picked);
            let positive = self.select_column(lsm, 0)?;
            let nll = self.mean(positive);
            let nll = self.scale(nll, -1.0);
            comp.contrastive = self.value(nll).data()[0];
            terms.push(self.scale(nll, weights.contrastive));
        }

        // Soft assignment: softmax over -|q - e|^2 (up to a per-row constant).
        let two_e = Tensor::new(cb.entries.shape(), cb.entries.data().iter().map(|v| 2.0 * v).collect())?;
        let norms: Vec<f64> = (0..cb.size()).map(|k| -cb.entry(k).iter().map(|v| v * v).sum::<f64>()).collect();
        let w = self.constant(two_e);
        let b = self.constant(Tensor::new(&[cb.size()], norms)?);
        let scores = self.linear(quantized, w, Some(b))?;
        let probs = self.softmax(scores);
        let div = self.diversity(probs)?;
        comp.diversity = self.value(div).data()[0];
        comp.soft_perplexity = (1.0 - comp.diversity) * cb.size() as f64;
        terms.push(self.scale(div, weights.diversity));

        comp.similarity = cb.mean_pairwise_cosine();
        let sim = self.constant(Tensor::scalar(weights.similarity * comp.similarity));
        terms.push(sim);

        let total = self.add_all(&terms)?;
        comp.total = self.value(total).data()[0];
        Ok((total, comp))
    }
}
