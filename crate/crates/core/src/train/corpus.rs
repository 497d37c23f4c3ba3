//! Utterances prepared once for training: audio, windows, stitch plans,
//! CTC targets and silence masks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{load_wav, Manifest};
use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::objectives::{silence_mask_from_energy, CtcTarget, SilenceMask};
use crate::phonemap::{PhonemeInventory, UnknownSymbols};
use crate::window::{self, StitchPlan, WindowBatch, WindowConfig};

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub audio: Vec<f64>,
    pub windows: WindowBatch,
    pub plan: StitchPlan,
    pub target: Option<CtcTarget>,
    pub silence: SilenceMask,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Load every record of `manifest`. With an inventory the tokens become
    /// CTC targets.
    pub fn load(
        manifest: &Manifest,
        inv: Option<&PhonemeInventory>,
        mode: UnknownSymbols,
        cfg: &WindowConfig,
        silence_threshold_db: f64,
    ) -> Result<Self> {
        let targets = match inv {
            Some(inv) => Some(manifest.targets(inv, mode)?),
            None => None,
        };
        let mut out = Corpus::default();
        for i in 0..manifest.len() {
            let clip = load_wav(manifest.audio_path(i))?;
            let id = manifest.records[i].path.display().to_string();
            let target = targets.as_ref().map(|t| t[i].clone());
            out.utterances.push(Utterance::new(id, clip.samples, target, cfg, silence_threshold_db)?);
        }
        if out.utterances.is_empty() {
            return Err(Error::Empty("corpus has no utterances"));
        }
        Ok(out)
    }

    /// Indices of utterances whose target fits their frames; the rest are
    /// logged and left out of training.
    pub fn trainable(&self) -> Result<Vec<usize>> {
        let mut keep = Vec::with_capacity(self.len());
        for (i, u) in self.utterances.iter().enumerate() {
            let target = u.target.as_ref().ok_or(Error::Missing("utterance labels"))?;
            if u.frames() >= target.min_frames() {
                keep.push(i);
            } else {
                log::warn!(target: "cupe::data", "{}", serde_json::json!({
                    "event": "skip_utterance",
                    "id": u.id,
                    "frames": u.frames(),
                    "target_length": target.len(),
                }));
            }
        }
        if keep.is_empty() {
            return Err(Error::Empty("no utterance has a target that fits its frames"));
        }
        Ok(keep)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labelled(&self) -> bool {
        self.utterances.iter().all(|u| u.target.is_some())
    }
}

impl Utterance {
    pub fn new(
        id: String,
        audio: Vec<f64>,
        target: Option<CtcTarget>,
        cfg: &WindowConfig,
        silence_threshold_db: f64,
    ) -> Result<Self> {
        let windows = window::slice_clip(&audio, cfg)?;
        let plan = StitchPlan::new(&windows.offsets, windows.source_length, cfg)?;
        let silence = silence_mask_from_energy(&audio, cfg, plan.frames, silence_threshold_db);
        Ok(Self {
            id,
            audio,
            windows,
            plan,
            target,
            silence,
        })
    }

    pub fn frames(&self) -> usize {
        self.plan.frames
    }
}

/// Stack the windows of several utterances into one `[N, 1, W]` tensor and
/// return each utterance's first window index.
pub fn stack_windows(utts: &[&Utterance], window_samples: usize) -> Result<(Tensor, Vec<usize>)> {
    let total: usize = utts.iter().map(|u| u.windows.len()).sum();
    let mut data = Vec::with_capacity(total * window_samples);
    let mut firsts = Vec::with_capacity(utts.len());
    for u in utts {
        firsts.push(data.len() / window_samples);
        data.extend_from_slice(u.windows.windows.data());
    }
    Ok((Tensor::new(&[total, 1, window_samples], data)?, firsts))
}

/// Epoch-style sampler: a seeded permutation consumed in order and
/// reshuffled when exhausted.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    /// Next `k` distinct indices (all of them when `k` exceeds the corpus).
    pub fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let k = k.min(self.order.len());
        if self.pos + k > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + k].to_vec();
        self.pos += k;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_corpus_each_epoch() {
        let mut s = BatchSampler::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(BatchSampler::new(3, 0).next_batch(8).len(), 3);
        let a: Vec<_> = (0..7).map(|_| BatchSampler::new(9, 5).next_batch(4)).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn stacks_windows_in_order() {
        let cfg = WindowConfig::default();
        let a = Utterance::new("a".into(), vec![0.1; 4000], None, &cfg, -40.0).unwrap();
        let b = Utterance::new("b".into(), vec![0.2; 2000], None, &cfg, -40.0).unwrap();
        let (x, firsts) = stack_windows(&[&a, &b], cfg.window_samples).unwrap();
        assert_eq!(firsts, vec![0, a.windows.len()]);
        assert_eq!(x.dim(0), a.windows.len() + b.windows.len());
        assert_eq!(x.data()[firsts[1] * cfg.window_samples], 0.2);
    }

    #[test]
    fn infeasible_targets_are_left_out_of_training() {
        let cfg = WindowConfig::default();
        let long = CtcTarget::new(vec![0; 40]);
        let short = CtcTarget::new(vec![0, 1]);
        let corpus = Corpus {
            utterances: vec![
                Utterance::new("x".into(), vec![0.1; 1920], Some(long), &cfg, -40.0).unwrap(),
                Utterance::new("y".into(), vec![0.1; 1920], Some(short), &cfg, -40.0).unwrap(),
            ],
        };
        assert_eq!(corpus.trainable().unwrap(), vec![1]);
    }
}
