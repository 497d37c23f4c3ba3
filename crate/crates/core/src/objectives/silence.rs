//! Silence-aware blank penalty and the energy-derived silence mask it uses.

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;
use crate::objectives::ctc::{ctc_loss, CtcTarget};
use crate::window::WindowConfig;

/// Blank-probability weight inside silence.
pub const SILENCE_WEIGHT: f64 = 0.5;
/// Blank-probability weight outside silence.
pub const SPEECH_WEIGHT: f64 = 0.1;
pub const DEFAULT_THRESHOLD_DB: f64 = -40.0;
pub const DEFAULT_ALPHA_S: f64 = 0.01;

/// Per-frame silence flags on the global frame grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SilenceMask {
    pub flags: Vec<bool>,
    /// Linear RMS threshold below which a frame counted as silence.
    pub energy_threshold: f64,
}

impl SilenceMask {
    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self {
            flags,
            energy_threshold: 0.0,
        }
    }

    /// Per-frame penalty weights `0.5 M + 0.1 (1 - M)`.
    pub fn weights(&self) -> Vec<f64> {
        self.flags
            .iter()
            .map(|&m| if m { SILENCE_WEIGHT } else { SPEECH_WEIGHT })
            .collect()
    }
}

/// Mark frames whose RMS over one hop falls `threshold_db` below the loudest
/// frame. Frames past the end of the audio count as silence.
pub fn silence_mask_from_energy(audio: &[f64], cfg: &WindowConfig, frames: usize, threshold_db: f64) -> SilenceMask {
    let hop = cfg.frame_hop_samples;
    let rms: Vec<Option<f64>> = (0..frames)
        .map(|g| {
            let start = g * hop;
            if start >= audio.len() {
                return None;
            }
            let energy: f64 = audio[start..(start + hop).min(audio.len())].iter().map(|v| v * v).sum();
            Some((energy / hop as f64).sqrt())
        })
        .collect();
    let peak = rms.iter().flatten().cloned().fold(0.0, f64::max);
    let threshold = peak * 10f64.powf(threshold_db / 20.0);
    let flags = rms
        .iter()
        .map(|r| match r {
            None => true,
            Some(v) => peak == 0.0 || *v < threshold,
        })
        .collect();
    SilenceMask {
        flags,
        energy_threshold: threshold,
    }
}

fn check_len(probs: usize, mask: &SilenceMask) -> Result<()> {
    if probs != mask.len() {
        return Err(Error::shape(
            "silence_loss",
            format!("{probs} blank probabilities vs {} mask frames", mask.len()),
        ));
    }
    if probs == 0 {
        return Err(Error::Empty("silence loss over zero frames"));
    }
    Ok(())
}

/// Mean over frames of `0.5 y M + 0.1 y (1 - M)` for one utterance.
pub fn silence_loss(blank_probs: &[f64], mask: &SilenceMask) -> Result<f64> {
    check_len(blank_probs.len(), mask)?;
    let s: f64 = blank_probs.iter().zip(mask.weights()).map(|(y, w)| y * w).sum();
    Ok(s / blank_probs.len() as f64)
}

/// Batch mean of per-utterance silence losses.
pub fn silence_loss_batch(items: &[(&[f64], &SilenceMask)]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("silence loss over an empty batch"));
    }
    let mut total = 0.0;
    for (p, m) in items {
        total += silence_loss(p, m)?;
    }
    Ok(total / items.len() as f64)
}

/// `ctc + alpha_s * silence` for one utterance, where the blank probability
/// is `exp` of the blank log-probability column. Returns the loss and its
/// gradient with respect to `log_probs`.
pub fn combined_loss(log_probs: &Tensor, target: &CtcTarget, mask: &SilenceMask, alpha_s: f64) -> Result<(f64, Tensor)> {
    let (ctc, mut grad) = ctc_loss(log_probs, target)?;
    if alpha_s == 0.0 {
        return Ok((ctc, grad));
    }
    let [frames, width] = log_probs.shape()[..] else { unreachable!("checked by ctc_loss") };
    let blank = width - 1;
    let probs: Vec<f64> = (0..frames).map(|t| log_probs.data()[t * width + blank].exp()).collect();
    let sil = silence_loss(&probs, mask)?;
    for (t, w) in mask.weights().into_iter().enumerate() {
        grad.data_mut()[t * width + blank] += alpha_s * w * probs[t] / frames as f64;
    }
    Ok((ctc + alpha_s * sil, grad))
}

impl Tape {
    /// Silence loss of a `[T]` blank-probability var.
    pub fn silence_loss(&mut self, blank_probs: Var, mask: &SilenceMask) -> Result<Var> {
        let n = self.value(blank_probs).len();
        check_len(n, mask)?;
        let w = mask.weights().into_iter().map(|w| w / n as f64).collect();
        self.dot_const(blank_probs, w)
    }
}
