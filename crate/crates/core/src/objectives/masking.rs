//! Energy-guided frame masking for masked-prediction pretraining.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

pub const MIN_MASK_RATIO: f64 = 0.10;
pub const MAX_MASK_RATIO: f64 = 0.80;
pub const DEFAULT_MASK_RATIO: f64 = 0.40;
/// Frames whose energy jump lies in this upper quantile are always masked.
pub const BOUNDARY_QUANTILE: f64 = 0.9;
const MAX_DRAWS: usize = 32;

/// Masked frames for a batch of windows.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Sorted masked frame indices, one list per window.
    pub masked: Vec<Vec<usize>>,
    pub frames_per_window: usize,
    /// Ratio requested after clamping to the allowed range.
    pub target_ratio: f64,
    pub window_ratios: Vec<f64>,
    pub batch_ratio: f64,
    /// Sampling attempts used; zero when the deterministic fallback ran.
    pub draws: usize,
    pub fallback: bool,
}

impl MaskPlan {
    pub fn windows(&self) -> usize {
        self.masked.len()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().map(Vec::len).sum()
    }

    /// Flags over the flattened `[N * F_w]` frame grid.
    pub fn flags(&self) -> Vec<bool> {
        let f = self.frames_per_window;
        let mut out = vec![false; self.windows() * f];
        for (n, idx) in self.masked.iter().enumerate() {
            for &t in idx {
                out[n * f + t] = true;
            }
        }
        out
    }

    /// Flattened `n * F_w + t` indices of masked frames, in window order.
    pub fn flat_indices(&self) -> Vec<usize> {
        let f = self.frames_per_window;
        self.masked
            .iter()
            .enumerate()
            .flat_map(|(n, idx)| idx.iter().map(move |&t| n * f + t))
            .collect()
    }
}

/// Mean square of the samples under each frame, splitting a window of `W`
/// samples evenly into `frames` spans. Accepts `[N, W]` or `[N, 1, W]`.
pub fn frame_energies(windows: &Tensor, frames: usize) -> Result<Tensor> {
    let shape = windows.shape();
    let (n, w) = match shape {
        [n, w] | [n, 1, w] => (*n, *w),
        _ => {
            return Err(Error::shape(
                "frame_energies",
                format!("expected [N, W] or [N, 1, W], got {shape:?}"),
            ))
        }
    };
    if frames == 0 || frames > w {
        return Err(Error::InvalidArgument(format!("{frames} frames over {w} samples")));
    }
    let mut out = Vec::with_capacity(n * frames);
    for row in windows.data().chunks(w) {
        for f in 0..frames {
            let span = &row[f * w / frames..(f + 1) * w / frames];
            out.push(span.iter().map(|v| v * v).sum::<f64>() / span.len() as f64);
        }
    }
    Tensor::new(&[n, frames], out)
}

/// Masked-frame count for a window of `frames` frames: the nearest count to
/// `ratio * frames` that keeps the window inside the allowed range.
fn window_budget(ratio: f64, frames: usize) -> usize {
    let lo = (MIN_MASK_RATIO * frames as f64).ceil() as usize;
    let hi = (MAX_MASK_RATIO * frames as f64).floor() as usize;
    ((ratio * frames as f64).round() as usize).clamp(lo.max(1), hi.max(1))
}

/// Frames opening or closing a large energy jump, strongest first, at most
/// `limit` of them.
fn boundary_frames(e: &[f64], limit: usize) -> Vec<usize> {
    if e.len() < 2 {
        return Vec::new();
    }
    let jumps: Vec<f64> = (1..e.len()).map(|t| (e[t] - e[t - 1]).abs()).collect();
    let mut sorted = jumps.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = sorted[((BOUNDARY_QUANTILE * sorted.len() as f64).floor() as usize).min(sorted.len() - 1)];
    let mut picks: Vec<usize> = (1..e.len()).filter(|&t| jumps[t - 1] > 0.0 && jumps[t - 1] >= cut).collect();
    picks.sort_by(|&a, &b| jumps[b - 1].total_cmp(&jumps[a - 1]).then(a.cmp(&b)));
    picks.truncate(limit);
    picks
}

/// Inclusion probabilities proportional to `weights`, capped at one, that
/// sum to `budget`.
fn inclusion_probs(weights: &[f64], budget: usize) -> Vec<f64> {
    let mut p = vec![0.0; weights.len()];
    let mut capped = vec![false; weights.len()];
    loop {
        let free: f64 = weights.iter().zip(&capped).filter(|(_, &c)| !c).map(|(w, _)| w).sum();
        let remaining = budget as f64 - capped.iter().filter(|&&c| c).count() as f64;
        if free <= 0.0 || remaining <= 0.0 {
            for (pi, &c) in p.iter_mut().zip(&capped) {
                *pi = if c { 1.0 } else { 0.0 };
            }
            return p;
        }
        let scale = remaining / free;
        let mut changed = false;
        for i in 0..weights.len() {
            if !capped[i] && weights[i] * scale >= 1.0 {
                capped[i] = true;
                changed = true;
            }
        }
        if !changed {
            for i in 0..weights.len() {
                p[i] = if capped[i] { 1.0 } else { weights[i] * scale };
            }
            return p;
        }
    }
}

/// Pick masked frames per window. Boundary frames are always included; the
/// rest are drawn independently with probability proportional to
/// `energy + delta`, scaled so each window expects its budget. Draws repeat
/// until the batch ratio lies in `[0.10, 0.80]`, after which the highest
/// energy frames are taken deterministically.
pub fn select_mask<R: Rng + ?Sized>(energies: &Tensor, target_ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    let [n, frames] = energies.shape()[..] else {
        return Err(Error::shape(
            "select_mask",
            format!("energies must be [N, F_w], got {:?}", energies.shape()),
        ));
    };
    if n == 0 {
        return Err(Error::Empty("mask over zero windows"));
    }
    if frames < 2 {
        return Err(Error::InvalidArgument(format!(
            "masking needs at least 2 frames per window, got {frames}"
        )));
    }
    if energies.data().iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::InvalidArgument("frame energies must be finite and non-negative".into()));
    }
    let ratio = if target_ratio.is_nan() { DEFAULT_MASK_RATIO } else { target_ratio.clamp(MIN_MASK_RATIO, MAX_MASK_RATIO) };
    let budget = window_budget(ratio, frames);

    struct WindowDraw {
        forced: Vec<usize>,
        probs: Vec<f64>,
        weights: Vec<f64>,
    }
    let draws: Vec<WindowDraw> = energies
        .data()
        .chunks(frames)
        .map(|e| {
            let forced = boundary_frames(e, budget);
            let delta = 0.1 * e.iter().sum::<f64>() / frames as f64 + 1e-12;
            let weights: Vec<f64> = (0..frames)
                .map(|t| if forced.contains(&t) { 0.0 } else { e[t] + delta })
                .collect();
            let probs = inclusion_probs(&weights, budget - forced.len());
            WindowDraw { forced, probs, weights }
        })
        .collect();

    let total = (n * frames) as f64;
    let in_range = |count: usize| (MIN_MASK_RATIO..=MAX_MASK_RATIO).contains(&(count as f64 / total));
    let finish = |masked: Vec<Vec<usize>>, draws: usize, fallback: bool| {
        let window_ratios = masked.iter().map(|m| m.len() as f64 / frames as f64).collect();
        let batch_ratio = masked.iter().map(Vec::len).sum::<usize>() as f64 / total;
        MaskPlan {
            masked,
            frames_per_window: frames,
            target_ratio: ratio,
            window_ratios,
            batch_ratio,
            draws,
            fallback,
        }
    };

    for attempt in 1..=MAX_DRAWS {
        let masked: Vec<Vec<usize>> = draws
            .iter()
            .map(|d| {
                let mut m = d.forced.clone();
                m.extend((0..frames).filter(|&t| d.probs[t] > 0.0 && rng.random::<f64>() < d.probs[t]));
                m.sort_unstable();
                m
            })
            .collect();
        if in_range(masked.iter().map(Vec::len).sum()) {
            return Ok(finish(masked, attempt, false));
        }
    }
    let masked = draws
        .iter()
        .map(|d| {
            let mut rest: Vec<usize> = (0..frames).filter(|t| !d.forced.contains(t)).collect();
            rest.sort_by(|&a, &b| d.weights[b].total_cmp(&d.weights[a]).then(a.cmp(&b)));
            let mut m = d.forced.clone();
            m.extend(rest.into_iter().take(budget - d.forced.len()));
            m.sort_unstable();
            m
        })
        .collect();
    Ok(finish(masked, 0, true))
}
