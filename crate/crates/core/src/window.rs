//! Fixed-window slicing of waveforms and cosine-weighted stitching of
//! per-window frame outputs onto a global frame grid.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::{Backward, Grads, Tape, Var};
use crate::nn::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;

/// `(kernel, stride, padding)` of the four strided convolutions that turn
/// samples into frames.
pub const CONV_PYRAMID: [(usize, usize, usize); 4] = [(15, 7, 7), (11, 5, 5), (7, 3, 3), (5, 2, 2)];

/// Samples per frame: the product of the pyramid strides.
pub const FRAME_HOP: usize = 7 * 5 * 3 * 2;

pub const WEIGHT_FLOOR: f64 = 1e-6;
pub const STITCH_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub sample_rate: u32,
    pub window_samples: usize,
    pub stride_samples: usize,
    pub frame_hop_samples: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            window_samples: 1920,
            stride_samples: 1280,
            frame_hop_samples: FRAME_HOP,
        }
    }
}

impl WindowConfig {
    /// Window of `window_ms` milliseconds with the default 80 ms stride.
    pub fn with_window_ms(window_ms: usize) -> Self {
        Self {
            window_samples: window_ms * SAMPLE_RATE as usize / 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.frame_hop_samples == 0 {
            return Err(Error::Config("sample rate and frame hop must be positive".into()));
        }
        if self.stride_samples == 0 || self.stride_samples > self.window_samples {
            return Err(Error::Config(format!(
                "stride {} must be in 1..={} (the window size)",
                self.stride_samples, self.window_samples
            )));
        }
        if self.frames_per_window() == 0 {
            return Err(Error::Config(format!(
                "window of {} samples yields no frames",
                self.window_samples
            )));
        }
        Ok(())
    }

    pub fn frames_per_window(&self) -> usize {
        frames_per_window(self)
    }

    /// Frame hop in seconds.
    pub fn frame_hop_secs(&self) -> f64 {
        self.frame_hop_samples as f64 / self.sample_rate as f64
    }
}

/// Frame count of one window, chaining the pyramid length formulas.
pub fn frames_per_window(cfg: &WindowConfig) -> usize {
    CONV_PYRAMID.iter().fold(cfg.window_samples, |len, &(k, s, p)| {
        if len + 2 * p < k {
            0
        } else {
            (len + 2 * p - k) / s + 1
        }
    })
}

/// Windows cut from `B` equal-length clips, stacked clip-major as `[B*N, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub windows: Tensor,
    /// Global sample offset of each window within its clip (`i * s`).
    pub offsets: Vec<usize>,
    pub source_length: usize,
    pub pad_amount: usize,
    pub clips: usize,
}

impl WindowBatch {
    pub fn windows_per_clip(&self) -> usize {
        self.offsets.len()
    }

    pub fn len(&self) -> usize {
        self.windows.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window(&self, i: usize) -> &[f64] {
        self.windows.row(i)
    }
}

/// Number of windows for a clip of `len` samples.
pub fn window_count(len: usize, cfg: &WindowConfig) -> usize {
    let (w, s) = (cfg.window_samples, cfg.stride_samples);
    if len <= w {
        1
    } else {
        (len - w).div_ceil(s) + 1
    }
}

/// Slice `audio` (`[T]` or `[B, T]`) into overlapping windows. The tail is
/// zero-padded so the last window ends at `offsets[N-1] + W`.
pub fn slice(audio: &Tensor, cfg: &WindowConfig) -> Result<WindowBatch> {
    cfg.validate()?;
    let (clips, len) = match audio.shape() {
        [t] => (1, *t),
        [b, t] => (*b, *t),
        s => return Err(Error::shape("slice", format!("expected [T] or [B, T], got {s:?}"))),
    };
    if len == 0 || clips == 0 {
        return Err(Error::Empty("audio"));
    }
    let (w, s) = (cfg.window_samples, cfg.stride_samples);
    let n = window_count(len, cfg);
    let padded = (n - 1) * s + w;
    let offsets: Vec<usize> = (0..n).map(|i| i * s).collect();
    let mut data = Vec::with_capacity(clips * n * w);
    for b in 0..clips {
        let clip = &audio.data()[b * len..(b + 1) * len];
        for &off in &offsets {
            let end = (off + w).min(len);
            data.extend_from_slice(&clip[off.min(len)..end]);
            data.resize(data.len() + (off + w - end.max(off)), 0.0);
        }
    }
    Ok(WindowBatch {
        windows: Tensor::new(&[clips * n, w], data)?,
        offsets,
        source_length: len,
        pad_amount: padded - len,
        clips,
    })
}

/// Slice a single mono clip.
pub fn slice_clip(samples: &[f64], cfg: &WindowConfig) -> Result<WindowBatch> {
    slice(&Tensor::new(&[samples.len()], samples.to_vec())?, cfg)
}

/// `sin(pi t / F_w)`, floored at 1e-6.
pub fn cosine_weight(t: usize, frames: usize) -> f64 {
    (PI * t as f64 / frames as f64 - PI / 2.0).cos().max(WEIGHT_FLOOR)
}

/// How stitched values are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StitchMode {
    /// Inputs are distributions; the weighted average is renormalized.
    #[default]
    Probabilities,
    /// Inputs are unnormalized scores; the weighted average is returned as is.
    Logits,
}

/// Deposit schedule mapping window frames to global frames.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchPlan {
    pub windows: usize,
    pub frames_per_window: usize,
    pub frames: usize,
    /// `(window, local frame, global frame, weight)` for every kept deposit.
    pub deposits: Vec<(usize, usize, usize, f64)>,
    /// Accumulated weight per global frame.
    pub weight_mass: Vec<f64>,
}

/// Global frame of local frame `t` in the window starting at `offset`.
pub fn global_frame(offset: usize, t: usize, hop: usize) -> usize {
    (offset as f64 / hop as f64).round() as usize + t
}

impl StitchPlan {
    pub fn new(offsets: &[usize], source_length: usize, cfg: &WindowConfig) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::Empty("stitch over zero windows"));
        }
        let fw = cfg.frames_per_window();
        let hop = cfg.frame_hop_samples;
        let last = *offsets.last().expect("non-empty");
        let by_source = source_length.div_ceil(hop);
        let reach = global_frame(last, fw - 1, hop) + 1;
        let frames = by_source.min(reach).max(1);
        let mut deposits = Vec::new();
        let mut weight_mass = vec![0.0; frames];
        for (k, &off) in offsets.iter().enumerate() {
            for t in 0..fw {
                let g = global_frame(off, t, hop);
                if g < frames {
                    let w = cosine_weight(t, fw);
                    deposits.push((k, t, g, w));
                    weight_mass[g] += w;
                }
            }
        }
        if let Some(g) = weight_mass.iter().position(|&m| m <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "global frame {g} receives no window frames; stride too large for the frame grid"
            )));
        }
        Ok(Self {
            windows: offsets.len(),
            frames_per_window: fw,
            frames,
            deposits,
            weight_mass,
        })
    }

    /// Deposits whose window overlaps global frame `g`.
    pub fn contributors(&self, g: usize) -> Vec<usize> {
        let mut ks: Vec<usize> = self
            .deposits
            .iter()
            .filter(|d| d.2 == g)
            .map(|d| d.0)
            .collect();
        ks.dedup();
        ks
    }

    /// Stitch `[N, F_w, K]` values (flattened, `rows` windows starting at
    /// `first_window`) into `[T_f, K]`.
    fn apply(&self, values: &[f64], first_window: usize, width: usize, mode: StitchMode) -> Vec<f64> {
        let fw = self.frames_per_window;
        let mut out = vec![0.0; self.frames * width];
        for &(k, t, g, w) in &self.deposits {
            let src = &values[((first_window + k) * fw + t) * width..][..width];
            for (o, v) in out[g * width..(g + 1) * width].iter_mut().zip(src) {
                *o += w * v;
            }
        }
        for (g, row) in out.chunks_mut(width).enumerate() {
            let denom = self.weight_mass[g] + STITCH_EPS;
            row.iter_mut().for_each(|v| *v /= denom);
            if mode == StitchMode::Probabilities {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    row.iter_mut().for_each(|v| *v /= s);
                }
            }
        }
        out
    }
}

/// Per-frame class distributions on the global frame grid.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchedPosteriors {
    /// `[T_f, C+1]`
    pub frames: Tensor,
    /// Frame hop in seconds.
    pub frame_hop: f64,
    pub weight_mass: Vec<f64>,
}

impl StitchedPosteriors {
    pub fn len(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.frames.dim(1)
    }

    pub fn row(&self, g: usize) -> &[f64] {
        self.frames.row(g)
    }

    /// Column `c` (e.g. the blank probability per frame).
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|g| self.row(g)[c]).collect()
    }
}

fn check_per_window(values: &Tensor, plan: &StitchPlan, first_window: usize) -> Result<usize> {
    match values.shape() {
        [n, f, k] if *f == plan.frames_per_window && *n >= first_window + plan.windows && *k > 0 => Ok(*k),
        s => Err(Error::shape(
            "stitch",
            format!(
                "per-window values {s:?} vs {} windows x {} frames",
                plan.windows, plan.frames_per_window
            ),
        )),
    }
}

/// Stitch per-window frame values of a single clip.
pub fn stitch(per_window: &Tensor, batch: &WindowBatch, cfg: &WindowConfig, mode: StitchMode) -> Result<StitchedPosteriors> {
    if batch.clips != 1 {
        return Err(Error::InvalidArgument(format!(
            "stitch expects windows of one clip, batch holds {}",
            batch.clips
        )));
    }
    let plan = StitchPlan::new(&batch.offsets, batch.source_length, cfg)?;
    stitch_with_plan(per_window, 0, &plan, cfg, mode)
}

/// Stitch windows `first_window..first_window + plan.windows` of `per_window`.
pub fn stitch_with_plan(
    per_window: &Tensor,
    first_window: usize,
    plan: &StitchPlan,
    cfg: &WindowConfig,
    mode: StitchMode,
) -> Result<StitchedPosteriors> {
    let width = check_per_window(per_window, plan, first_window)?;
    let out = plan.apply(per_window.data(), first_window, width, mode);
    Ok(StitchedPosteriors {
        frames: Tensor::new(&[plan.frames, width], out)?,
        frame_hop: cfg.frame_hop_secs(),
        weight_mass: plan.weight_mass.clone(),
    })
}

struct StitchOp {
    x: Var,
    plan: StitchPlan,
    first_window: usize,
    width: usize,
    mode: StitchMode,
    /// Row sums before renormalization (probability mode).
    sums: Vec<f64>,
}

impl Backward for StitchOp {
    fn backward(&self, out: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        let width = self.width;
        let fw = self.plan.frames_per_window;
        // Gradient with respect to the pre-renormalization weighted average.
        let mut gz = g.to_vec();
        if self.mode == StitchMode::Probabilities {
            for (r, (gr, yr)) in gz.chunks_mut(width).zip(out.data().chunks(width)).enumerate() {
                let s = self.sums[r];
                if s > 0.0 {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gr.iter_mut().for_each(|v| *v = (*v - dot) / s);
                }
            }
        }
        let Some(buf) = grads.slot(self.x) else { return };
        for &(k, t, gi, w) in &self.plan.deposits {
            let c = w / (self.plan.weight_mass[gi] + STITCH_EPS);
            let dst = &mut buf[((self.first_window + k) * fw + t) * width..][..width];
            for (d, v) in dst.iter_mut().zip(&gz[gi * width..(gi + 1) * width]) {
                *d += c * v;
            }
        }
    }
}

impl Tape {
    /// Differentiable stitching of one clip's windows out of `x [N, F_w, K]`.
    pub fn stitch(&mut self, x: Var, first_window: usize, plan: &StitchPlan, mode: StitchMode) -> Result<Var> {
        let width = check_per_window(self.value(x), plan, first_window)?;
        let fw = plan.frames_per_window;
        let mut z = vec![0.0; plan.frames * width];
        let values = self.data(x);
        for &(k, t, g, w) in &plan.deposits {
            let src = &values[((first_window + k) * fw + t) * width..][..width];
            for (o, v) in z[g * width..(g + 1) * width].iter_mut().zip(src) {
                *o += w * v;
            }
        }
        let mut sums = vec![1.0; plan.frames];
        for (g, row) in z.chunks_mut(width).enumerate() {
            let denom = plan.weight_mass[g] + STITCH_EPS;
            row.iter_mut().for_each(|v| *v /= denom);
            if mode == StitchMode::Probabilities {
                let s: f64 = row.iter().sum();
                sums[g] = s;
                if s > 0.0 {
                    row.iter_mut().for_each(|v| *v /= s);
                }
            }
        }
        let out = Tensor::new(&[plan.frames, width], z)?;
        Ok(self.push(
            out,
            &[x],
            StitchOp {
                x,
                plan: plan.clone(),
                first_window,
                width,
                mode,
                sums,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> WindowConfig {
        WindowConfig::default()
    }

    #[test]
    fn frame_counts_follow_the_pyramid() {
        assert_eq!(frames_per_window(&cfg()), 10);
        assert_eq!(frames_per_window(&WindowConfig::with_window_ms(360)), 28);
        // 2560 -> 366 -> 74 -> 25 -> 13
        assert_eq!(frames_per_window(&WindowConfig::with_window_ms(160)), 13);
        assert_eq!(FRAME_HOP, 210);
    }

    #[test]
    fn slice_counts_and_padding() {
        let one_second = Tensor::zeros(&[16000]);
        let b = slice(&one_second, &cfg()).unwrap();
        assert_eq!(b.len(), 12);
        assert_eq!(b.offsets[11], 11 * 1280);
        assert_eq!(b.pad_amount, 11 * 1280 + 1920 - 16000);

        let exact = slice(&Tensor::zeros(&[1920]), &cfg()).unwrap();
        assert_eq!((exact.len(), exact.pad_amount), (1, 0));

        let short = slice(&Tensor::full(&[1000], 0.5), &cfg()).unwrap();
        assert_eq!((short.len(), short.pad_amount), (1, 920));
        assert!(short.window(0)[1000..].iter().all(|&v| v == 0.0));
        assert!(short.window(0)[..1000].iter().all(|&v| v == 0.5));

        assert!(matches!(slice(&Tensor::zeros(&[0]), &cfg()), Err(Error::Empty(_))));
    }

    #[test]
    fn slice_batches_clip_major() {
        let audio = Tensor::new(&[2, 3000], (0..6000).map(|v| v as f64).collect()).unwrap();
        let b = slice(&audio, &cfg()).unwrap();
        assert_eq!(b.windows_per_clip(), 2);
        assert_eq!(b.len(), 4);
        assert_eq!(b.window(2)[0], 3000.0);
        assert_eq!(b.window(3)[0], 3000.0 + 1280.0);
    }

    #[test]
    fn cosine_weight_values() {
        assert_eq!(cosine_weight(5, 10), 1.0);
        assert_eq!(cosine_weight(0, 10), 1e-6);
        assert!((cosine_weight(2, 10) - 0.587_785_252_292_473_1).abs() < 1e-12);
        for t in 0..=10 {
            assert!((cosine_weight(t, 10) - cosine_weight(10 - t, 10)).abs() < 1e-12);
        }
    }

    fn random_dists(n: usize, f: usize, k: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::uniform(&[n, f, k], 1.0, &mut rng);
        for row in t.data_mut().chunks_mut(k) {
            row.iter_mut().for_each(|v| *v = v.exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        t
    }

    #[test]
    fn identical_windows_are_a_fixed_point() {
        let b = slice(&Tensor::zeros(&[16000]), &cfg()).unwrap();
        let d = [0.1, 0.2, 0.3, 0.4];
        let pw = Tensor::new(&[12, 10, 4], d.repeat(120)).unwrap();
        let s = stitch(&pw, &b, &cfg(), StitchMode::Probabilities).unwrap();
        assert_eq!(s.len(), 77);
        for g in 0..s.len() {
            for (a, e) in s.row(g).iter().zip(&d) {
                assert!((a - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_window_is_identity() {
        let b = slice(&Tensor::zeros(&[1920]), &cfg()).unwrap();
        let pw = random_dists(1, 10, 5, 3);
        let s = stitch(&pw, &b, &cfg(), StitchMode::Probabilities).unwrap();
        assert_eq!(s.len(), 10);
        for (a, e) in s.frames.data().iter().zip(pw.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn two_window_overlap_matches_hand_computation() {
        // T = 3200: windows at 0 and 1280; the second starts at global
        // frame round(1280/210) = 6, so frames 6..=9 overlap.
        let b = slice(&Tensor::zeros(&[3200]), &cfg()).unwrap();
        assert_eq!(b.len(), 2);
        let mut pw = Tensor::zeros(&[2, 10, 2]);
        for t in 0..10 {
            pw.data_mut()[t * 2] = 1.0;
            pw.data_mut()[(10 + t) * 2 + 1] = 1.0;
        }
        let s = stitch(&pw, &b, &cfg(), StitchMode::Probabilities).unwrap();
        assert_eq!(s.len(), 3200usize.div_ceil(210));
        for g in 0..s.len() {
            let wa = if g < 10 { cosine_weight(g, 10) } else { 0.0 };
            let wb = if g >= 6 { cosine_weight(g - 6, 10) } else { 0.0 };
            let want = wa / (wa + wb);
            assert!((s.row(g)[0] - want).abs() < 1e-9, "frame {g}");
        }
    }

    #[test]
    fn stitch_rejects_mismatched_shapes() {
        let b = slice(&Tensor::zeros(&[3200]), &cfg()).unwrap();
        assert!(stitch(&Tensor::zeros(&[1, 10, 3]), &b, &cfg(), StitchMode::Probabilities).is_err());
        assert!(StitchPlan::new(&[], 100, &cfg()).is_err());
    }

    #[test]
    fn tape_stitch_matches_and_differentiates() {
        let b = slice(&Tensor::zeros(&[5000]), &cfg()).unwrap();
        let plan = StitchPlan::new(&b.offsets, 5000, &cfg()).unwrap();
        let pw = random_dists(b.len() + 1, 10, 3, 9);
        for mode in [StitchMode::Probabilities, StitchMode::Logits] {
            let mut tape = Tape::new();
            let x = tape.constant(pw.clone());
            let y = tape.stitch(x, 1, &plan, mode).unwrap();
            let direct = stitch_with_plan(&pw, 1, &plan, &cfg(), mode).unwrap();
            assert_eq!(tape.value(y), &direct.frames);
            // Edge-frame coefficients are ~1e-6, so a larger step keeps rounding
            // noise well below those gradients.
            let err = grad_check(|t, v| t.stitch(v[0], 1, &plan, mode), &[pw.clone()], 1e-4).unwrap();
            assert!(err < 1e-4, "{mode:?}: {err}");
        }
    }

    proptest! {
        #[test]
        fn slicing_reads_back_the_signal(len in 1usize..9000, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform(&[len], 1.0, &mut rng);
            let b = slice(&x, &cfg()).unwrap();
            prop_assert_eq!(b.len(), window_count(len, &cfg()));
            for (i, &off) in b.offsets.iter().enumerate() {
                prop_assert_eq!(off, i * 1280);
                for t in 0..1920 {
                    let want = if off + t < len { x.data()[off + t] } else { 0.0 };
                    prop_assert_eq!(b.window(i)[t], want);
                }
            }
        }

        #[test]
        fn stitched_frames_are_convex_combinations(len in 1usize..12000, seed in 0u64..100) {
            let b = slice(&Tensor::zeros(&[len]), &cfg()).unwrap();
            let pw = random_dists(b.len(), 10, 4, seed);
            let s = stitch(&pw, &b, &cfg(), StitchMode::Probabilities).unwrap();
            let plan = StitchPlan::new(&b.offsets, len, &cfg()).unwrap();
            prop_assert!((s.len() as i64 - len.div_ceil(210) as i64).abs() <= 1);
            for g in 0..s.len() {
                prop_assert!(s.weight_mass[g] > 0.0);
                let row = s.row(g);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for c in 0..4 {
                    let srcs: Vec<f64> = plan.deposits.iter().filter(|d| d.2 == g)
                        .map(|d| pw.data()[(d.0 * 10 + d.1) * 4 + c]).collect();
                    let lo = srcs.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = srcs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(row[c] >= lo - 1e-9 && row[c] <= hi + 1e-9);
                }
            }
        }
    }
}
