//! Deterministic synthetic utterances: each phoneme class is a fixed set of
//! sinusoid partials plus a little noise, so a small model can learn to
//! separate classes quickly.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::wav::AudioClip;
use crate::error::{Error, Result};
use crate::window::SAMPLE_RATE;

pub const MIN_PHONEME_MS: f64 = 30.0;
pub const MAX_PHONEME_MS: f64 = 300.0;
pub const CROSSFADE_MS: f64 = 10.0;
/// Lowest partial and spacing of the partial grid, in Hz.
pub const GRID_BASE_HZ: f64 = 250.0;
pub const GRID_STEP_HZ: f64 = 300.0;
/// Grid slots below the Nyquist frequency.
pub const GRID_SLOTS: usize = 26;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partial {
    pub freq_hz: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub partials: Vec<Partial>,
    /// Standard deviation of added white noise.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeBook {
    pub recipes: Vec<Recipe>,
}

impl RecipeBook {
    /// Two partials per class on a 300 Hz grid. Up to 13 classes each own
    /// two grid slots outright (slots `c` and `c + 13`); beyond that classes
    /// take distinct slot pairs.
    pub fn grid(n_classes: usize) -> Result<Self> {
        let half = GRID_SLOTS / 2;
        let pairs: Vec<(usize, usize)> = if n_classes <= half {
            (0..n_classes).map(|c| (c, c + half)).collect()
        } else {
            let all: Vec<(usize, usize)> = (0..GRID_SLOTS)
                .flat_map(|i| (i + 2..GRID_SLOTS).map(move |j| (i, j)))
                .collect();
            if n_classes > all.len() {
                return Err(Error::InvalidArgument(format!("at most {} synthetic classes", all.len())));
            }
            all.into_iter().take(n_classes).collect()
        };
        let hz = |slot: usize| GRID_BASE_HZ + GRID_STEP_HZ * slot as f64;
        Ok(Self {
            recipes: pairs
                .into_iter()
                .map(|(a, b)| Recipe {
                    partials: vec![
                        Partial { freq_hz: hz(a), amplitude: 0.3 },
                        Partial { freq_hz: hz(b), amplitude: 0.2 },
                    ],
                    noise: 0.01,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.recipes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recipes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub class_ids: Vec<usize>,
    pub durations_ms: Vec<f64>,
    pub lead_silence_ms: f64,
    pub trail_silence_ms: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub clip: AudioClip,
    pub class_ids: Vec<usize>,
    /// Sample span `[start, end)` of each phoneme.
    pub boundaries: Vec<(usize, usize)>,
}

pub fn ms_to_samples(ms: f64) -> usize {
    (ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
}

impl SynthUtterance {
    /// Class per frame of `hop` samples, judged at the frame centre; frames
    /// outside every phoneme get `blank`.
    pub fn frame_labels(&self, frames: usize, hop: usize, blank: usize) -> Vec<usize> {
        (0..frames)
            .map(|g| {
                let centre = g * hop + hop / 2;
                self.boundaries
                    .iter()
                    .zip(&self.class_ids)
                    .find(|((s, e), _)| (*s..*e).contains(&centre))
                    .map_or(blank, |(_, &c)| c)
            })
            .collect()
    }
}

/// Render a spec. Each phoneme sounds its recipe with random phases and a
/// 10 ms raised-cosine fade at both ends, so neighbours cross through
/// silence at every boundary and the clip length is exactly the sum of
/// durations and silences.
pub fn synth_utterance(spec: &SynthSpec, book: &RecipeBook) -> Result<SynthUtterance> {
    if spec.class_ids.len() != spec.durations_ms.len() {
        return Err(Error::InvalidArgument(format!(
            "{} classes but {} durations",
            spec.class_ids.len(),
            spec.durations_ms.len()
        )));
    }
    if let Some(d) = spec.durations_ms.iter().find(|d| !(MIN_PHONEME_MS..=MAX_PHONEME_MS).contains(*d)) {
        return Err(Error::InvalidArgument(format!(
            "phoneme duration {d} ms outside [{MIN_PHONEME_MS}, {MAX_PHONEME_MS}]"
        )));
    }
    if let Some(c) = spec.class_ids.iter().find(|&&c| c >= book.len()) {
        return Err(Error::InvalidArgument(format!("class {c} has no recipe")));
    }
    if spec.lead_silence_ms < 0.0 || spec.trail_silence_ms < 0.0 {
        return Err(Error::InvalidArgument("negative silence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let sr = SAMPLE_RATE as f64;
    let fade = ms_to_samples(CROSSFADE_MS);
    let mut samples = vec![0.0; ms_to_samples(spec.lead_silence_ms)];
    let mut boundaries = Vec::with_capacity(spec.class_ids.len());
    for (&c, &d) in spec.class_ids.iter().zip(&spec.durations_ms) {
        let n = ms_to_samples(d);
        let recipe = &book.recipes[c];
        let phases: Vec<f64> = recipe.partials.iter().map(|_| rng.random::<f64>() * 2.0 * PI).collect();
        let start = samples.len();
        for i in 0..n {
            let t = i as f64 / sr;
            let mut v: f64 = recipe
                .partials
                .iter()
                .zip(&phases)
                .map(|(p, ph)| p.amplitude * (2.0 * PI * p.freq_hz * t + ph).sin())
                .sum();
            v += recipe.noise * noise.sample(&mut rng);
            let edge = i.min(n - 1 - i);
            if edge < fade {
                v *= 0.5 - 0.5 * (PI * (edge as f64 + 0.5) / fade as f64).cos();
            }
            samples.push(v.clamp(-1.0, 1.0));
        }
        boundaries.push((start, samples.len()));
    }
    samples.extend(std::iter::repeat_n(0.0, ms_to_samples(spec.trail_silence_ms)));
    Ok(SynthUtterance {
        clip: AudioClip::new(samples, format!("synth-{}", spec.seed)),
        class_ids: spec.class_ids.clone(),
        boundaries,
    })
}

/// Draw a spec: phoneme count from a rounded normal (at least 1), durations
/// from a normal clamped to the allowed range, silences from 50 to 150 ms.
pub fn random_spec<R: Rng + ?Sized>(
    class_ids: Vec<usize>,
    duration_mean_ms: f64,
    duration_std_ms: f64,
    rng: &mut R,
) -> SynthSpec {
    let dur = Normal::new(duration_mean_ms, duration_std_ms.max(1e-9)).expect("finite duration stats");
    SynthSpec {
        durations_ms: class_ids
            .iter()
            .map(|_| dur.sample(rng).clamp(MIN_PHONEME_MS, MAX_PHONEME_MS).round())
            .collect(),
        class_ids,
        lead_silence_ms: rng.random_range(50.0..=150.0f64).round(),
        trail_silence_ms: rng.random_range(50.0..=150.0f64).round(),
        seed: rng.random(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: Vec<usize>, ms: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            durations_ms: vec![ms; classes.len()],
            class_ids: classes,
            lead_silence_ms: 100.0,
            trail_silence_ms: 60.0,
            seed,
        }
    }

    /// Power at `freq` over `x` by the Goertzel recurrence.
    fn goertzel(x: &[f64], freq: f64) -> f64 {
        let w = 2.0 * PI * freq / SAMPLE_RATE as f64;
        let c = 2.0 * w.cos();
        let (mut s1, mut s2) = (0.0, 0.0);
        for &v in x {
            let s = v + c * s1 - s2;
            s2 = s1;
            s1 = s;
        }
        s1 * s1 + s2 * s2 - c * s1 * s2
    }

    #[test]
    fn length_is_duration_arithmetic() {
        let book = RecipeBook::grid(8).unwrap();
        let u = synth_utterance(&spec(vec![0, 1, 2, 3, 4, 5], 80.0, 1), &book).unwrap();
        assert_eq!(u.clip.len(), ms_to_samples(6.0 * 80.0 + 160.0));
        assert_eq!(u.boundaries[0], (1600, 1600 + 1280));
        assert_eq!(u.boundaries[5].1, u.clip.len() - 960);
    }

    #[test]
    fn seeded_and_empty() {
        let book = RecipeBook::grid(8).unwrap();
        let s = spec(vec![3, 1], 120.0, 9);
        assert_eq!(synth_utterance(&s, &book).unwrap(), synth_utterance(&s, &book).unwrap());
        let empty = synth_utterance(&spec(vec![], 80.0, 2), &book).unwrap();
        assert_eq!(empty.clip.len(), ms_to_samples(160.0));
        assert!(empty.clip.samples.iter().all(|&v| v == 0.0));
        assert!(synth_utterance(&spec(vec![0], 20.0, 1), &book).is_err());
        assert!(synth_utterance(&spec(vec![8], 80.0, 1), &book).is_err());
    }

    #[test]
    fn recipes_are_distinct() {
        for n in [8, 13, 65] {
            let book = RecipeBook::grid(n).unwrap();
            for i in 0..n {
                for j in i + 1..n {
                    assert_ne!(book.recipes[i], book.recipes[j]);
                }
            }
            let top = book.recipes.iter().flat_map(|r| &r.partials).map(|p| p.freq_hz).fold(0.0, f64::max);
            assert!(top < 8000.0);
        }
    }

    #[test]
    fn phoneme_energy_sits_on_its_partials() {
        let book = RecipeBook::grid(8).unwrap();
        let u = synth_utterance(&spec(vec![0, 5, 2, 7, 1, 6, 3, 4], 80.0, 3), &book).unwrap();
        let fade = ms_to_samples(CROSSFADE_MS);
        for (&(s, e), &c) in u.boundaries.iter().zip(&u.class_ids) {
            let x = &u.clip.samples[s + fade..e - fade];
            let on: f64 = book.recipes[c].partials.iter().map(|p| goertzel(x, p.freq_hz)).sum::<f64>() / 2.0;
            for (k, r) in book.recipes.iter().enumerate().filter(|(k, _)| *k != c) {
                let off: f64 = r.partials.iter().map(|p| goertzel(x, p.freq_hz)).sum::<f64>() / 2.0;
                assert!(on > 5.0 * off, "class {c} vs {k}: {on} {off}");
            }
        }
    }

    #[test]
    fn frame_labels_follow_boundaries() {
        let book = RecipeBook::grid(8).unwrap();
        let u = synth_utterance(&spec(vec![2, 4], 105.0, 0), &book).unwrap();
        let labels = u.frame_labels(u.clip.len() / 210, 210, 8);
        assert_eq!(labels[0], 8);
        assert_eq!(labels[8], 2);
        assert_eq!(labels[17], 4);
        assert_eq!(*labels.last().unwrap(), 8);
    }
}
