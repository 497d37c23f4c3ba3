//! Vector-quantizer codebook maintained by exponential moving averages.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

pub const CODEBOOK_SIZE: usize = 256;
pub const CODE_DIM: usize = 256;
pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_LAPLACE_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookState {
    /// `[K, D]` code vectors.
    pub entries: Tensor,
    /// `[K]` smoothed running assignment counts.
    pub ema_cluster_size: Tensor,
    /// `[K, D]` running sums of assigned features.
    pub ema_embed_sum: Tensor,
    pub decay: f64,
    pub laplace_epsilon: f64,
}

impl CodebookState {
    /// Codebook whose running statistics are consistent with `entries`
    /// (unit count per entry).
    pub fn new(entries: Tensor, decay: f64, laplace_epsilon: f64) -> Result<Self> {
        let [k, _] = entries.shape()[..] else {
            return Err(Error::shape("codebook", format!("entries must be [K, D], got {:?}", entries.shape())));
        };
        if k == 0 {
            return Err(Error::Empty("codebook with zero entries"));
        }
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("decay {decay} outside [0, 1]")));
        }
        if laplace_epsilon <= 0.0 {
            return Err(Error::InvalidArgument("laplace epsilon must be positive".into()));
        }
        if !entries.is_finite() {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        Ok(Self {
            ema_cluster_size: Tensor::full(&[k], 1.0),
            ema_embed_sum: entries.clone(),
            entries,
            decay,
            laplace_epsilon,
        })
    }

    /// Entries copied from `k` distinct rows of `features` (with replacement
    /// when there are fewer rows than entries).
    pub fn from_features<R: Rng + ?Sized>(features: &Tensor, k: usize, decay: f64, laplace_epsilon: f64, rng: &mut R) -> Result<Self> {
        let [m, d] = features.shape()[..] else {
            return Err(Error::shape("codebook", format!("features must be [M, D], got {:?}", features.shape())));
        };
        if m == 0 {
            return Err(Error::Empty("codebook initialised from zero features"));
        }
        let rows: Vec<usize> = if m >= k {
            sample(rng, m, k).into_vec()
        } else {
            (0..k).map(|_| rng.random_range(0..m)).collect()
        };
        let mut data = Vec::with_capacity(k * d);
        for r in rows {
            data.extend_from_slice(features.row(r));
        }
        Self::new(Tensor::new(&[k, d], data)?, decay, laplace_epsilon)
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        self.entries.row(k)
    }

    /// `[M, D]` rows of the entries named by `codes`.
    pub fn lookup(&self, codes: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(codes.len() * self.dim());
        for &c in codes {
            if c >= self.size() {
                return Err(Error::InvalidArgument(format!("code {c} outside codebook of {}", self.size())));
            }
            data.extend_from_slice(self.entry(c));
        }
        Tensor::new(&[codes.len(), self.dim()], data)
    }

    /// Mean pairwise cosine similarity over distinct entries.
    pub fn mean_pairwise_cosine(&self) -> f64 {
        let k = self.size();
        if k < 2 {
            return 0.0;
        }
        let unit: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let r = self.entry(i);
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        let mut total = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                total += unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        total / (k * (k - 1) / 2) as f64
    }
}

fn check_features(features: &Tensor, cb: &CodebookState) -> Result<usize> {
    match features.shape() {
        [m, d] if *d == cb.dim() => Ok(*m),
        s => Err(Error::shape(
            "vq",
            format!("features {s:?} do not match codebook dim {}", cb.dim()),
        )),
    }
}

/// Index of the nearest entry for each feature row; ties go to the lowest
/// index.
pub fn vq_assign(features: &Tensor, cb: &CodebookState) -> Result<Vec<usize>> {
    check_features(features, cb)?;
    Ok(features
        .data()
        .chunks(cb.dim())
        .map(|f| {
            let mut best = (0, f64::INFINITY);
            for k in 0..cb.size() {
                let d: f64 = f.iter().zip(cb.entry(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect())
}

/// One EMA step: decay the running counts and sums toward this batch's
/// assignment statistics, Laplace-smooth the counts and refresh the entries.
pub fn vq_ema_update(cb: &CodebookState, features: &Tensor, codes: &[usize]) -> Result<CodebookState> {
    let m = check_features(features, cb)?;
    if codes.len() != m {
        return Err(Error::shape("vq_ema_update", format!("{} codes for {m} features", codes.len())));
    }
    if let Some(&c) = codes.iter().find(|&&c| c >= cb.size()) {
        return Err(Error::InvalidArgument(format!("code {c} outside codebook of {}", cb.size())));
    }
    if cb.decay == 1.0 {
        return Ok(cb.clone());
    }
    let (k, d) = (cb.size(), cb.dim());
    let mut counts = vec![0.0; k];
    let mut sums = vec![0.0; k * d];
    for (f, &c) in features.data().chunks(d).zip(codes) {
        counts[c] += 1.0;
        for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(f) {
            *s += v;
        }
    }
    let decay = cb.decay;
    let size: Vec<f64> = cb
        .ema_cluster_size
        .data()
        .iter()
        .zip(&counts)
        .map(|(e, n)| decay * e + (1.0 - decay) * n)
        .collect();
    let embed: Vec<f64> = cb
        .ema_embed_sum
        .data()
        .iter()
        .zip(&sums)
        .map(|(e, s)| decay * e + (1.0 - decay) * s)
        .collect();
    let total: f64 = size.iter().sum();
    let eps = cb.laplace_epsilon;
    let smoothed: Vec<f64> = size.iter().map(|n| (n + eps) / (total + k as f64 * eps) * total).collect();
    let entries: Vec<f64> = embed.iter().enumerate().map(|(i, s)| s / smoothed[i / d]).collect();
    let out = CodebookState {
        entries: Tensor::new(&[k, d], entries)?,
        ema_cluster_size: Tensor::new(&[k], smoothed)?,
        ema_embed_sum: Tensor::new(&[k, d], embed)?,
        decay,
        laplace_epsilon: eps,
    };
    if !out.entries.is_finite() {
        return Err(Error::NonFinite("codebook entries after EMA update".into()));
    }
    Ok(out)
}

/// `exp` of the entropy of a probability vector.
pub fn perplexity(probs: &[f64]) -> f64 {
    let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
    h.exp()
}

/// Perplexity of the empirical code-usage distribution.
pub fn code_perplexity(codes: &[usize], k: usize) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    let mut usage = vec![0.0; k];
    for &c in codes {
        usage[c] += 1.0 / codes.len() as f64;
    }
    perplexity(&usage)
}
