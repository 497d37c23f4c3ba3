use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ops::activation::softmax_into;
use crate::nn::tape::{Backward, Grads, Tape, Var};
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Dims {
    batch: usize,
    frames: usize,
    dim: usize,
    heads: usize,
}

impl Dims {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
    fn at(&self, b: usize, f: usize, h: usize, d: usize) -> usize {
        (b * self.frames + f) * self.dim + h * self.head_dim() + d
    }
    fn p_at(&self, b: usize, h: usize, i: usize, j: usize) -> usize {
        ((b * self.heads + h) * self.frames + i) * self.frames + j
    }
}

/// Row-stochastic attention weights `[B, H, F, F]` for queries/keys laid out
/// as `[B, F, D]` with `D` split evenly across `heads`.
pub fn attention_probs(
    q: &[f64],
    k: &[f64],
    batch: usize,
    frames: usize,
    dim: usize,
    heads: usize,
) -> Vec<f64> {
    let dims = Dims {
        batch,
        frames,
        dim,
        heads,
    };
    probs_impl(q, k, &dims)
}

fn probs_impl(q: &[f64], k: &[f64], dims: &Dims) -> Vec<f64> {
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let f = dims.frames;
    let mut probs = vec![0.0; dims.batch * dims.heads * f * f];
    let mut scores = vec![0.0; f];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            for i in 0..f {
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for d in 0..dh {
                        acc += q[dims.at(b, i, h, d)] * k[dims.at(b, j, h, d)];
                    }
                    *s = acc * scale;
                }
                let start = dims.p_at(b, h, i, 0);
                softmax_into(&scores, &mut probs[start..start + f]);
            }
        }
    }
    probs
}

struct AttentionOp {
    q: Var,
    k: Var,
    v: Var,
    dims: Dims,
    probs: Vec<f64>,
    /// dropout multipliers on the weights, absent when dropout is inactive
    mask: Option<Vec<f64>>,
}

impl Backward for AttentionOp {
    fn backward(&self, _: &Tensor, g: &[f64], tape: &Tape, grads: &mut Grads<'_>) {
        let dims = self.dims;
        let (f, dh) = (dims.frames, dims.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tape.data(self.q), tape.data(self.k), tape.data(self.v));
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; f];
        for b in 0..dims.batch {
            for h in 0..dims.heads {
                for i in 0..f {
                    let p0 = dims.p_at(b, h, i, 0);
                    let p = &self.probs[p0..p0 + f];
                    for j in 0..f {
                        let m = self.mask.as_ref().map_or(1.0, |mk| mk[p0 + j]);
                        let mut acc = 0.0;
                        for d in 0..dh {
                            let go = g[dims.at(b, i, h, d)];
                            acc += go * vd[dims.at(b, j, h, d)];
                            dv[dims.at(b, j, h, d)] += p[j] * m * go;
                        }
                        dp[j] = acc * m;
                    }
                    let dot: f64 = dp.iter().zip(p).map(|(a, c)| a * c).sum();
                    for j in 0..f {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        for d in 0..dh {
                            dq[dims.at(b, i, h, d)] += ds * kd[dims.at(b, j, h, d)];
                            dk[dims.at(b, j, h, d)] += ds * qd[dims.at(b, i, h, d)];
                        }
                    }
                }
            }
        }
        grads.accumulate(self.q, &dq);
        grads.accumulate(self.k, &dk);
        grads.accumulate(self.v, &dv);
    }
}

impl Tape {
    /// Scaled dot-product attention over the frame axis of `[B, F, D]`
    /// queries/keys/values with `heads` heads. Optional dropout is applied to
    /// the attention weights.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        dropout: Option<(f64, u64)>,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        let [batch, frames, dim] = shape[..] else {
            return Err(Error::shape(
                "attention",
                format!("expected [B, F, D], got {shape:?}"),
            ));
        };
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?} must agree",
                    shape,
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        if frames == 0 {
            return Err(Error::Empty("attention over zero frames"));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("model dim {dim} not divisible by {heads} heads"),
            ));
        }
        let dims = Dims {
            batch,
            frames,
            dim,
            heads,
        };
        let probs = probs_impl(self.data(q), self.data(k), &dims);
        let mask = match dropout {
            Some((rate, seed)) if rate > 0.0 => {
                if rate >= 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "dropout rate {rate} outside [0, 1)"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = 1.0 / (1.0 - rate);
                Some(
                    (0..probs.len())
                        .map(|_| {
                            if rng.random::<f64>() < rate {
                                0.0
                            } else {
                                keep
                            }
                        })
                        .collect::<Vec<f64>>(),
                )
            }
            _ => None,
        };
        let vd = self.data(v);
        let dh = dims.head_dim();
        let mut out = vec![0.0; vd.len()];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..frames {
                    let p0 = dims.p_at(b, h, i, 0);
                    for j in 0..frames {
                        let w = probs[p0 + j] * mask.as_ref().map_or(1.0, |m| m[p0 + j]);
                        if w == 0.0 {
                            continue;
                        }
                        for d in 0..dh {
                            out[dims.at(b, i, h, d)] += w * vd[dims.at(b, j, h, d)];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            &[q, k, v],
            AttentionOp {
                q,
                k,
                v,
                dims,
                probs,
                mask,
            },
        ))
    }
}
