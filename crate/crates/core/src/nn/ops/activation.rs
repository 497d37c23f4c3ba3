use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tape::{Backward, Grads, Tape, Var};
use crate::nn::tensor::Tensor;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

pub fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    for (o, x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

struct GeluOp(Var);
impl Backward for GeluOp {
    fn backward(&self, _: &Tensor, g: &[f64], tape: &Tape, grads: &mut Grads<'_>) {
        let x = tape.data(self.0);
        if let Some(buf) = grads.slot(self.0) {
            for i in 0..buf.len() {
                buf[i] += g[i] * gelu_grad_scalar(x[i]);
            }
        }
    }
}

struct SigmoidOp(Var);
impl Backward for SigmoidOp {
    fn backward(&self, out: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        let y = out.data();
        if let Some(buf) = grads.slot(self.0) {
            for i in 0..buf.len() {
                buf[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        }
    }
}

struct SoftmaxOp {
    x: Var,
    width: usize,
}
impl Backward for SoftmaxOp {
    fn backward(&self, out: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        let w = self.width;
        if let Some(buf) = grads.slot(self.x) {
            for ((b, y), gr) in buf
                .chunks_mut(w)
                .zip(out.data().chunks(w))
                .zip(g.chunks(w))
            {
                let dot: f64 = y.iter().zip(gr).map(|(a, c)| a * c).sum();
                for j in 0..w {
                    b[j] += y[j] * (gr[j] - dot);
                }
            }
        }
    }
}

struct LogSoftmaxOp {
    x: Var,
    width: usize,
}
impl Backward for LogSoftmaxOp {
    fn backward(&self, out: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        let w = self.width;
        if let Some(buf) = grads.slot(self.x) {
            for ((b, y), gr) in buf
                .chunks_mut(w)
                .zip(out.data().chunks(w))
                .zip(g.chunks(w))
            {
                let s: f64 = gr.iter().sum();
                for j in 0..w {
                    b[j] += gr[j] - y[j].exp() * s;
                }
            }
        }
    }
}

struct MaskOp {
    x: Var,
    mask: Vec<f64>,
}
impl Backward for MaskOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        if let Some(buf) = grads.slot(self.x) {
            for i in 0..buf.len() {
                buf[i] += g[i] * self.mask[i];
            }
        }
    }
}

impl Tape {
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(out, &[x], GeluOp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let out = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(out, &[x], SigmoidOp(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let width = *self.shape(x).last().unwrap_or(&1);
        let mut data = vec![0.0; self.value(x).len()];
        for (o, r) in data.chunks_mut(width).zip(self.data(x).chunks(width)) {
            softmax_into(r, o);
        }
        let out = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(out, &[x], SoftmaxOp { x, width })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let width = *self.shape(x).last().unwrap_or(&1);
        let mut data = vec![0.0; self.value(x).len()];
        for (o, r) in data.chunks_mut(width).zip(self.data(x).chunks(width)) {
            log_softmax_into(r, o);
        }
        let out = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(out, &[x], LogSoftmaxOp { x, width })
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    /// The keep mask is a pure function of `seed`.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let out = Tensor::new(self.shape(x), data)?;
        Ok(self.push(out, &[x], MaskOp { x, mask }))
    }
}
