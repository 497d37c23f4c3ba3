//! Tensor-in, tensor-out versions of the layer primitives. Each call runs on
//! a throwaway tape with every input constant.

use crate::error::{Error, Result};
use crate::nn::layers::{BN_EPS, BN_MOMENTUM, LN_EPS};
use crate::nn::ops::conv::ConvGeometry;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv1dParams {
    pub geometry: ConvGeometry,
    /// `[out, in/groups, kernel]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

pub fn conv1d_forward(x: &Tensor, p: &Conv1dParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(p.weight.clone());
    let b = tape.constant(p.bias.clone());
    let y = tape.conv1d(xv, w, Some(b), p.geometry)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Batch norm over `[B, C, L]`. In training mode the running statistics are
/// updated with momentum 0.1.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &mut RunningStats,
    training: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(gamma.clone());
    let b = tape.constant(beta.clone());
    let (y, stats) = tape.batch_norm(xv, g, b, (&running.mean, &running.var), training, BN_EPS)?;
    if let Some(s) = stats {
        for (r, m) in running.mean.iter_mut().zip(&s.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in running.var.iter_mut().zip(&s.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
    Ok(tape.value(y).clone())
}

fn unary(x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

pub fn gelu(x: &Tensor) -> Tensor {
    unary(x, |t, v| Ok(t.gelu(v))).expect("gelu is total")
}

pub fn dropout(x: &Tensor, rate: f64, training: bool, seed: u64) -> Result<Tensor> {
    unary(x, |t, v| t.dropout(v, rate, training, seed))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(gamma.clone());
    let b = tape.constant(beta.clone());
    let y = tape.layer_norm(xv, g, b, LN_EPS)?;
    Ok(tape.value(y).clone())
}

pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.linear(xv, wv, bv)?;
    Ok(tape.value(y).clone())
}

pub fn log_softmax(x: &Tensor) -> Tensor {
    unary(x, |t, v| Ok(t.log_softmax(v))).expect("log_softmax is total")
}

pub fn softmax(x: &Tensor) -> Tensor {
    unary(x, |t, v| Ok(t.softmax(v))).expect("softmax is total")
}

/// Weights of a pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub model_dim: usize,
    pub heads: usize,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    /// `[query, key, value, output]` weights, each `[model_dim, model_dim]`
    pub weights: [Tensor; 4],
    pub biases: [Tensor; 4],
    pub dropout_rate: f64,
}

impl AttentionParams {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Record `x + W_o . attention(LN(x))` on `tape` with the given parameter
/// vars (`[gamma, beta, wq, bq, wk, bk, wv, bv, wo, bo]`).
pub fn attention_block(
    tape: &mut Tape,
    x: Var,
    vars: &[Var; 10],
    heads: usize,
    dropout: Option<(f64, u64)>,
) -> Result<Var> {
    let h = tape.layer_norm(x, vars[0], vars[1], LN_EPS)?;
    let q = tape.linear(h, vars[2], Some(vars[3]))?;
    let k = tape.linear(h, vars[4], Some(vars[5]))?;
    let v = tape.linear(h, vars[6], Some(vars[7]))?;
    let a = tape.attention(q, k, v, heads, dropout)?;
    let o = tape.linear(a, vars[8], Some(vars[9]))?;
    let o = match dropout {
        Some((rate, seed)) => tape.dropout(o, rate, true, seed.wrapping_add(1))?,
        None => o,
    };
    tape.add(x, o)
}

/// Pre-norm residual self-attention over `x [B, F, D]`.
pub fn multi_head_self_attention(
    x: &Tensor,
    p: &AttentionParams,
    training: bool,
    seed: u64,
) -> Result<Tensor> {
    p.validate()?;
    match x.shape() {
        [_, 0, _] => return Err(Error::Empty("attention over zero frames")),
        [_, _, d] if *d == p.model_dim => {}
        s => {
            return Err(Error::shape(
                "multi_head_self_attention",
                format!("input {s:?} vs model dim {}", p.model_dim),
            ))
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let tensors = [
        &p.norm_gamma,
        &p.norm_beta,
        &p.weights[0],
        &p.biases[0],
        &p.weights[1],
        &p.biases[1],
        &p.weights[2],
        &p.biases[2],
        &p.weights[3],
        &p.biases[3],
    ];
    let vars = tensors.map(|t| tape.constant(t.clone()));
    let drop = (training && p.dropout_rate > 0.0).then_some((p.dropout_rate, seed));
    let y = attention_block(&mut tape, xv, &vars, p.heads, drop)?;
    Ok(tape.value(y).clone())
}
