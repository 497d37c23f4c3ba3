use crate::error::{Error, Result};
use crate::nn::tape::{Backward, Grads, Tape, Var};
use crate::nn::tensor::Tensor;

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var_unbiased: Vec<f64>,
}

struct NormOp {
    x: Var,
    gamma: Var,
    beta: Var,
    /// normalized input, same layout as x
    xhat: Vec<f64>,
    /// 1/sqrt(var + eps) per normalization group
    inv_std: Vec<f64>,
    /// batch statistics participate in the gradient
    batch_stats: bool,
    layout: Layout,
}

#[derive(Clone, Copy)]
enum Layout {
    /// `[B, C, L]`, normalized per channel over B and L
    Channels { batch: usize, channels: usize, len: usize },
    /// `[..., D]`, normalized per row over D
    Rows { rows: usize, width: usize },
}

impl Layout {
    /// Visit (group, element-index, affine-index) triples.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        match *self {
            Layout::Channels {
                batch,
                channels,
                len,
            } => {
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * len;
                        for l in 0..len {
                            f(c, base + l, c);
                        }
                    }
                }
            }
            Layout::Rows { rows, width } => {
                for r in 0..rows {
                    for d in 0..width {
                        f(r, r * width + d, d);
                    }
                }
            }
        }
    }

    fn groups(&self) -> usize {
        match *self {
            Layout::Channels { channels, .. } => channels,
            Layout::Rows { rows, .. } => rows,
        }
    }

    fn group_size(&self) -> usize {
        match *self {
            Layout::Channels { batch, len, .. } => batch * len,
            Layout::Rows { width, .. } => width,
        }
    }
}

impl Backward for NormOp {
    fn backward(&self, _: &Tensor, g: &[f64], tape: &Tape, grads: &mut Grads<'_>) {
        let gamma = tape.data(self.gamma);
        if let Some(buf) = grads.slot(self.gamma) {
            self.layout
                .for_each(|_, i, a| buf[a] += g[i] * self.xhat[i]);
        }
        if let Some(buf) = grads.slot(self.beta) {
            self.layout.for_each(|_, i, a| buf[a] += g[i]);
        }
        if !grads.wants(self.x) {
            return;
        }
        let groups = self.layout.groups();
        let n = self.layout.group_size() as f64;
        let buf = grads.slot(self.x).expect("wanted");
        if !self.batch_stats {
            self.layout
                .for_each(|grp, i, a| buf[i] += g[i] * gamma[a] * self.inv_std[grp]);
            return;
        }
        let mut sum_d = vec![0.0; groups];
        let mut sum_dx = vec![0.0; groups];
        self.layout.for_each(|grp, i, a| {
            let d = g[i] * gamma[a];
            sum_d[grp] += d;
            sum_dx[grp] += d * self.xhat[i];
        });
        self.layout.for_each(|grp, i, a| {
            let d = g[i] * gamma[a];
            buf[i] += self.inv_std[grp] / n * (n * d - sum_d[grp] - self.xhat[i] * sum_dx[grp]);
        });
    }
}

fn check_affine(tape: &Tape, op: &'static str, gamma: Var, beta: Var, n: usize) -> Result<()> {
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if tape.value(v).len() != n {
            return Err(Error::shape(
                op,
                format!("{name} has {} entries, expected {n}", tape.value(v).len()),
            ));
        }
    }
    Ok(())
}

impl Tape {
    /// Batch normalization of `x [B, C, L]` over the batch and length axes.
    ///
    /// Training mode normalizes with batch statistics and returns them;
    /// eval mode uses the supplied running mean/variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f64], &[f64]),
        training: bool,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("batch_norm", format!("input rank {} != 3", xs.len())));
        }
        let (batch, channels, len) = (xs[0], xs[1], xs[2]);
        check_affine(self, "batch_norm", gamma, beta, channels)?;
        if running.0.len() != channels || running.1.len() != channels {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats sized for {} channels, input has {channels}", running.0.len()),
            ));
        }
        let layout = Layout::Channels {
            batch,
            channels,
            len,
        };
        let n = batch * len;
        let xd = self.data(x);
        let (mean, var, stats) = if training {
            if n < 2 {
                return Err(Error::BatchTooSmall(n));
            }
            let mut mean = vec![0.0; channels];
            layout.for_each(|c, i, _| mean[c] += xd[i]);
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; channels];
            layout.for_each(|c, i, _| var[c] += (xd[i] - mean[c]).powi(2));
            let unbiased = var.iter().map(|v| v / (n - 1) as f64).collect();
            var.iter_mut().for_each(|v| *v /= n as f64);
            let stats = BatchStats {
                mean: mean.clone(),
                var_unbiased: unbiased,
            };
            (mean, var, Some(stats))
        } else {
            (running.0.to_vec(), running.1.to_vec(), None)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        layout.for_each(|c, i, _| xhat[i] = (xd[i] - mean[c]) * inv_std[c]);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xd.len()];
        layout.for_each(|_, i, a| out[i] = gd[a] * xhat[i] + bd[a]);
        let value = Tensor::new(&xs, out)?;
        let var_out = self.push(
            value,
            &[x, gamma, beta],
            NormOp {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: training,
                layout,
            },
        );
        Ok((var_out, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let width = *xs.last().ok_or(Error::shape("layer_norm", "rank-0 input"))?;
        check_affine(self, "layer_norm", gamma, beta, width)?;
        let rows = self.value(x).len() / width.max(1);
        let layout = Layout::Rows { rows, width };
        let xd = self.data(x);
        let mut mean = vec![0.0; rows];
        layout.for_each(|r, i, _| mean[r] += xd[i]);
        mean.iter_mut().for_each(|m| *m /= width as f64);
        let mut var = vec![0.0; rows];
        layout.for_each(|r, i, _| var[r] += (xd[i] - mean[r]).powi(2));
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v / width as f64 + eps).sqrt())
            .collect();
        let mut xhat = vec![0.0; xd.len()];
        layout.for_each(|r, i, _| xhat[i] = (xd[i] - mean[r]) * inv_std[r]);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xd.len()];
        layout.for_each(|_, i, a| out[i] = gd[a] * xhat[i] + bd[a]);
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(
            value,
            &[x, gamma, beta],
            NormOp {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
                layout,
            },
        ))
    }
}
