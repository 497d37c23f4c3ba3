//! Connectionist temporal classification loss, computed with the
//! forward-backward recursion over the blank-extended label sequence in log
//! space.

use crate::error::{Error, Result};
use crate::nn::tape::{Backward, Grads, Tape, Var};
use crate::nn::tensor::Tensor;

/// Class ids of a target sequence (no blanks).
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CtcTarget {
    pub class_ids: Vec<usize>,
}

impl CtcTarget {
    pub fn new(class_ids: Vec<usize>) -> Self {
        Self { class_ids }
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// Adjacent equal labels, each of which needs a separating blank.
    pub fn repeats(&self) -> usize {
        self.class_ids.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Fewest frames any alignment of this target needs.
    pub fn min_frames(&self) -> usize {
        self.len() + self.repeats()
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Loss and gradient with respect to `log_probs [T, C+1]`; blank is the last
/// column.
pub fn ctc_loss(log_probs: &Tensor, target: &CtcTarget) -> Result<(f64, Tensor)> {
    let [frames, width] = log_probs.shape()[..] else {
        return Err(Error::shape(
            "ctc_loss",
            format!("log_probs must be [T, C+1], got {:?}", log_probs.shape()),
        ));
    };
    if width < 2 {
        return Err(Error::shape("ctc_loss", "need at least one class plus blank"));
    }
    let blank = width - 1;
    if let Some(&bad) = target.class_ids.iter().find(|&&c| c >= blank) {
        return Err(Error::InvalidArgument(format!(
            "target class {bad} outside 0..{blank} (blank is {blank})"
        )));
    }
    if frames < target.min_frames() || frames == 0 {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            repeats: target.repeats(),
            frames,
        });
    }
    let lp = log_probs.data();
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.class_ids.iter().flat_map(|&c| [c, blank]))
        .collect();
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    // Can state s be entered from s-2 (skipping a blank)?
    let skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2])
        .collect();

    // alpha[t][s]: log prob of emitting frames 0..=t and being in s at t.
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp[blank];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip[s] {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp[t * width + ext[s]] };
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let log_p = if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if !log_p.is_finite() {
        return Err(Error::NonFinite("CTC total probability".into()));
    }

    // beta[t][s]: log prob of emitting frames t+1.. given state s at t.
    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(frames - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let emit = |s2: usize| beta[next + s2] + lp[(t + 1) * width + ext[s2]];
            let mut b = emit(s);
            if s + 1 < s_len {
                b = log_add(b, emit(s + 1));
            }
            if s + 2 < s_len && skip[s + 2] {
                b = log_add(b, emit(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut grad = vec![0.0; frames * width];
    for t in 0..frames {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > ninf {
                grad[t * width + ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, Tensor::new(&[frames, width], grad)?))
}

struct CtcOp {
    x: Var,
    grad: Tensor,
}

impl Backward for CtcOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        if let Some(buf) = grads.slot(self.x) {
            for (b, d) in buf.iter_mut().zip(self.grad.data()) {
                *b += g[0] * d;
            }
        }
    }
}

impl Tape {
    /// Scalar CTC loss of `log_probs [T, C+1]` against `target`.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &CtcTarget) -> Result<Var> {
        let (loss, grad) = ctc_loss(self.value(log_probs), target)?;
        Ok(self.push(Tensor::scalar(loss), &[log_probs], CtcOp { x: log_probs, grad }))
    }
}
