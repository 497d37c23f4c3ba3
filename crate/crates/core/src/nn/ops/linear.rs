use crate::error::{Error, Result};
use crate::nn::linalg::{gemm, matmul, Mat};
use crate::nn::tape::{Backward, Grads, Tape, Var};
use crate::nn::tensor::Tensor;

struct MatmulOp {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
}
impl Backward for MatmulOp {
    fn backward(&self, _: &Tensor, g: &[f64], tape: &Tape, grads: &mut Grads<'_>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let gm = Mat::new(g, m, n);
        if grads.wants(self.a) {
            let bm = Mat::new(tape.data(self.b), k, n);
            let buf = grads.slot(self.a).expect("wanted");
            gemm(gm, bm.t(), buf, 1.0);
        }
        if grads.wants(self.b) {
            let am = Mat::new(tape.data(self.a), m, k);
            let buf = grads.slot(self.b).expect("wanted");
            gemm(am.t(), gm, buf, 1.0);
        }
    }
}

struct LinearOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}
impl Backward for LinearOp {
    fn backward(&self, _: &Tensor, g: &[f64], tape: &Tape, grads: &mut Grads<'_>) {
        let gm = Mat::new(g, self.rows, self.fan_out);
        if grads.wants(self.x) {
            let wm = Mat::new(tape.data(self.w), self.fan_out, self.fan_in);
            let buf = grads.slot(self.x).expect("wanted");
            gemm(gm, wm, buf, 1.0);
        }
        if grads.wants(self.w) {
            let xm = Mat::new(tape.data(self.x), self.rows, self.fan_in);
            let buf = grads.slot(self.w).expect("wanted");
            gemm(gm.t(), xm, buf, 1.0);
        }
        if let Some(b) = self.b {
            if let Some(buf) = grads.slot(b) {
                for row in g.chunks(self.fan_out) {
                    for (acc, v) in buf.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul(
            Mat::new(self.data(a), m, k),
            Mat::new(self.data(b), k, n),
        );
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(out, &[a, b], MatmulOp { a, b, m, k, n }))
    }

    /// `x @ w^T + b` applied along the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let fan_in = *xs.last().ok_or(Error::shape("linear", "rank-0 input"))?;
        if ws.len() != 2 || ws[1] != fan_in {
            return Err(Error::shape(
                "linear",
                format!("input last dim {fan_in} vs weight {ws:?}"),
            ));
        }
        let fan_out = ws[0];
        if let Some(b) = b {
            if self.value(b).len() != fan_out {
                return Err(Error::shape(
                    "linear",
                    format!("bias length {} vs {fan_out} outputs", self.value(b).len()),
                ));
            }
        }
        let rows = self.value(x).len() / fan_in.max(1);
        let mut data = vec![0.0; rows * fan_out];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in data.chunks_mut(fan_out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            Mat::new(self.data(x), rows, fan_in),
            Mat::new(self.data(w), fan_out, fan_in).t(),
            &mut data,
            1.0,
        );
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = fan_out;
        let out = Tensor::new(&shape, data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            &inputs,
            LinearOp {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
        ))
    }
}
