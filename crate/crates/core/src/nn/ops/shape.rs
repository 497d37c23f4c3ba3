use crate::error::{Error, Result};
use crate::nn::tape::{Backward, Grads, Tape, Var};
use crate::nn::tensor::Tensor;

fn rank3(tape: &Tape, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(Error::shape(op, format!("expected rank 3, got {s:?}"))),
    }
}

struct Transpose12Op {
    x: Var,
    dims: (usize, usize, usize),
}
impl Backward for Transpose12Op {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        let (b, m, n) = self.dims;
        if let Some(buf) = grads.slot(self.x) {
            for bi in 0..b {
                for i in 0..m {
                    for j in 0..n {
                        buf[(bi * m + i) * n + j] += g[(bi * n + j) * m + i];
                    }
                }
            }
        }
    }
}

struct MeanLastOp {
    x: Var,
    len: usize,
}
impl Backward for MeanLastOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        let inv = 1.0 / self.len as f64;
        if let Some(buf) = grads.slot(self.x) {
            for (chunk, gv) in buf.chunks_mut(self.len).zip(g) {
                for v in chunk {
                    *v += gv * inv;
                }
            }
        }
    }
}

struct MulChannelOp {
    x: Var,
    gate: Var,
    len: usize,
}
impl Backward for MulChannelOp {
    fn backward(&self, _: &Tensor, g: &[f64], tape: &Tape, grads: &mut Grads<'_>) {
        let (xd, gd) = (tape.data(self.x), tape.data(self.gate));
        let l = self.len;
        if let Some(buf) = grads.slot(self.x) {
            for (i, gate) in gd.iter().enumerate() {
                for j in 0..l {
                    buf[i * l + j] += g[i * l + j] * gate;
                }
            }
        }
        if let Some(buf) = grads.slot(self.gate) {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += (0..l).map(|j| g[i * l + j] * xd[i * l + j]).sum::<f64>();
            }
        }
    }
}

/// Maps every output channel of a grouped concat to (source, source channel).
struct ConcatGroupedOp {
    a: Var,
    b: Var,
    map: Vec<(bool, usize)>,
    batch: usize,
    ca: usize,
    cb: usize,
    len: usize,
}
impl Backward for ConcatGroupedOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        let c_out = self.ca + self.cb;
        for (from_a, var, cs) in [(true, self.a, self.ca), (false, self.b, self.cb)] {
            if let Some(buf) = grads.slot(var) {
                for bi in 0..self.batch {
                    for (oc, &(src_a, sc)) in self.map.iter().enumerate() {
                        if src_a != from_a {
                            continue;
                        }
                        let dst = &mut buf[(bi * cs + sc) * self.len..][..self.len];
                        let src = &g[(bi * c_out + oc) * self.len..][..self.len];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

struct GatherRowsOp {
    x: Var,
    idx: Vec<usize>,
    width: usize,
}
impl Backward for GatherRowsOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        let w = self.width;
        if let Some(buf) = grads.slot(self.x) {
            for (k, &r) in self.idx.iter().enumerate() {
                for j in 0..w {
                    buf[r * w + j] += g[k * w + j];
                }
            }
        }
    }
}

struct SliceFirstOp {
    x: Var,
    offset: usize,
}
impl Backward for SliceFirstOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        if let Some(buf) = grads.slot(self.x) {
            for (b, v) in buf[self.offset..].iter_mut().zip(g) {
                *b += v;
            }
        }
    }
}

struct ReplaceRowsOp {
    x: Var,
    row: Var,
    mask: Vec<bool>,
    width: usize,
}
impl Backward for ReplaceRowsOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        let w = self.width;
        if let Some(buf) = grads.slot(self.x) {
            for (r, &m) in self.mask.iter().enumerate() {
                if !m {
                    for j in 0..w {
                        buf[r * w + j] += g[r * w + j];
                    }
                }
            }
        }
        if let Some(buf) = grads.slot(self.row) {
            for (r, &m) in self.mask.iter().enumerate() {
                if m {
                    for j in 0..w {
                        buf[j] += g[r * w + j];
                    }
                }
            }
        }
    }
}

struct PickOp {
    x: Var,
    cols: Vec<usize>,
    width: usize,
}
impl Backward for PickOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        if let Some(buf) = grads.slot(self.x) {
            for (r, &c) in self.cols.iter().enumerate() {
                buf[r * self.width + c] += g[r];
            }
        }
    }
}

struct TakeColumnsOp {
    x: Var,
    cols: Vec<usize>,
    per_row: usize,
    width: usize,
}
impl Backward for TakeColumnsOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        if let Some(buf) = grads.slot(self.x) {
            for (i, &c) in self.cols.iter().enumerate() {
                buf[(i / self.per_row) * self.width + c] += g[i];
            }
        }
    }
}

struct NormalizeRowsOp {
    x: Var,
    width: usize,
    norms: Vec<f64>,
}
impl Backward for NormalizeRowsOp {
    fn backward(&self, out: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        let w = self.width;
        if let Some(buf) = grads.slot(self.x) {
            for (r, &n) in self.norms.iter().enumerate() {
                let y = &out.data()[r * w..][..w];
                let gr = &g[r * w..][..w];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..w {
                    buf[r * w + j] += (gr[j] - y[j] * dot) / n;
                }
            }
        }
    }
}

impl Tape {
    /// `[B, M, N] -> [B, N, M]`.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let (b, m, n) = rank3(self, "transpose12", x)?;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for i in 0..m {
                for j in 0..n {
                    out[(bi * n + j) * m + i] = xd[(bi * m + i) * n + j];
                }
            }
        }
        let value = Tensor::new(&[b, n, m], out)?;
        Ok(self.push(value, &[x], Transpose12Op { x, dims: (b, m, n) }))
    }

    /// Average over the last axis: `[B, C, L] -> [B, C]`.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let (b, c, l) = rank3(self, "mean_last", x)?;
        if l == 0 {
            return Err(Error::Empty("mean_last"));
        }
        let out: Vec<f64> = self
            .data(x)
            .chunks(l)
            .map(|ch| ch.iter().sum::<f64>() / l as f64)
            .collect();
        let value = Tensor::new(&[b, c], out)?;
        Ok(self.push(value, &[x], MeanLastOp { x, len: l }))
    }

    /// Scale every channel of `x [B, C, L]` by `gate [B, C]`.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (b, c, l) = rank3(self, "mul_channel", x)?;
        if self.shape(gate) != [b, c] {
            return Err(Error::shape(
                "mul_channel",
                format!("gate {:?} for input [{b}, {c}, {l}]", self.shape(gate)),
            ));
        }
        let gd = self.data(gate);
        let out: Vec<f64> = self
            .data(x)
            .chunks(l)
            .zip(gd)
            .flat_map(|(ch, s)| ch.iter().map(move |v| v * s))
            .collect();
        let value = Tensor::new(&[b, c, l], out)?;
        Ok(self.push(value, &[x, gate], MulChannelOp { x, gate, len: l }))
    }

    /// Channel concat that keeps group alignment: output group `i` holds
    /// group `i` of `a` followed by group `i` of `b`.
    pub fn concat_grouped(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (ba, ca, la) = rank3(self, "concat_grouped", a)?;
        let (bb, cb, lb) = rank3(self, "concat_grouped", b)?;
        if ba != bb || la != lb {
            return Err(Error::shape(
                "concat_grouped",
                format!("[{ba}, _, {la}] vs [{bb}, _, {lb}]"),
            ));
        }
        if groups == 0 || ca % groups != 0 || cb % groups != 0 {
            return Err(Error::shape(
                "concat_grouped",
                format!("channels {ca} and {cb} not divisible by {groups} groups"),
            ));
        }
        let (ga, gb) = (ca / groups, cb / groups);
        let mut map = Vec::with_capacity(ca + cb);
        for grp in 0..groups {
            map.extend((0..ga).map(|c| (true, grp * ga + c)));
            map.extend((0..gb).map(|c| (false, grp * gb + c)));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let c_out = ca + cb;
        let mut out = vec![0.0; ba * c_out * la];
        for bi in 0..ba {
            for (oc, &(from_a, sc)) in map.iter().enumerate() {
                let src = if from_a {
                    &ad[(bi * ca + sc) * la..][..la]
                } else {
                    &bd[(bi * cb + sc) * la..][..la]
                };
                out[(bi * c_out + oc) * la..][..la].copy_from_slice(src);
            }
        }
        let value = Tensor::new(&[ba, c_out, la], out)?;
        Ok(self.push(
            value,
            &[a, b],
            ConcatGroupedOp {
                a,
                b,
                map,
                batch: ba,
                ca,
                cb,
                len: la,
            },
        ))
    }

    /// Select rows (along the flattened leading axes) -> `[idx.len(), D]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&0);
        let rows = self.value(x).rows();
        if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let xd = self.data(x);
        let out: Vec<f64> = idx
            .iter()
            .flat_map(|&r| xd[r * width..(r + 1) * width].iter().copied())
            .collect();
        let value = Tensor::new(&[idx.len(), width], out)?;
        Ok(self.push(
            value,
            &[x],
            GatherRowsOp {
                x,
                idx: idx.to_vec(),
                width,
            },
        ))
    }

    /// Entries `start..end` along the first axis.
    pub fn slice_first(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(Error::shape(
                "slice_first",
                format!("range {start}..{end} for shape {shape:?}"),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let out = self.data(x)[start * inner..end * inner].to_vec();
        let mut new_shape = shape;
        new_shape[0] = end - start;
        let value = Tensor::new(&new_shape, out)?;
        Ok(self.push(
            value,
            &[x],
            SliceFirstOp {
                x,
                offset: start * inner,
            },
        ))
    }

    /// Replace the rows flagged in `mask` with `row`.
    pub fn replace_rows(&mut self, x: Var, row: Var, mask: &[bool]) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&0);
        if self.value(row).len() != width || mask.len() != self.value(x).rows() {
            return Err(Error::shape(
                "replace_rows",
                format!(
                    "row len {} / mask len {} for input {:?}",
                    self.value(row).len(),
                    mask.len(),
                    self.shape(x)
                ),
            ));
        }
        let rd = self.data(row).to_vec();
        let mut out = self.data(x).to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out[r * width..(r + 1) * width].copy_from_slice(&rd);
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            value,
            &[x, row],
            ReplaceRowsOp {
                x,
                row,
                mask: mask.to_vec(),
                width,
            },
        ))
    }

    /// `out[r] = x[r, cols[r]]` for a rank-2 `x`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&0);
        let rows = self.value(x).rows();
        if cols.len() != rows || cols.iter().any(|&c| c >= width) {
            return Err(Error::shape(
                "pick",
                format!("{} column indices for {rows} rows of width {width}", cols.len()),
            ));
        }
        let xd = self.data(x);
        let out: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| xd[r * width + c])
            .collect();
        let value = Tensor::new(&[rows], out)?;
        Ok(self.push(
            value,
            &[x],
            PickOp {
                x,
                cols: cols.to_vec(),
                width,
            },
        ))
    }

    /// `out[r, j] = x[r, cols[r * per_row + j]]` for a rank-2 `x`.
    pub fn take_columns(&mut self, x: Var, cols: &[usize], per_row: usize) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&0);
        let rows = self.value(x).rows();
        if cols.len() != rows * per_row || cols.iter().any(|&c| c >= width) {
            return Err(Error::shape(
                "take_columns",
                format!("{} column indices for {rows} rows x {per_row} of width {width}", cols.len()),
            ));
        }
        let xd = self.data(x);
        let out: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| xd[(i / per_row) * width + c])
            .collect();
        let value = Tensor::new(&[rows, per_row], out)?;
        Ok(self.push(
            value,
            &[x],
            TakeColumnsOp {
                x,
                cols: cols.to_vec(),
                per_row,
                width,
            },
        ))
    }

    /// Column `col` of a `[R, C]` tensor.
    pub fn select_column(&mut self, x: Var, col: usize) -> Result<Var> {
        let rows = self.value(x).rows();
        self.pick(x, &vec![col; rows])
    }

    /// Scale each row to unit L2 norm (norm floored at `eps`).
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let width = *self.shape(x).last().unwrap_or(&1);
        let xd = self.data(x);
        let norms: Vec<f64> = xd
            .chunks(width)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps))
            .collect();
        let out: Vec<f64> = xd
            .chunks(width)
            .zip(&norms)
            .flat_map(|(r, n)| r.iter().map(move |v| v / n))
            .collect();
        let value = Tensor::new(self.shape(x), out).expect("same shape");
        self.push(value, &[x], NormalizeRowsOp { x, width, norms })
    }
}
