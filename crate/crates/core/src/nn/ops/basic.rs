use crate::error::{Error, Result};
use crate::nn::tape::{Backward, Grads, Tape, Var};
use crate::nn::tensor::Tensor;

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

struct AddOp(Var, Var);
impl Backward for AddOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        grads.accumulate(self.0, g);
        grads.accumulate(self.1, g);
    }
}

struct SubOp(Var, Var);
impl Backward for SubOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        grads.accumulate(self.0, g);
        if let Some(buf) = grads.slot(self.1) {
            for (b, x) in buf.iter_mut().zip(g) {
                *b -= x;
            }
        }
    }
}

struct MulOp(Var, Var);
impl Backward for MulOp {
    fn backward(&self, _: &Tensor, g: &[f64], tape: &Tape, grads: &mut Grads<'_>) {
        let (a, b) = (tape.data(self.0), tape.data(self.1));
        if let Some(buf) = grads.slot(self.0) {
            for i in 0..buf.len() {
                buf[i] += g[i] * b[i];
            }
        }
        if let Some(buf) = grads.slot(self.1) {
            for i in 0..buf.len() {
                buf[i] += g[i] * a[i];
            }
        }
    }
}

struct ScaleOp(Var, f64);
impl Backward for ScaleOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        if let Some(buf) = grads.slot(self.0) {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += self.1 * x;
            }
        }
    }
}

struct PassOp(Var);
impl Backward for PassOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        grads.accumulate(self.0, g);
    }
}

struct ExpOp(Var);
impl Backward for ExpOp {
    fn backward(&self, out: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        if let Some(buf) = grads.slot(self.0) {
            for ((b, x), y) in buf.iter_mut().zip(g).zip(out.data()) {
                *b += x * y;
            }
        }
    }
}

struct LogOp(Var, f64);
impl Backward for LogOp {
    fn backward(&self, _: &Tensor, g: &[f64], tape: &Tape, grads: &mut Grads<'_>) {
        let x = tape.data(self.0);
        let floor = self.1;
        if let Some(buf) = grads.slot(self.0) {
            for i in 0..buf.len() {
                if x[i] > floor {
                    buf[i] += g[i] / x[i];
                }
            }
        }
    }
}

struct SumOp(Var);
impl Backward for SumOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        if let Some(buf) = grads.slot(self.0) {
            for b in buf.iter_mut() {
                *b += g[0];
            }
        }
    }
}

struct DotConstOp(Var, Vec<f64>);
impl Backward for DotConstOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        if let Some(buf) = grads.slot(self.0) {
            for (b, w) in buf.iter_mut().zip(&self.1) {
                *b += g[0] * w;
            }
        }
    }
}

struct AddRowOp {
    x: Var,
    row: Var,
    width: usize,
}
impl Backward for AddRowOp {
    fn backward(&self, _: &Tensor, g: &[f64], _: &Tape, grads: &mut Grads<'_>) {
        grads.accumulate(self.x, g);
        if let Some(buf) = grads.slot(self.row) {
            for chunk in g.chunks(self.width) {
                for (b, x) in buf.iter_mut().zip(chunk) {
                    *b += x;
                }
            }
        }
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, &[a, b], AddOp(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, &[a, b], SubOp(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, &[a, b], MulOp(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let out = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(out, &[a], ScaleOp(a, c))
    }

    /// Same values under a new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, &[a], PassOp(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|x| x.exp()).collect();
        let out = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(out, &[a], ExpOp(a))
    }

    /// Natural log with inputs clamped below at `floor` (gradient is zero
    /// where the clamp is active).
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let data = self.data(a).iter().map(|x| x.max(floor).ln()).collect();
        let out = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(out, &[a], LogOp(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), &[a], SumOp(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Scalar `sum(a * weights)` for a constant weight vector.
    pub fn dot_const(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(a).len() {
            return Err(Error::shape(
                "dot_const",
                format!(
                    "{} weights for {} values",
                    weights.len(),
                    self.value(a).len()
                ),
            ));
        }
        let s = self.data(a).iter().zip(&weights).map(|(x, w)| x * w).sum();
        Ok(self.push(Tensor::scalar(s), &[a], DotConstOp(a, weights)))
    }

    /// Add a vector along the last axis (broadcast over all leading axes).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&0);
        if self.value(row).len() != width {
            return Err(Error::shape(
                "add_row",
                format!(
                    "row of length {} for last dim {width}",
                    self.value(row).len()
                ),
            ));
        }
        let r = self.data(row).to_vec();
        let mut data = self.data(x).to_vec();
        for chunk in data.chunks_mut(width) {
            for (d, b) in chunk.iter_mut().zip(&r) {
                *d += b;
            }
        }
        let out = Tensor::new(self.shape(x), data)?;
        Ok(self.push(out, &[x, row], AddRowOp { x, row, width }))
    }

    /// Sum a list of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms.split_first().ok_or(Error::Empty("add_all"))?;
        let mut acc = *first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }
}
