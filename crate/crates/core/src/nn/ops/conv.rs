use crate::error::{Error, Result};
use crate::nn::linalg::{gemm, Mat};
use crate::nn::tape::{Backward, Grads, Tape, Var};
use crate::nn::tensor::Tensor;

/// Static geometry of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.stride == 0 || self.kernel == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv geometry needs positive groups, stride and kernel: {self:?}"
            )));
        }
        if self.in_channels % self.groups != 0 {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "in_channels {} not divisible by groups {}",
                    self.in_channels, self.groups
                ),
            ));
        }
        if self.out_channels % self.groups != 0 {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "out_channels {} not divisible by groups {}",
                    self.out_channels, self.groups
                ),
            ));
        }
        Ok(())
    }

    /// `floor((len + 2*padding - kernel) / stride) + 1`, or an error when the
    /// padded input is shorter than the kernel.
    pub fn output_len(&self, len: usize) -> Result<usize> {
        let padded = len + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "length {len} with padding {} is shorter than kernel {}",
                    self.padding, self.kernel
                ),
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
        ]
    }
}

struct Conv1dOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    geo: ConvGeometry,
    batch: usize,
    len_in: usize,
    len_out: usize,
    /// Per-group unfolded inputs `[cin_g*kernel, batch*len_out]`.
    cols: Vec<Vec<f64>>,
}

fn im2col(
    x: &[f64],
    geo: &ConvGeometry,
    group: usize,
    batch: usize,
    len_in: usize,
    len_out: usize,
) -> Vec<f64> {
    let cin_g = geo.in_channels / geo.groups;
    let k = geo.kernel;
    let width = batch * len_out;
    let mut cols = vec![0.0; cin_g * k * width];
    for c in 0..cin_g {
        let ch = group * cin_g + c;
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * width..(c * k + kk + 1) * width];
            for b in 0..batch {
                let src = &x[(b * geo.in_channels + ch) * len_in..][..len_in];
                for o in 0..len_out {
                    let pos = (o * geo.stride + kk) as isize - geo.padding as isize;
                    if pos >= 0 && (pos as usize) < len_in {
                        row[b * len_out + o] = src[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

impl Backward for Conv1dOp {
    fn backward(&self, _: &Tensor, g: &[f64], tape: &Tape, grads: &mut Grads<'_>) {
        let geo = &self.geo;
        let (batch, lin, lout) = (self.batch, self.len_in, self.len_out);
        let cin_g = geo.in_channels / geo.groups;
        let cout_g = geo.out_channels / geo.groups;
        let ck = cin_g * geo.kernel;
        let width = batch * lout;
        let w = tape.data(self.w);
        let want_x = grads.wants(self.x);
        let want_w = grads.wants(self.w);

        if let Some(b) = self.b {
            if let Some(buf) = grads.slot(b) {
                for bi in 0..batch {
                    for o in 0..geo.out_channels {
                        let s: f64 = g[(bi * geo.out_channels + o) * lout..][..lout].iter().sum();
                        buf[o] += s;
                    }
                }
            }
        }

        for grp in 0..geo.groups {
            // gather output grads of this group as [cout_g, batch*lout]
            let mut gout = vec![0.0; cout_g * width];
            for o in 0..cout_g {
                let oc = grp * cout_g + o;
                for bi in 0..batch {
                    gout[o * width + bi * lout..][..lout]
                        .copy_from_slice(&g[(bi * geo.out_channels + oc) * lout..][..lout]);
                }
            }
            let gm = Mat::new(&gout, cout_g, width);
            if want_w {
                let cols = Mat::new(&self.cols[grp], ck, width);
                let buf = grads.slot(self.w).expect("wanted");
                gemm(gm, cols.t(), &mut buf[grp * cout_g * ck..][..cout_g * ck], 1.0);
            }
            if want_x {
                let wg = Mat::new(&w[grp * cout_g * ck..][..cout_g * ck], cout_g, ck);
                let mut dcols = vec![0.0; ck * width];
                gemm(wg.t(), gm, &mut dcols, 0.0);
                let buf = grads.slot(self.x).expect("wanted");
                for c in 0..cin_g {
                    let ch = grp * cin_g + c;
                    for kk in 0..geo.kernel {
                        let row = &dcols[(c * geo.kernel + kk) * width..][..width];
                        for bi in 0..batch {
                            let dst = &mut buf[(bi * geo.in_channels + ch) * lin..][..lin];
                            for o in 0..lout {
                                let pos =
                                    (o * geo.stride + kk) as isize - geo.padding as isize;
                                if pos >= 0 && (pos as usize) < lin {
                                    dst[pos as usize] += row[bi * lout + o];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Grouped 1-D convolution: `x [B, C_in, L]`, `w [C_out, C_in/groups, k]`,
    /// optional bias `[C_out]` -> `[B, C_out, L_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        geo.validate()?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("conv1d", format!("input rank {} != 3", xs.len())));
        }
        if xs[1] != geo.in_channels {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input channel dim is {} but layer expects {}",
                    xs[1], geo.in_channels
                ),
            ));
        }
        if self.shape(w) != geo.weight_shape() {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "weight shape {:?} but geometry needs {:?}",
                    self.shape(w),
                    geo.weight_shape()
                ),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != geo.out_channels {
                return Err(Error::shape(
                    "conv1d",
                    format!(
                        "bias length {} vs out_channels {}",
                        self.value(b).len(),
                        geo.out_channels
                    ),
                ));
            }
        }
        let (batch, len_in) = (xs[0], xs[2]);
        let len_out = geo.output_len(len_in)?;
        let cin_g = geo.in_channels / geo.groups;
        let cout_g = geo.out_channels / geo.groups;
        let ck = cin_g * geo.kernel;
        let width = batch * len_out;

        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![0.0; batch * geo.out_channels * len_out];
        let mut all_cols = Vec::with_capacity(geo.groups);
        let mut tmp = vec![0.0; cout_g * width];
        for grp in 0..geo.groups {
            let cols = im2col(xd, &geo, grp, batch, len_in, len_out);
            gemm(
                Mat::new(&wd[grp * cout_g * ck..][..cout_g * ck], cout_g, ck),
                Mat::new(&cols, ck, width),
                &mut tmp,
                0.0,
            );
            for o in 0..cout_g {
                let oc = grp * cout_g + o;
                for bi in 0..batch {
                    out[(bi * geo.out_channels + oc) * len_out..][..len_out]
                        .copy_from_slice(&tmp[o * width + bi * len_out..][..len_out]);
                }
            }
            all_cols.push(cols);
        }
        if let Some(b) = b {
            let bias = self.data(b);
            for bi in 0..batch {
                for (oc, bv) in bias.iter().enumerate() {
                    for v in &mut out[(bi * geo.out_channels + oc) * len_out..][..len_out] {
                        *v += bv;
                    }
                }
            }
        }
        let value = Tensor::new(&[batch, geo.out_channels, len_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let keep_cols = self.requires_grad(w);
        Ok(self.push(
            value,
            &inputs,
            Conv1dOp {
                x,
                w,
                b,
                geo,
                batch,
                len_in,
                len_out,
                cols: if keep_cols { all_cols } else { Vec::new() },
            },
        ))
    }
}
