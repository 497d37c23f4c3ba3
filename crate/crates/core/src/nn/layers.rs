//! Parameterized layers. Each layer owns [`ParamId`]s into a
//! [`ParamStore`] and runs its forward pass on a [`Graph`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{BnUpdate, Graph};
use crate::nn::ops::conv::ConvGeometry;
use crate::nn::params::{ParamGroup, ParamId, ParamKind, ParamStore};
use crate::nn::tape::Var;
use crate::nn::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Allocates parameters in a deterministic order from one seeded stream and
/// hands out dropout site ids.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    next_site: u64,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_site: 0,
        }
    }

    pub fn site(&mut self) -> u64 {
        self.next_site += 1;
        self.next_site
    }

    /// Continue numbering dropout sites after `n`.
    pub fn skip_sites(&mut self, n: u64) {
        self.next_site = self.next_site.max(n);
    }

    pub fn sites_used(&self) -> u64 {
        self.next_site
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64, group: ParamGroup) -> Result<ParamId> {
        let t = Tensor::uniform(shape, bound, &mut self.rng);
        self.store.add(name, t, ParamKind::Trainable, group)
    }

    pub fn tensor(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind, group: ParamGroup) -> Result<ParamId> {
        self.store.add(name, value, kind, group)
    }

    pub fn randn(&mut self, name: impl Into<String>, shape: &[usize], std: f64, group: ParamGroup) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, t, ParamKind::Trainable, group)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub geo: ConvGeometry,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    pub fn new(b: &mut Builder<'_>, name: &str, geo: ConvGeometry, group: ParamGroup) -> Result<Self> {
        geo.validate()?;
        let fan_in = (geo.in_channels / geo.groups * geo.kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = b.uniform(format!("{name}.weight"), &geo.weight_shape(), bound, group)?;
        let bias = b.uniform(format!("{name}.bias"), &[geo.out_channels], bound, group)?;
        Ok(Self { geo, weight, bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let bias = g.param(self.bias);
        g.tape.conv1d(x, w, Some(bias), self.geo)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm1d {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            gamma: b.tensor(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), ParamKind::Trainable, group)?,
            beta: b.tensor(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable, group)?,
            running_mean: b.tensor(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer, group)?,
            running_var: b.tensor(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), ParamKind::Buffer, group)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, training: bool) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let store = g.store();
        let rm = store.value(self.running_mean).data();
        let rv = store.value(self.running_var).data();
        let (y, stats) = g.tape.batch_norm(x, gamma, beta, (rm, rv), training, BN_EPS)?;
        if let Some(stats) = stats {
            g.record_bn(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                momentum: BN_MOMENTUM,
                stats,
            });
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            gamma: b.tensor(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), ParamKind::Trainable, group)?,
            beta: b.tensor(format!("{name}.beta"), Tensor::zeros(&[dim]), ParamKind::Trainable, group)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.tape.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, fan_in: usize, fan_out: usize, bias: bool, group: ParamGroup) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = b.uniform(format!("{name}.weight"), &[fan_out, fan_in], bound, group)?;
        let bias = if bias {
            Some(b.uniform(format!("{name}.bias"), &[fan_out], bound, group)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.linear(x, w, b)
    }
}

/// Pre-norm multi-head self-attention block:
/// `x + dropout(W_o . attention(LN(x)))`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dropout: f64,
    attn_site: u64,
    out_site: u64,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, heads: usize, dropout: f64, group: ParamGroup) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dim} must be divisible by {heads} heads"
            )));
        }
        Ok(Self {
            norm: LayerNorm::new(b, &format!("{name}.norm"), dim, group)?,
            query: Linear::new(b, &format!("{name}.query"), dim, dim, true, group)?,
            key: Linear::new(b, &format!("{name}.key"), dim, dim, true, group)?,
            value: Linear::new(b, &format!("{name}.value"), dim, dim, true, group)?,
            output: Linear::new(b, &format!("{name}.output"), dim, dim, true, group)?,
            heads,
            dropout,
            attn_site: b.site(),
            out_site: b.site(),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, training: bool) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let q = self.query.forward(g, h)?;
        let k = self.key.forward(g, h)?;
        let v = self.value.forward(g, h)?;
        let drop = (training && self.dropout > 0.0).then(|| (self.dropout, g.site_seed(self.attn_site)));
        let a = g.tape.attention(q, k, v, self.heads, drop)?;
        let o = self.output.forward(g, a)?;
        let o = g.dropout(o, self.dropout, training, self.out_site)?;
        g.tape.add(x, o)
    }
}

/// Pre-norm position-wise feed-forward block:
/// `x + dropout(W_2 . dropout(gelu(W_1 . LN(x))))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
    pub dropout: f64,
    hidden_site: u64,
    out_site: u64,
}

impl FeedForward {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, hidden: usize, dropout: f64, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(b, &format!("{name}.norm"), dim, group)?,
            up: Linear::new(b, &format!("{name}.up"), dim, hidden, true, group)?,
            down: Linear::new(b, &format!("{name}.down"), hidden, dim, true, group)?,
            dropout,
            hidden_site: b.site(),
            out_site: b.site(),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, training: bool) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.up.forward(g, h)?;
        let h = g.tape.gelu(h);
        let h = g.dropout(h, self.dropout, training, self.hidden_site)?;
        let h = self.down.forward(g, h)?;
        let h = g.dropout(h, self.dropout, training, self.out_site)?;
        g.tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub feed_forward: FeedForward,
}

impl TransformerLayer {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, heads: usize, hidden: usize, dropout: f64, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(b, &format!("{name}.attn"), dim, heads, dropout, group)?,
            feed_forward: FeedForward::new(b, &format!("{name}.ffn"), dim, hidden, dropout, group)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, training: bool) -> Result<Var> {
        let x = self.attention.forward(g, x, training)?;
        self.feed_forward.forward(g, x, training)
    }
}
