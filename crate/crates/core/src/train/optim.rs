//! AdamW with decoupled weight decay, the one-cycle schedule and global
//! gradient-norm clipping.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, NamedTensor, TensorRole};
use crate::nn::params::{ParamGroup, ParamId, ParamStore};
use crate::nn::tensor::Tensor;
use crate::train::config::{AdamConfig, ScheduleConfig};

const MOMENT_PREFIX: &str = "optim.m.";
const VARIANCE_PREFIX: &str = "optim.v.";

/// Learning rate and momentum at one step of a one-cycle run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CyclePoint {
    /// Multiplier applied to each group's peak rate.
    pub lr_factor: f64,
    pub beta1: f64,
}

/// Cosine one-cycle policy: the rate climbs from `peak / div` to `peak`
/// over the warmup steps, then anneals to `peak / (div * final_div)`;
/// momentum moves the opposite way between its bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct OneCycle {
    pub total_steps: usize,
    pub warmup_steps: usize,
    cfg: ScheduleConfig,
}

fn cos_interp(from: f64, to: f64, frac: f64) -> f64 {
    to + (from - to) * (1.0 + (PI * frac.clamp(0.0, 1.0)).cos()) / 2.0
}

impl OneCycle {
    pub fn new(total_steps: usize, cfg: &ScheduleConfig) -> Self {
        let warmup_steps = ((cfg.warmup_fraction * total_steps as f64).round() as usize).clamp(1, total_steps.max(2) - 1);
        Self {
            total_steps,
            warmup_steps,
            cfg: cfg.clone(),
        }
    }

    /// Schedule values for the 0-based `step`.
    pub fn at(&self, step: usize) -> CyclePoint {
        let start = 1.0 / self.cfg.div_factor;
        let end = start / self.cfg.final_div_factor;
        let (lo, hi) = (self.cfg.momentum_min, self.cfg.momentum_max);
        if step <= self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            CyclePoint {
                lr_factor: cos_interp(start, 1.0, frac),
                beta1: cos_interp(hi, lo, frac),
            }
        } else {
            let span = (self.total_steps.saturating_sub(1 + self.warmup_steps)).max(1);
            let frac = (step - self.warmup_steps) as f64 / span as f64;
            CyclePoint {
                lr_factor: cos_interp(1.0, end, frac),
                beta1: cos_interp(lo, hi, frac),
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &[(ParamId, Vec<f64>)]) -> f64 {
    grads.iter().flat_map(|(_, g)| g).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`. Returns
/// the norms before and after clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|v| *v *= scale);
        (norm, global_norm(grads))
    } else {
        (norm, norm)
    }
}

/// Per-group peak rate and weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRates {
    pub peak: BTreeMap<ParamGroup, f64>,
    pub weight_decay: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64, weight_decay: f64) -> Self {
        let peak = [
            ParamGroup::FeatureExtractor,
            ParamGroup::Transformer,
            ParamGroup::Classifier,
            ParamGroup::Projection,
            ParamGroup::Quantizer,
        ]
        .into_iter()
        .map(|g| (g, lr))
        .collect();
        Self { peak, weight_decay }
    }

    pub fn with(mut self, group: ParamGroup, lr: f64) -> Self {
        self.peak.insert(group, lr);
        self
    }

    /// Current rate of each group at a schedule point.
    pub fn current(&self, point: CyclePoint) -> BTreeMap<ParamGroup, f64> {
        self.peak.iter().map(|(&g, &lr)| (g, lr * point.lr_factor)).collect()
    }
}

/// Decoupled-weight-decay Adam. Moments are keyed by parameter name so a
/// state survives head swaps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Apply one update. `rates` gives each group's current learning rate.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Vec<f64>)],
        rates: &BTreeMap<ParamGroup, f64>,
        weight_decay: f64,
        beta1: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b2, eps) = (self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let lr = *rates
                .get(&p.group)
                .ok_or_else(|| Error::Config(format!("no learning rate for group {}", p.group.as_str())))?;
            let n = p.value.len();
            let (m, v) = self.moments.entry(p.name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n || g.len() != n {
                return Err(Error::shape("adamw", format!("{}: state {} vs param {n}", p.name, m.len())));
            }
            for (((w, gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *w);
            }
        }
        Ok(())
    }

    /// Moments as checkpoint state tensors.
    pub fn state_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::with_capacity(2 * self.moments.len());
        for (name, (m, v)) in &self.moments {
            for (prefix, buf) in [(MOMENT_PREFIX, m), (VARIANCE_PREFIX, v)] {
                out.push(NamedTensor {
                    name: format!("{prefix}{name}"),
                    role: TensorRole::State,
                    group: None,
                    value: Tensor::new(&[buf.len()], buf.clone()).expect("flat"),
                });
            }
        }
        out
    }

    /// Restore moments saved by [`AdamW::state_tensors`].
    pub fn restore(cfg: AdamConfig, step: u64, ck: &Checkpoint) -> Result<Self> {
        let mut opt = Self::new(cfg);
        opt.step = step;
        for t in ck.with_role(TensorRole::State) {
            if let Some(name) = t.name.strip_prefix(MOMENT_PREFIX) {
                let v = ck
                    .get(&format!("{VARIANCE_PREFIX}{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("moment of {name} without variance")))?;
                opt.moments
                    .insert(name.to_string(), (t.value.data().to_vec(), v.value.data().to_vec()));
            }
        }
        Ok(opt)
    }

    pub fn tracked(&self) -> usize {
        self.moments.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cycle_shape() {
        let sched = OneCycle::new(100, &ScheduleConfig::default());
        assert_eq!(sched.warmup_steps, 15);
        let lrs: Vec<f64> = (0..100).map(|s| sched.at(s).lr_factor).collect();
        assert!((lrs[0] - 1.0 / 25.0).abs() < 1e-12);
        assert!((lrs[15] - 1.0).abs() < 1e-12);
        assert!(lrs[..=15].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[15..].windows(2).all(|w| w[1] < w[0]));
        assert!((lrs[99] - 1.0 / 25.0 / 1e4).abs() < 1e-15);
        for s in 0..100 {
            let b = sched.at(s).beta1;
            assert!((0.8 - 1e-12..=0.9 + 1e-12).contains(&b));
        }
        assert!((sched.at(0).beta1 - 0.9).abs() < 1e-12);
        assert!((sched.at(15).beta1 - 0.8).abs() < 1e-12);
        assert!((sched.at(99).beta1 - 0.9).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::zeros(&[3]), crate::nn::params::ParamKind::Trainable, ParamGroup::Classifier)
            .unwrap();
        let mut grads = vec![(id, vec![3.0, 4.0, 0.0])];
        let (pre, post) = clip_global_norm(&mut grads, 1.0);
        assert_eq!(pre, 5.0);
        assert!((post - 1.0).abs() < 1e-12);
        assert!((grads[0].1[0] - 0.6).abs() < 1e-12);
        let (pre, post) = clip_global_norm(&mut grads, 2.0);
        assert_eq!(pre, post);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap(), crate::nn::params::ParamKind::Trainable, ParamGroup::Classifier)
            .unwrap();
        let rates = GroupRates::uniform(0.1, 0.0).current(CyclePoint { lr_factor: 1.0, beta1: 0.9 });
        let mut opt = AdamW::new(AdamConfig::default());
        opt.update(&mut store, &[(id, vec![2.0, -0.5])], &rates, 0.0, 0.9).unwrap();
        let w = store.value(id).data();
        // Bias-corrected Adam moves each coordinate by lr * sign(g) on step one.
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
        let mut decayed = ParamStore::new();
        let id = decayed
            .add("w", Tensor::new(&[1], vec![2.0]).unwrap(), crate::nn::params::ParamKind::Trainable, ParamGroup::Classifier)
            .unwrap();
        AdamW::new(AdamConfig::default())
            .update(&mut decayed, &[(id, vec![0.0])], &rates, 0.5, 0.9)
            .unwrap();
        assert!((decayed.value(id).data()[0] - 1.9).abs() < 1e-12);
    }
}
