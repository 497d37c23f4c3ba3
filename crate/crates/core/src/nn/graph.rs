use std::collections::{HashMap, HashSet};

use crate::error::Result;
use crate::nn::ops::norm::BatchStats;
use crate::nn::params::{ParamGroup, ParamId, ParamKind, ParamStore};
use crate::nn::tape::{Gradients, Tape, Var};

/// SplitMix64 finalizer, used to derive independent dropout seeds from
/// `(step seed, site)` counters.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pending running-statistics update from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// One forward pass: a fresh tape bound to a read-only parameter store.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: HashMap<ParamId, Var>,
    frozen: HashSet<ParamGroup>,
    step_seed: u64,
    bn_updates: Vec<BnUpdate>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, step_seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            frozen: HashSet::new(),
            step_seed,
            bn_updates: Vec::new(),
        }
    }

    /// Parameters of these groups enter the tape as constants.
    pub fn with_frozen(mut self, groups: impl IntoIterator<Item = ParamGroup>) -> Self {
        self.frozen.extend(groups);
        self
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.contains(&group)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Bind a parameter to the tape (once per graph).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = if p.kind == ParamKind::Trainable && !self.frozen.contains(&p.group) {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound.insert(id, v);
        v
    }

    pub fn site_seed(&self, site: u64) -> u64 {
        mix_seed(self.step_seed, site)
    }

    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, site: u64) -> Result<Var> {
        let seed = self.site_seed(site);
        self.tape.dropout(x, rate, training, seed)
    }

    pub fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradients of every bound trainable parameter, in id order.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Vec<f64>)> {
        let mut ids: Vec<_> = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        ids.sort();
        ids.into_iter()
            .filter(|&(_, v)| self.tape.requires_grad(v))
            .filter_map(|(id, v)| grads.take(v).map(|g| (id, g)))
            .collect()
    }
}

/// Apply running-statistics updates: `r <- (1 - m) r + m batch`.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = u.momentum;
        for (r, b) in store
            .get_mut(u.running_mean)
            .value
            .data_mut()
            .iter_mut()
            .zip(&u.stats.mean)
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store
            .get_mut(u.running_var)
            .value
            .data_mut()
            .iter_mut()
            .zip(&u.stats.var_unbiased)
        {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}
