//! Checkpoint metadata shared by the training runs.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, NamedTensor, TensorRole};
use crate::model::{all_finite, EncoderState};
use crate::nn::tensor::Tensor;
use crate::objectives::CodebookState;
use crate::phonemap::PhonemeInventory;
use crate::train::config::TrainConfig;
use crate::train::optim::AdamW;

const CODEBOOK_ENTRIES: &str = "codebook.entries";
const CODEBOOK_SIZES: &str = "codebook.ema_cluster_size";
const CODEBOOK_SUMS: &str = "codebook.ema_embed_sum";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Supervised,
    Pretrain,
    Finetune,
}

/// Everything a finished run leaves behind.
pub struct RunState<'a> {
    pub kind: RunKind,
    pub step: u64,
    pub model: &'a EncoderState,
    pub config: &'a TrainConfig,
    pub inventory: Option<&'a PhonemeInventory>,
    pub optimizer: &'a AdamW,
    pub codebook: Option<&'a CodebookState>,
}

fn state_tensor(name: &str, value: Tensor) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        role: TensorRole::State,
        group: None,
        value,
    }
}

impl RunState<'_> {
    /// Build the checkpoint, refusing to emit non-finite values.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        if !all_finite(&self.model.store) {
            return Err(Error::NonFinite("model parameters; checkpoint not written".into()));
        }
        let mut state = self.optimizer.state_tensors();
        let mut codebook_meta = serde_json::Value::Null;
        if let Some(cb) = self.codebook {
            let (k, d) = (cb.size(), cb.dim());
            state.push(state_tensor(CODEBOOK_ENTRIES, cb.entries.clone()));
            state.push(state_tensor(CODEBOOK_SIZES, cb.ema_cluster_size.clone().reshape(&[k])?));
            state.push(state_tensor(CODEBOOK_SUMS, cb.ema_embed_sum.clone().reshape(&[k, d])?));
            codebook_meta = json!({"decay": cb.decay, "laplace_epsilon": cb.laplace_epsilon});
        }
        if state.iter().any(|t| !t.value.is_finite()) {
            return Err(Error::NonFinite("training state; checkpoint not written".into()));
        }
        let meta = json!({
            "kind": self.kind,
            "config": self.config,
            "inventory": self.inventory.map(|inv| inv.classes.clone()),
            "optimizer_step": self.optimizer.step,
            "codebook": codebook_meta,
        });
        Ok(self.model.to_checkpoint(self.step, meta, state))
    }
}

pub fn run_kind(ck: &Checkpoint) -> Option<RunKind> {
    serde_json::from_value(ck.meta.get("kind")?.clone()).ok()
}

pub fn config_snapshot(ck: &Checkpoint) -> Option<TrainConfig> {
    serde_json::from_value(ck.meta.get("config")?.clone()).ok()
}

/// Class symbols the checkpoint was trained with.
pub fn inventory_classes(ck: &Checkpoint) -> Option<Vec<String>> {
    serde_json::from_value(ck.meta.get("inventory")?.clone()).ok()
}

/// Check a checkpoint's class list against an inventory.
pub fn check_inventory(ck: &Checkpoint, inv: &PhonemeInventory) -> Result<()> {
    if ck.model.num_classes != inv.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes but the inventory has {}",
            ck.model.num_classes,
            inv.num_classes()
        )));
    }
    if let Some(classes) = inventory_classes(ck) {
        if classes != inv.classes {
            return Err(Error::Config("checkpoint class symbols differ from the inventory".into()));
        }
    }
    Ok(())
}

pub fn optimizer_step(ck: &Checkpoint) -> u64 {
    ck.meta.get("optimizer_step").and_then(|v| v.as_u64()).unwrap_or(0)
}

/// The codebook saved with a pretraining checkpoint.
pub fn codebook_from_checkpoint(ck: &Checkpoint) -> Result<Option<CodebookState>> {
    let Some(entries) = ck.get(CODEBOOK_ENTRIES) else {
        return Ok(None);
    };
    let missing = |n: &str| Error::Checkpoint(format!("codebook without {n}"));
    let sizes = ck.get(CODEBOOK_SIZES).ok_or_else(|| missing(CODEBOOK_SIZES))?;
    let sums = ck.get(CODEBOOK_SUMS).ok_or_else(|| missing(CODEBOOK_SUMS))?;
    let meta = ck.meta.get("codebook").ok_or_else(|| missing("metadata"))?;
    let field = |k: &str| meta.get(k).and_then(|v| v.as_f64()).ok_or_else(|| missing(k));
    let mut cb = CodebookState::new(entries.value.clone(), field("decay")?, field("laplace_epsilon")?)?;
    if sizes.value.len() != cb.size() || sums.value.len() != cb.entries.len() {
        return Err(Error::Checkpoint("codebook state shapes disagree".into()));
    }
    cb.ema_cluster_size = sizes.value.clone();
    cb.ema_embed_sum = sums.value.clone();
    Ok(Some(cb))
}
