//! Parameter-group plans for continued pretraining and instruction tuning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{ToyBackbone, LORA_TARGETS};
use super::stage2::REFINER_PREFIX;
use crate::params::ParamStore;
use crate::tensor::{TensorError, TensorResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            targets: LORA_TARGETS.iter().map(|t| t.to_string()).collect(),
        }
    }
}

/// Learning-rate multiplier for the refiner during instruction tuning.
pub const SFT_REFINER_LR_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanGroup {
    pub label: String,
    pub lr_scale: f64,
    pub params: Vec<String>,
}

/// Trainable groups with their multipliers; everything else is frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetunePlan {
    pub groups: Vec<PlanGroup>,
    pub frozen: usize,
}

impl FinetunePlan {
    fn collect(store: &ParamStore, groups: Vec<(&str, f64, Vec<String>)>) -> Self {
        let groups: Vec<PlanGroup> = groups
            .into_iter()
            .map(|(label, lr_scale, params)| PlanGroup {
                label: label.to_string(),
                lr_scale,
                params,
            })
            .collect();
        let frozen = store.iter().filter(|(_, p)| !p.trainable).count();
        Self { groups, frozen }
    }

    /// Freezes everything, then enables each group at its multiplier.
    pub fn apply(&self, store: &mut ParamStore) -> TensorResult<()> {
        store.freeze_all();
        for g in &self.groups {
            for name in &g.params {
                let id = store
                    .id(name)
                    .ok_or_else(|| TensorError::Contract(format!("plan names unknown parameter `{name}`")))?;
                store.configure(id, true, g.lr_scale);
            }
        }
        Ok(())
    }
}

fn names_with(store: &ParamStore, prefix: &str) -> Vec<String> {
    store
        .iter()
        .filter(|(_, p)| p.trainable && p.name.starts_with(prefix))
        .map(|(_, p)| p.name.clone())
        .collect()
}

fn adapter_names(store: &ParamStore, lm: &mut ToyBackbone) -> Vec<String> {
    lm.lora_params().into_iter().map(|id| store.name(id).to_string()).collect()
}

/// Continued pretraining: everything frozen, adapters attached, the
/// refiner plus the embedding table and output head train at full rate.
pub fn cpt_setup(
    store: &mut ParamStore,
    lm: &mut ToyBackbone,
    lora: &LoraConfig,
    rng: &mut impl Rng,
) -> TensorResult<FinetunePlan> {
    store.freeze_all();
    let targets: Vec<&str> = lora.targets.iter().map(String::as_str).collect();
    lm.apply_lora(store, lora.rank, lora.alpha, &targets, rng)?;
    store.configure_prefix(&format!("{REFINER_PREFIX}."), true, 1.0);
    store.configure(lm.embed, true, 1.0);
    for id in lm.head.param_ids() {
        store.configure(id, true, 1.0);
    }
    let mut vocab = vec![store.name(lm.embed).to_string()];
    vocab.extend(lm.head.param_ids().iter().map(|&id| store.name(id).to_string()));
    let adapters = adapter_names(store, lm);
    let star = names_with(store, &format!("{REFINER_PREFIX}."));
    Ok(FinetunePlan::collect(
        store,
        vec![("adapter", 1.0, adapters), ("vocabulary", 1.0, vocab), ("refiner", 1.0, star)],
    ))
}

/// Instruction tuning: the previous adapter is merged into the base
/// weights, a fresh adapter trains at full rate, the refiner at
/// [`SFT_REFINER_LR_SCALE`], and everything else is frozen.
pub fn sft_setup(
    store: &mut ParamStore,
    lm: &mut ToyBackbone,
    lora: &LoraConfig,
    rng: &mut impl Rng,
) -> TensorResult<FinetunePlan> {
    lm.merge_lora(store)?;
    store.freeze_all();
    let targets: Vec<&str> = lora.targets.iter().map(String::as_str).collect();
    lm.apply_lora(store, lora.rank, lora.alpha, &targets, rng)?;
    store.configure_prefix(&format!("{REFINER_PREFIX}."), true, SFT_REFINER_LR_SCALE);
    let adapters = adapter_names(store, lm);
    let star = names_with(store, &format!("{REFINER_PREFIX}."));
    Ok(FinetunePlan::collect(
        store,
        vec![("adapter", 1.0, adapters), ("refiner", SFT_REFINER_LR_SCALE, star)],
    ))
}
