//! Run configuration: defaults, then a JSON file, then environment, then
//! command-line flags.

use std::path::Path;

use eegtok_core::optim::{AdamWConfig, Schedule};
use eegtok_core::training::{LoraConfig, Stage1Config, Stage2Config, TextTokenizer};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const ENV_SEED: &str = "EEGTOK_SEED";
pub const ENV_LLM_ENDPOINT: &str = "EEGTOK_LLM_ENDPOINT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub fs: f64,
    pub low: f64,
    pub high: f64,
    pub notch: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            fs: 200.0,
            low: 0.1,
            high: 75.0,
            notch: 50.0,
        }
    }
}

/// Optimizer and schedule for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
}

impl StageTrainConfig {
    fn with(epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            epochs,
            batch_size,
            lr,
            weight_decay: 0.01,
            warmup_steps: 10,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule {
            warmup_steps: self.warmup_steps,
            total_steps: (self.epochs * steps_per_epoch) as u64,
            min_ratio: self.min_lr_ratio,
        }
    }
}

impl Default for StageTrainConfig {
    fn default() -> Self {
        Self::with(20, 4, 1e-3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// `None` selects the offline stub client.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
    pub max_tokens: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: None,
            token_env: "EEGTOK_LLM_TOKEN".into(),
            timeout_secs: 60,
            max_tokens: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub top_k: usize,
    /// Words of profile text kept as text tokens and embedding rows.
    pub max_words: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            max_words: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub lora: LoraConfig,
    pub text: TextTokenizer,
    pub profile: ProfileConfig,
    pub llm: LlmConfig,
    pub train_vq: StageTrainConfig,
    pub train_cpt: StageTrainConfig,
    pub train_sft: StageTrainConfig,
    /// Inverse-frequency sampling of instruction-tuning examples.
    pub class_balance: bool,
    pub instruction: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preprocess: PreprocessConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            lora: LoraConfig::default(),
            text: TextTokenizer::default(),
            profile: ProfileConfig::default(),
            llm: LlmConfig::default(),
            train_vq: StageTrainConfig::with(20, 4, 1e-2),
            train_cpt: StageTrainConfig::with(10, 4, 1e-3),
            train_sft: StageTrainConfig::with(30, 4, 1e-3),
            class_balance: true,
            instruction: "which class describes this recording".into(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunConfig {
    /// Defaults overlaid with `file`, then the environment. Flags are applied
    /// by the caller afterwards, followed by [`validate`](Self::validate).
    pub fn resolve(file: Option<&Path>) -> CliResult<Self> {
        let mut v = serde_json::to_value(Self::default()).expect("defaults serialize");
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let over: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            if !over.is_object() {
                return Err(CliError::Config(format!("{}: expected a JSON object", p.display())));
            }
            merge(&mut v, over);
        }
        let mut cfg: Self = serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))?;
        if let Ok(s) = std::env::var(ENV_SEED) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{ENV_SEED}=`{s}` is not an unsigned integer")))?;
        }
        if let Ok(e) = std::env::var(ENV_LLM_ENDPOINT) {
            if !e.trim().is_empty() {
                cfg.llm.endpoint = Some(e);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let err = |m: String| Err(CliError::Config(m));
        self.stage1.encoder.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let (e, codes) = (self.stage1.encoder.dim, self.stage1.vq.codes);
        let s2 = &self.stage2;
        if s2.star.kv_dim != e {
            return err(format!("stage2.star.kv_dim {} must equal encoder dim {e}", s2.star.kv_dim));
        }
        if s2.backbone.v_eeg != codes {
            return err(format!("stage2.backbone.v_eeg {} must equal codebook size {codes}", s2.backbone.v_eeg));
        }
        if s2.star.dim != s2.backbone.dim {
            return err(format!("stage2.star.dim {} must equal backbone dim {}", s2.star.dim, s2.backbone.dim));
        }
        if !s2.backbone.dim.is_multiple_of(s2.backbone.heads) || !s2.star.dim.is_multiple_of(s2.star.heads) {
            return err("attention heads must divide the model width".into());
        }
        if self.text.vocab != s2.backbone.v_text {
            return err(format!(
                "text.vocab {} must equal stage2.backbone.v_text {}",
                self.text.vocab, s2.backbone.v_text
            ));
        }
        for (name, t) in [("train_vq", &self.train_vq), ("train_cpt", &self.train_cpt), ("train_sft", &self.train_sft)] {
            if t.batch_size == 0 || !(t.lr > 0.0) {
                return err(format!("{name}: batch_size and lr must be positive"));
            }
        }
        if self.lora.rank == 0 {
            return err("lora.rank must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_nested_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train_vq": {"epochs": 3}, "preprocess": {"notch": 60}}"#).unwrap();
        let c = RunConfig::resolve(Some(&p)).unwrap();
        assert_eq!(c.train_vq.epochs, 3);
        assert_eq!(c.train_vq.lr, RunConfig::default().train_vq.lr);
        assert_eq!(c.preprocess.notch, 60.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"trian_vq": {}}"#).unwrap();
        assert!(matches!(RunConfig::resolve(Some(&p)), Err(CliError::Config(_))));
    }

    #[test]
    fn defaults_are_consistent() {
        RunConfig::default().validate().unwrap();
    }
}
