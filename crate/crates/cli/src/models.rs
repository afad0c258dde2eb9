//! Model construction, checkpoint round trips and stage-2 example
//! preparation.

use std::path::{Path, PathBuf};

use eegtok_core::checkpoint::{self, load_into};
use eegtok_core::optim::AdamW;
use eegtok_core::profiler::LlmClient;
use eegtok_core::refiner::{HashedBagOfWords, TextEmbedder};
use eegtok_core::signal::{patch, PatchedSignal, Recording};
use eegtok_core::training::{
    FinetunePlan, HybridSequence, Stage1Model, Stage2Input, Stage2Model, LORA_TARGETS,
};
use eegtok_core::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::dataset::{Dataset, DatasetItem};
use crate::error::{CliError, CliResult};
use crate::pipeline::{hierarchy_for, profile_recording, profile_text};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vq,
    Cpt,
    Sft,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Vq => "vq",
            Self::Cpt => "cpt",
            Self::Sft => "sft",
        }
    }
}

/// Everything stored next to the tensors of a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub config: RunConfig,
    pub channels: Vec<String>,
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default)]
    pub dataset_name: String,
    /// Epochs fully completed.
    pub epoch: usize,
    /// Batches completed within the current epoch.
    pub batch: usize,
    pub step: u64,
    pub complete: bool,
    /// Mean training loss of every completed epoch.
    pub history: Vec<f64>,
    #[serde(default)]
    pub plan: Option<FinetunePlan>,
    /// Loop state needed to continue a partial epoch.
    #[serde(default)]
    pub resume: Value,
}

pub fn save_checkpoint(dir: &Path, store: &ParamStore, opt: Option<&AdamW>, meta: &CheckpointMeta) -> CliResult<()> {
    let state = opt.map(|o| o.export_state(store)).unwrap_or_default();
    let mut tensors: Vec<(String, &Tensor)> = store.iter().map(|(_, p)| (p.name.clone(), &p.tensor)).collect();
    tensors.extend(state.iter().map(|(n, t)| (n.clone(), t)));
    checkpoint::save(dir, &tensors, serde_json::to_value(meta).expect("meta serializes"))?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> CliResult<CheckpointMeta> {
    let m = checkpoint::read_manifest(dir)?;
    serde_json::from_value(m.meta).map_err(|e| CliError::Data(format!("{}: checkpoint meta: {e}", dir.display())))
}

/// Loads parameters into `store`; optimizer moments go to `opt` when given.
pub fn restore(dir: &Path, store: &mut ParamStore, opt: Option<(&mut AdamW, u64)>) -> CliResult<()> {
    let (unknown, _) = load_into(dir, store)?;
    let stray: Vec<&String> = unknown.iter().filter(|n| !n.starts_with("opt.")).collect();
    if !stray.is_empty() {
        return Err(CliError::Data(format!(
            "{}: checkpoint holds parameters this model lacks: {stray:?}",
            dir.display()
        )));
    }
    if let Some((o, step)) = opt {
        let (tensors, _) = checkpoint::load(dir)?;
        o.import_state(store, &tensors, step);
    }
    Ok(())
}

pub fn require_stage(dir: &Path, meta: &CheckpointMeta, want: &[Stage]) -> CliResult<()> {
    if !want.contains(&meta.stage) {
        return Err(CliError::Dependency(format!(
            "{} is a `{}` checkpoint; expected {}",
            dir.display(),
            meta.stage.name(),
            want.iter().map(|s| s.name()).collect::<Vec<_>>().join(" or ")
        )));
    }
    if !meta.complete {
        return Err(CliError::Dependency(format!(
            "{} is an unfinished `{}` run; resume it first",
            dir.display(),
            meta.stage.name()
        )));
    }
    Ok(())
}

pub struct Models {
    pub store: ParamStore,
    pub stage1: Stage1Model,
    pub stage2: Option<Stage2Model>,
}

/// Fresh models for `cfg`; parameter values come from `seed`.
pub fn build(cfg: &RunConfig, with_stage2: bool, seed: u64) -> CliResult<Models> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let stage1 = Stage1Model::new(&mut store, cfg.stage1.clone(), &mut rng)?;
    let stage2 = if with_stage2 {
        Some(Stage2Model::new(&mut store, cfg.stage2.clone(), &mut rng)?)
    } else {
        None
    };
    Ok(Models { store, stage1, stage2 })
}

impl Models {
    pub fn lm(&mut self) -> &mut Stage2Model {
        self.stage2.as_mut().expect("stage-2 model built")
    }

    /// Adds adapter slots so a checkpoint carrying an adapter can be loaded.
    pub fn attach_adapter_slots(&mut self, cfg: &RunConfig) -> CliResult<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let targets: Vec<&str> = cfg.lora.targets.iter().map(String::as_str).collect();
        if let Some(bad) = targets.iter().find(|t| !LORA_TARGETS.contains(t)) {
            return Err(CliError::Config(format!("unknown adapter target `{bad}`")));
        }
        let store = &mut self.store;
        let lm = &mut self.stage2.as_mut().expect("stage-2 model built").backbone;
        lm.apply_lora(store, cfg.lora.rank, cfg.lora.alpha, &targets, &mut rng)?;
        Ok(())
    }
}

/// Stage-2 model from a finished cpt or sft checkpoint, ready for
/// inference.
pub fn load_stage2(path: &Path) -> CliResult<(Models, CheckpointMeta, PathBuf)> {
    let dir = crate::rundir::resolve_checkpoint(path)?;
    let meta = read_meta(&dir)?;
    require_stage(&dir, &meta, &[Stage::Cpt, Stage::Sft])?;
    let mut m = build(&meta.config, true, meta.config.seed)?;
    m.attach_adapter_slots(&meta.config)?;
    restore(&dir, &mut m.store, None)?;
    Ok((m, meta, dir))
}

pub fn patched(rec: &Recording, cfg: &RunConfig) -> CliResult<PatchedSignal> {
    let ps = patch(rec, cfg.stage1.encoder.patch_len)?;
    if ps.patches > cfg.stage1.encoder.max_patches {
        return Err(CliError::Data(format!(
            "{} patches exceed the encoder's position table ({})",
            ps.patches, cfg.stage1.encoder.max_patches
        )));
    }
    Ok(ps)
}

pub fn check_channels(expected: &[String], rec: &Recording, what: &str) -> CliResult<()> {
    if rec.channels() != expected {
        return Err(CliError::Data(format!(
            "{what}: channels {:?} do not match the checkpoint's {:?}",
            rec.channels(),
            expected
        )));
    }
    Ok(())
}

/// Text-side inputs of one recording.
pub struct TextInputs {
    pub tokens: Vec<usize>,
    pub embedding: Tensor,
}

/// Profiles `rec` (reusing `cache/<id>.json` when present) and encodes the
/// profile text.
pub fn text_inputs(
    cfg: &RunConfig,
    rec: &Recording,
    id: &str,
    dataset_name: &str,
    classes: &[String],
    client: &mut dyn LlmClient,
    cache: Option<&Path>,
) -> CliResult<TextInputs> {
    let cached = cache.map(|c| c.join(format!("{id}.json")));
    let profile = match cached.as_ref().filter(|p| p.is_file()) {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => {
            let run = profile_recording(rec, id, dataset_name, classes, cfg.profile.top_k, client)?;
            if let Some(p) = &cached {
                std::fs::create_dir_all(p.parent().expect("cache dir"))?;
                std::fs::write(p, serde_json::to_string_pretty(&run.profile).expect("profile serializes"))?;
            }
            run.profile
        }
    };
    let text = profile_text(&profile);
    let words: Vec<&str> = text.split_whitespace().take(cfg.profile.max_words).collect();
    let clipped = words.join(" ");
    let embedder = HashedBagOfWords::new(cfg.stage2.star.dim, cfg.profile.max_words);
    Ok(TextInputs {
        tokens: cfg.text.encode(&clipped),
        embedding: embedder.embed(&clipped),
    })
}

/// Label word token ids, one per class; must be pairwise distinct.
pub fn label_tokens(cfg: &RunConfig, classes: &[String]) -> CliResult<Vec<usize>> {
    let ids: Vec<usize> = classes.iter().map(|c| cfg.text.token_id(c)).collect();
    for i in 0..ids.len() {
        if ids[..i].contains(&ids[i]) {
            return Err(CliError::Config(format!(
                "class names `{}` and `{}` share a text token; rename one",
                classes[ids[..i].iter().position(|&x| x == ids[i]).expect("present")],
                classes[i]
            )));
        }
    }
    Ok(ids)
}

/// One prepared stage-2 example plus its label.
pub struct Example {
    pub id: String,
    pub input: Stage2Input,
    pub label: Option<usize>,
}

pub struct ExampleSpec<'a> {
    pub cfg: &'a RunConfig,
    pub channels: &'a [String],
    pub classes: &'a [String],
    pub dataset_name: &'a str,
    /// Append the instruction and this answer (label token) when set.
    pub with_answer: bool,
    pub cache: Option<&'a Path>,
}

pub fn prepare_examples(
    models: &Models,
    ds: &Dataset,
    items: &[(&DatasetItem, Option<usize>)],
    spec: &ExampleSpec<'_>,
    client: &mut dyn LlmClient,
) -> CliResult<Vec<Example>> {
    let cfg = spec.cfg;
    let hier = hierarchy_for(spec.channels)?;
    let labels = if spec.with_answer { label_tokens(cfg, spec.classes)? } else { Vec::new() };
    let instr = cfg.text.encode(&cfg.instruction);
    let mut out = Vec::with_capacity(items.len());
    for &(item, label) in items {
        let rec = ds.load(item)?;
        check_channels(spec.channels, &rec, &item.id)?;
        let ps = patched(&rec, cfg)?;
        let tokens = models.stage1.tokenize(&models.store, &hier, &ps)?;
        let z = models.stage1.token_rows(&models.store, &tokens)?;
        let text = text_inputs(cfg, &rec, &item.id, spec.dataset_name, spec.classes, client, spec.cache)?;
        let answer: Vec<usize> = match (spec.with_answer, label) {
            (true, Some(l)) => vec![labels[l]],
            (true, None) => {
                return Err(CliError::Data(format!("item `{}` has no label", item.id)));
            }
            _ => Vec::new(),
        };
        let instr_span: &[usize] = if answer.is_empty() { &[] } else { &instr };
        let seq = HybridSequence::assemble(
            &text.tokens,
            cfg.stage2.star.experts,
            &tokens,
            cfg.stage2.backbone.v_text,
            cfg.stage2.backbone.v_eeg,
            instr_span,
            &answer,
        )?;
        out.push(Example {
            id: item.id.clone(),
            input: Stage2Input {
                seq,
                h_text: text.embedding,
                z,
            },
            label,
        });
    }
    Ok(out)
}

pub fn meta_value(meta: &CheckpointMeta) -> Value {
    serde_json::to_value(meta).expect("meta serializes")
}
