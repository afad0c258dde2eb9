//! Non-training commands.

use std::path::{Path, PathBuf};

use eegtok_core::metrics::{report, EvalBatch, EvalReport};
use eegtok_core::profiler::{self, build_prompt, extract, verbalize, TaskMeta};
use eegtok_core::refiner::attention_by_channel;
use eegtok_core::signal::{load_recording, write_container};
use eegtok_core::synth::SynthConfig;
use eegtok_core::training::{Stage1Model, Stage2Input};
use eegtok_core::vq::{write_token_dump, TokenSequence};
use eegtok_core::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{CliError, CliResult};
use crate::models::{
    build, check_channels, label_tokens, load_stage2, patched, prepare_examples, read_meta, restore,
    CheckpointMeta, ExampleSpec, Stage,
};
use crate::pipeline::{hierarchy_for, llm_client, preprocess, write_synth, SynthKind};
use crate::rundir::resolve_checkpoint;

/// Reads a container or CSV, runs the preprocessing chain and writes a
/// container to `out`.
pub fn cmd_preprocess(cfg: &RunConfig, input: &Path, out: &Path) -> CliResult<()> {
    let rec = load_recording(input).map_err(|e| CliError::from(e).at("read"))?;
    let (clean, provenance) = preprocess(&rec, &cfg.preprocess)?;
    write_container(out, &clean, provenance).map_err(|e| CliError::from(e).at("write"))?;
    Ok(())
}

/// Stage-1 parts of any checkpoint, with the channel layout it was trained on.
pub fn load_tokenizer(path: &Path) -> CliResult<(eegtok_core::ParamStore, Stage1Model, CheckpointMeta)> {
    let dir = resolve_checkpoint(path)?;
    let meta = read_meta(&dir)?;
    let with_stage2 = meta.stage != Stage::Vq;
    let mut m = build(&meta.config, with_stage2, meta.config.seed)?;
    if with_stage2 {
        m.attach_adapter_slots(&meta.config)?;
    }
    restore(&dir, &mut m.store, None)?;
    Ok((m.store, m.stage1, meta))
}

/// Token sequences of every recording in `input`, in dataset order.
pub fn tokenize_all(input: &Path, checkpoint: &Path) -> CliResult<(Vec<TokenSequence>, usize)> {
    let (store, stage1, meta) = load_tokenizer(checkpoint)?;
    let ds = Dataset::open(input)?;
    let hier = hierarchy_for(&meta.channels)?;
    let mut out = Vec::new();
    for item in ds.items(None) {
        let rec = ds.load(item)?;
        check_channels(&meta.channels, &rec, &item.id)?;
        let ps = patched(&rec, &meta.config)?;
        let idx = stage1.tokenize(&store, &hier, &ps)?;
        out.push(TokenSequence::new(idx, ps.channels, ps.patches)?);
    }
    Ok((out, meta.config.stage1.vq.codes))
}

pub fn cmd_tokenize(input: &Path, checkpoint: &Path, out: &Path) -> CliResult<()> {
    let (seqs, codes) = tokenize_all(input, checkpoint)?;
    if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    let mut buf = Vec::new();
    write_token_dump(&seqs, codes, &mut buf)?;
    std::fs::write(out, buf)?;
    Ok(())
}

/// Task description given to the profiler.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileMeta {
    #[serde(default)]
    pub sample_name: Option<String>,
    #[serde(default)]
    pub dataset_name: Option<String>,
    #[serde(default)]
    pub task_logic: Option<String>,
    /// Strings that must never reach the prompt.
    #[serde(default)]
    pub labels: Vec<String>,
}

pub fn read_profile_meta(path: &Path) -> CliResult<ProfileMeta> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Writes `prompt.txt`, `features.json` and `profile.json` into `out`.
pub fn cmd_profile(cfg: &RunConfig, input: &Path, meta: &ProfileMeta, out: &Path) -> CliResult<()> {
    let rec = load_recording(input)?;
    let hier = hierarchy_for(rec.channels())?;
    let features = extract(&rec, &hier, cfg.profile.top_k)?;
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "recording".into());
    let task = TaskMeta {
        sample_name: meta.sample_name.clone().unwrap_or(stem),
        dataset_name: meta.dataset_name.clone().unwrap_or_else(|| "UNNAMED".into()),
        task_logic: meta.task_logic.clone(),
        num_channels: rec.n_channels(),
        num_points: rec.n_samples(),
    };
    let prompt = build_prompt(&task, &verbalize(&features), &meta.labels)?;
    let mut client = llm_client(&cfg.llm);
    let outcome = profiler::profile(&prompt, client.as_mut())?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("prompt.txt"), &prompt)?;
    std::fs::write(
        out.join("features.json"),
        serde_json::to_string_pretty(&features).expect("features serialize"),
    )?;
    std::fs::write(
        out.join("profile.json"),
        serde_json::to_string_pretty(&outcome.profile).expect("profile serializes"),
    )?;
    Ok(())
}

/// Which dataset items an evaluation covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Test,
    Train,
    All,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub task: String,
    pub classes: Vec<String>,
    #[serde(flatten)]
    pub report: EvalReport,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub pred: usize,
    pub probs: Vec<f64>,
}

pub fn evaluate(checkpoint: &Path, data: &Path, split: EvalSplit) -> CliResult<EvalOutput> {
    let (m, meta, _) = load_stage2(checkpoint)?;
    if meta.stage != Stage::Sft {
        return Err(CliError::Dependency(format!(
            "evaluation needs a finished `sft` checkpoint, got `{}`",
            meta.stage.name()
        )));
    }
    let ds = Dataset::open(data)?;
    if ds.index.classes != meta.classes {
        return Err(CliError::Data(format!(
            "dataset classes {:?} do not match the checkpoint's {:?}",
            ds.index.classes, meta.classes
        )));
    }
    let labelled = match split {
        EvalSplit::Test => ds.labeled(Split::Test)?,
        EvalSplit::Train => ds.labeled(Split::Train)?,
        EvalSplit::All => {
            let mut v = ds.labeled(Split::Train)?;
            v.extend(ds.labeled(Split::Test)?);
            v
        }
    };
    if labelled.is_empty() {
        return Err(CliError::Data("no labelled items to evaluate".into()));
    }
    let cfg = &meta.config;
    let items: Vec<_> = labelled.iter().map(|&(i, l)| (i, Some(l))).collect();
    let mut client = llm_client(&cfg.llm);
    let spec = ExampleSpec {
        cfg,
        channels: &meta.channels,
        classes: &meta.classes,
        dataset_name: &ds.index.name,
        with_answer: true,
        cache: None,
    };
    let examples = prepare_examples(&m, &ds, &items, &spec, client.as_mut())?;
    let candidates = label_tokens(cfg, &meta.classes)?;
    let lm = m.stage2.as_ref().expect("stage-2 built");
    let mut predictions = Vec::with_capacity(examples.len());
    for ex in &examples {
        let (pred, probs) = lm.predict(&m.store, &ex.input, &candidates)?;
        predictions.push(Prediction {
            id: ex.id.clone(),
            label: ex.label.expect("labelled"),
            pred,
            probs,
        });
    }
    let labels: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    let preds: Vec<usize> = predictions.iter().map(|p| p.pred).collect();
    let scores: Vec<Vec<f64>> = predictions.iter().map(|p| p.probs.clone()).collect();
    let batch = EvalBatch::new(meta.classes.len(), labels, preds, Some(scores))?;
    Ok(EvalOutput {
        task: ds.index.name.clone(),
        classes: meta.classes.clone(),
        report: report(&batch)?,
        predictions,
    })
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, split: EvalSplit, out: &Path) -> CliResult<EvalOutput> {
    let r = evaluate(checkpoint, data, split)?;
    if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&r).expect("report serializes"))?;
    Ok(r)
}

/// Channel-normalised aggregation weights of one recording as
/// `(expert, channel, patch, weight)`.
pub fn attention_rows(checkpoint: &Path, input: &Path) -> CliResult<Vec<(usize, usize, usize, f64)>> {
    let (m, meta, _) = load_stage2(checkpoint)?;
    let ds = Dataset::open(input)?;
    let item = ds
        .items(None)
        .into_iter()
        .next()
        .ok_or_else(|| CliError::Data(format!("{} holds no recordings", input.display())))?;
    let spec = ExampleSpec {
        cfg: &meta.config,
        channels: &meta.channels,
        classes: &meta.classes,
        dataset_name: &ds.index.name,
        with_answer: false,
        cache: None,
    };
    let mut client = llm_client(&meta.config.llm);
    let ex = prepare_examples(&m, &ds, &[(item, None)], &spec, client.as_mut())?;
    let input: &Stage2Input = &ex[0].input;
    let lm = m.stage2.as_ref().expect("stage-2 built");
    let mut g = Graph::new();
    let out = lm.forward(&mut g, &m.store, input)?;
    let channels = meta.channels.len();
    let patches = input.seq.spans.eeg.len() / channels.max(1);
    Ok(attention_by_channel(&out.star.attention, channels, patches)?)
}

pub fn cmd_attn_export(checkpoint: &Path, input: &Path, out: &Path) -> CliResult<usize> {
    let rows = attention_rows(checkpoint, input)?;
    if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    let mut w = csv::Writer::from_path(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let csv_err = |e: csv::Error| CliError::Data(format!("attention csv: {e}"));
    w.write_record(["expert", "channel", "patch", "weight"]).map_err(csv_err)?;
    for (e, c, p, v) in &rows {
        w.write_record([e.to_string(), c.to_string(), p.to_string(), format!("{v:e}")])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows.len())
}

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub kind: SynthKind,
    pub channels: Vec<String>,
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub seconds: f64,
    pub fs: f64,
    pub noise: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            kind: SynthKind::Labeled,
            channels: d.channels,
            classes: d.classes,
            per_class: d.per_class,
            test_per_class: 4,
            seconds: d.seconds,
            fs: d.fs,
            noise: d.noise,
        }
    }
}

pub fn cmd_synth(seed: u64, opts: &SynthOptions, out: &Path) -> CliResult<Dataset> {
    let cfg = SynthConfig {
        channels: opts.channels.clone(),
        fs: opts.fs,
        seconds: opts.seconds,
        classes: opts.classes,
        per_class: opts.per_class,
        noise: opts.noise,
    };
    if opts.kind == SynthKind::Labeled && !(1..=eegtok_core::synth::CLASS_TONES.len()).contains(&opts.classes) {
        return Err(CliError::Config(format!(
            "synthetic classes must be in 1..={}",
            eegtok_core::synth::CLASS_TONES.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    write_synth(out, opts.kind, &cfg, opts.test_per_class, &mut rng)
}

/// Report path default: `<out>/eval.json`.
pub fn default_report(out: &Path) -> PathBuf {
    out.join("eval.json")
}

pub fn report_json(r: &EvalOutput) -> serde_json::Value {
    json!(r)
}
