//! Shared building blocks: preprocessing, montage lookup, profiling and
//! synthetic corpora.

use std::path::Path;

use eegtok_core::profiler::{
    self, build_prompt, extract, verbalize, HttpClient, LlmClient, PhysicalFeatures, SemanticProfile,
    StubClient, TaskMeta,
};
use eegtok_core::signal::{bandpass_notch, resample, robust_scale, write_container, FilterSpec, Recording};
use eegtok_core::synth::{class_recording, random_mixture, SynthConfig};
use eegtok_core::topology::{Hierarchy, Montage};
use rand::Rng;
use serde_json::{json, Value};

use crate::config::{LlmConfig, PreprocessConfig};
use crate::dataset::{Dataset, DatasetIndex, DatasetItem, Split};
use crate::error::{CliError, CliResult};

/// Resample, band-pass with notch, then robust scaling. Errors name the
/// stage that failed.
pub fn preprocess(rec: &Recording, cfg: &PreprocessConfig) -> CliResult<(Recording, Value)> {
    let from_fs = rec.fs();
    let r = resample(rec, cfg.fs).map_err(|e| CliError::from(e).at("resample"))?;
    let spec = FilterSpec {
        low: cfg.low,
        high: cfg.high,
        notch: cfg.notch,
    };
    let r = bandpass_notch(&r, &spec).map_err(|e| CliError::from(e).at("filter"))?;
    let scaled = robust_scale(&r).map_err(|e| CliError::from(e).at("robust_scale"))?;
    let degenerate: Vec<&str> = r
        .channels()
        .iter()
        .zip(&scaled.degenerate)
        .filter(|(_, &d)| d)
        .map(|(c, _)| c.as_str())
        .collect();
    let provenance = json!({
        "steps": [
            {"op": "resample", "from_fs": from_fs, "to_fs": cfg.fs},
            {"op": "bandpass_notch", "low": cfg.low, "high": cfg.high, "notch": cfg.notch,
             "order": eegtok_core::signal::BUTTER_ORDER, "notch_q": eegtok_core::signal::NOTCH_Q,
             "zero_phase": true},
            {"op": "robust_scale", "center": "median", "scale": "iqr", "degenerate_channels": degenerate},
        ]
    });
    Ok((scaled.recording, provenance))
}

pub fn hierarchy_for(channels: &[String]) -> CliResult<Hierarchy> {
    let m = Montage::standard(channels)?;
    Ok(Hierarchy::build(&m)?)
}

/// Client chosen by configuration: HTTP when an endpoint is set, else the
/// offline stub.
pub fn llm_client(cfg: &LlmConfig) -> Box<dyn LlmClient> {
    match &cfg.endpoint {
        Some(url) if url != "stub" => {
            let mut c = HttpClient::new(url.clone());
            c.model = cfg.model.clone();
            c.token = std::env::var(&cfg.token_env).ok().filter(|t| !t.is_empty());
            c.timeout = std::time::Duration::from_secs(cfg.timeout_secs);
            c.max_tokens = cfg.max_tokens;
            Box::new(c)
        }
        _ => Box::new(StubClient),
    }
}

pub struct ProfileRun {
    pub features: PhysicalFeatures,
    pub prompt: String,
    pub profile: SemanticProfile,
    pub retries: usize,
}

pub fn profile_recording(
    rec: &Recording,
    sample_name: &str,
    dataset_name: &str,
    labels: &[String],
    top_k: usize,
    client: &mut dyn LlmClient,
) -> CliResult<ProfileRun> {
    let hier = hierarchy_for(rec.channels())?;
    let features = extract(rec, &hier, top_k)?;
    let meta = TaskMeta {
        sample_name: sample_name.to_string(),
        dataset_name: dataset_name.to_string(),
        task_logic: None,
        num_channels: rec.n_channels(),
        num_points: rec.n_samples(),
    };
    let prompt = build_prompt(&meta, &verbalize(&features), labels)?;
    let out = profiler::profile(&prompt, client)?;
    Ok(ProfileRun {
        features,
        prompt,
        profile: out.profile,
        retries: out.retries,
    })
}

/// Profile text for the language model, summary first so truncation keeps
/// the densest fields.
pub fn profile_text(p: &SemanticProfile) -> String {
    [
        &p.feature_summary,
        &p.physical_features,
        &p.spatial_features,
        &p.quality_notes,
        &p.task_description,
        &p.prior_knowledge,
    ]
    .iter()
    .map(|s| s.as_str())
    .collect::<Vec<_>>()
    .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Labeled,
    Mixture,
}

pub const SYNTH_DATASET: &str = "SYNTH";

/// Writes a synthetic dataset of containers under `out`. Labelled corpora
/// get `test_per_class` held-out recordings per class.
pub fn write_synth(
    out: &Path,
    kind: SynthKind,
    cfg: &SynthConfig,
    test_per_class: usize,
    rng: &mut impl Rng,
) -> CliResult<Dataset> {
    let mut items = Vec::new();
    let mut n = 0;
    let mut push = |rec: Recording, label: Option<usize>, split: Split| -> CliResult<()> {
        let id = format!("rec_{n:04}");
        write_container(&out.join(&id), &rec, json!({"steps": [{"op": "synth"}]}))?;
        items.push(DatasetItem {
            id: id.clone(),
            path: id,
            label,
            split,
        });
        n += 1;
        Ok(())
    };
    let classes = match kind {
        SynthKind::Labeled => {
            for (reps, split) in [(cfg.per_class, Split::Train), (test_per_class, Split::Test)] {
                for _ in 0..reps {
                    for k in 0..cfg.classes {
                        push(class_recording(cfg, k, rng)?, Some(k), split)?;
                    }
                }
            }
            (0..cfg.classes).map(|k| format!("cls{k}")).collect()
        }
        SynthKind::Mixture => {
            for _ in 0..cfg.per_class {
                push(random_mixture(cfg, rng)?, None, Split::Train)?;
            }
            Vec::new()
        }
    };
    let ds = Dataset {
        root: out.to_path_buf(),
        index: DatasetIndex {
            name: SYNTH_DATASET.into(),
            classes,
            items,
        },
    };
    ds.write_index()?;
    Ok(ds)
}
