//! Hard-prompt template and the label-leak guard.

use serde::{Deserialize, Serialize};

use super::{ProfileError, ProfileResult};

/// The six keys of a semantic profile, in output order.
pub const PROFILE_KEYS: [&str; 6] = [
    "Dataset Task Description",
    "Task Related Prior Knowledge",
    "Signal Physical Features",
    "Spatial Distribution Features",
    "Data Quality Notes",
    "Feature Summary",
];

pub const SECTION_HEADERS: [&str; 5] = [
    "[System Instruction]",
    "[Data Summary]",
    "[Verbalized Features]",
    "[Analysis Requirements]",
    "[Output Format]",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub sample_name: String,
    pub dataset_name: String,
    /// Filled from [`task_logic`] when absent.
    #[serde(default)]
    pub task_logic: Option<String>,
    pub num_channels: usize,
    pub num_points: usize,
}

/// Task family for well-known corpora; anything else is generic.
pub fn task_logic(dataset: &str) -> &'static str {
    match dataset.trim().to_ascii_uppercase().as_str() {
        "HMC" | "SLEEP-EDF" | "SLEEPEDF" => "Sleep Staging",
        "TUSZ" | "CHB-MIT" => "Seizure Detection",
        "TUAB" => "Abnormal Detection",
        "TUEV" => "Event Type Classification",
        "SEED" | "SEED-V" | "DEAP" => "Emotion Recognition",
        "BCIC-IV-2A" | "BCIC2A" | "PHYSIONET-MI" => "Motor Imagery Classification",
        "WORKLOAD" | "MENTAL-ARITHMETIC" => "Mental Workload Assessment",
        _ => "General EEG Characterization",
    }
}

/// Case-insensitive whole-word search; `label` may span several words.
pub fn contains_word(text: &str, label: &str) -> bool {
    let label = label.trim().to_lowercase();
    if label.is_empty() {
        return false;
    }
    let hay = text.to_lowercase();
    let is_word = |c: Option<char>| c.is_some_and(char::is_alphanumeric);
    let mut from = 0;
    while let Some(pos) = hay[from..].find(&label) {
        let start = from + pos;
        let end = start + label.len();
        if !is_word(hay[..start].chars().next_back()) && !is_word(hay[end..].chars().next()) {
            return true;
        }
        from = start + label.chars().next().map_or(1, char::len_utf8);
    }
    false
}

fn guard(field: &str, value: &str, labels: &[String]) -> ProfileResult<()> {
    match labels.iter().find(|l| contains_word(value, l)) {
        Some(l) => Err(ProfileError::LabelLeak {
            label: l.clone(),
            field: field.to_string(),
        }),
        None => Ok(()),
    }
}

/// Assembles the five-section prompt around `s_desc`. Refuses if any label
/// from `labels` appears in the metadata or anywhere in the result.
pub fn build_prompt(meta: &TaskMeta, s_desc: &str, labels: &[String]) -> ProfileResult<String> {
    let logic = meta
        .task_logic
        .clone()
        .unwrap_or_else(|| task_logic(&meta.dataset_name).to_string());
    guard("sample_name", &meta.sample_name, labels)?;
    guard("dataset_name", &meta.dataset_name, labels)?;
    guard("task_logic", &logic, labels)?;

    let keys = PROFILE_KEYS;
    let prompt = format!(
        "{sys}\n\
You are a professional EEG signal data analyst. Please generate a purely objective, technical data report based on the provided EEG signal statistics.\n\
Core Principle: The report must be divided into two parts. Part 1: General textbook-style background introduction; Part 2: Objective physical feature description.\n\
Strictly PROHIBITED to perform clinical diagnosis, disease judgment, or infer specific classification labels.\n\
\n\
{data}\n\
- Sample Name: {sample}\n\
- Dataset Name: {dataset}\n\
- Task Logic: {logic}\n\
- Channel Count: {channels}    Time Series Length: {points}\n\
\n\
{feat}\n\
{desc}\n\
{req}\n\
1. Dataset Task Description: Describe the general experimental paradigm.\n\
2. Task-Related Prior Knowledge: List relevant neuroscience background.\n\
3. Signal Physical Features: Objectively describe time, frequency, and spatial features.\n\
\n\
{fmt}\n\
Please respond strictly in the following JSON format:\n\
{{\n\
\x20\x20\"{k0}\": \"General experimental paradigm introduction...\",\n\
\x20\x20\"{k1}\": \"General medical/neuroscience background\",\n\
\x20\x20\"{k2}\": \"Purely objective description...\",\n\
\x20\x20\"{k3}\": \"Prominent brain regions\",\n\
\x20\x20\"{k4}\": \"Outlier channels or noise notes\",\n\
\x20\x20\"{k5}\": \"Morphology summary (NO diagnosis)\"\n\
}}\n",
        sys = SECTION_HEADERS[0],
        data = SECTION_HEADERS[1],
        feat = SECTION_HEADERS[2],
        req = SECTION_HEADERS[3],
        fmt = SECTION_HEADERS[4],
        sample = meta.sample_name,
        dataset = meta.dataset_name,
        channels = meta.num_channels,
        points = meta.num_points,
        desc = s_desc.trim_end(),
        k0 = keys[0],
        k1 = keys[1],
        k2 = keys[2],
        k3 = keys[3],
        k4 = keys[4],
        k5 = keys[5],
    );
    guard("prompt", &prompt, labels)?;
    Ok(prompt)
}

/// The verbalized-features block of a prompt built by [`build_prompt`].
pub fn features_section(prompt: &str) -> Option<&str> {
    let start = prompt.find(SECTION_HEADERS[2])? + SECTION_HEADERS[2].len();
    let end = prompt[start..].find(SECTION_HEADERS[3])? + start;
    Some(prompt[start..end].trim())
}
