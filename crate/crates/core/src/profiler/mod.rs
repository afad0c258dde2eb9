//! Knowledge-anchored semantic profiling: physical features, their
//! verbalization, a label-free prompt, and an external language model.

mod client;
mod features;
mod prompt;
mod verbalize;

use thiserror::Error;

pub use client::{
    parse_profile, profile, response_text, HttpClient, LlmClient, ProfileOutcome,
    SemanticProfile, StubClient, MAX_RETRIES, REASK_SUFFIX,
};
pub use features::{
    extract, phi_spat, phi_spec, phi_stat, top_k, welch, PhysicalFeatures, Psd, RegionSummary,
    RepresentativeChannel, SpatialRecord, SpectralRecord, TemporalStats, BANDS, DEFAULT_TOP_K,
    WELCH_SECONDS,
};
pub use prompt::{
    build_prompt, contains_word, features_section, task_logic, TaskMeta, PROFILE_KEYS,
    SECTION_HEADERS,
};
pub use verbalize::{sig4, verbalize, QUALITY_HEADING, SPATIAL_HEADING, SPECTRAL_HEADING, TEMPORAL_HEADING};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("label `{label}` would leak through {field}")]
    LabelLeak { label: String, field: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed profile after retries ({msg}); raw reply: {raw}")]
    Parse { msg: String, raw: String },
}

pub type ProfileResult<T> = Result<T, ProfileError>;
