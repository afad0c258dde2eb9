//! Language-model clients and profile parsing with re-ask retries.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::prompt::{features_section, PROFILE_KEYS};
use super::{ProfileError, ProfileResult};

/// Retries after the first malformed reply.
pub const MAX_RETRIES: usize = 2;

pub const REASK_SUFFIX: &str = "\n\nYour previous reply was not a JSON object with the six required keys. \
Respond again with only that JSON object and nothing else.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticProfile {
    #[serde(rename = "Dataset Task Description")]
    pub task_description: String,
    #[serde(rename = "Task Related Prior Knowledge")]
    pub prior_knowledge: String,
    #[serde(rename = "Signal Physical Features")]
    pub physical_features: String,
    #[serde(rename = "Spatial Distribution Features")]
    pub spatial_features: String,
    #[serde(rename = "Data Quality Notes")]
    pub quality_notes: String,
    #[serde(rename = "Feature Summary")]
    pub feature_summary: String,
}

impl SemanticProfile {
    pub fn fields(&self) -> [(&'static str, &str); 6] {
        [
            (PROFILE_KEYS[0], &self.task_description),
            (PROFILE_KEYS[1], &self.prior_knowledge),
            (PROFILE_KEYS[2], &self.physical_features),
            (PROFILE_KEYS[3], &self.spatial_features),
            (PROFILE_KEYS[4], &self.quality_notes),
            (PROFILE_KEYS[5], &self.feature_summary),
        ]
    }

    /// All six values joined, for text embedding.
    pub fn joined(&self) -> String {
        self.fields().iter().map(|(_, v)| *v).collect::<Vec<_>>().join(" ")
    }
}

/// Parses the first JSON object in `text` as a profile; every key must be
/// present with a non-empty string value.
pub fn parse_profile(text: &str) -> Result<SemanticProfile, String> {
    let start = text.find('{').ok_or("no JSON object in reply")?;
    let end = text.rfind('}').ok_or("unterminated JSON object")?;
    if end < start {
        return Err("unterminated JSON object".into());
    }
    let obj: Map<String, Value> =
        serde_json::from_str(&text[start..=end]).map_err(|e| format!("invalid JSON: {e}"))?;
    for k in PROFILE_KEYS {
        match obj.get(k) {
            Some(Value::String(s)) if !s.trim().is_empty() => {}
            Some(_) => return Err(format!("key `{k}` is empty or not a string")),
            None => return Err(format!("missing key `{k}`")),
        }
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| e.to_string())
}

pub trait LlmClient {
    /// One completion for `prompt`; transport failures only.
    fn complete(&mut self, prompt: &str) -> ProfileResult<String>;
}

/// Deterministic offline client: builds a profile from the features block
/// of the prompt without any network access.
#[derive(Clone, Debug, Default)]
pub struct StubClient;

fn line_with<'a>(block: &'a str, prefix: &str) -> &'a str {
    block
        .lines()
        .find(|l| l.starts_with(prefix))
        .map(|l| l.trim())
        .unwrap_or("")
}

impl LlmClient for StubClient {
    fn complete(&mut self, prompt: &str) -> ProfileResult<String> {
        let block = features_section(prompt).unwrap_or("");
        let logic = prompt
            .lines()
            .find_map(|l| l.strip_prefix("- Task Logic: "))
            .unwrap_or("EEG analysis");
        let temporal = line_with(block, "1. Temporal Stats");
        let spectral = line_with(block, "2. Spectral Features");
        let dominant = line_with(block, "Dominant band");
        let top: Vec<&str> = block.lines().filter(|l| l.starts_with("Channel ")).collect();
        let quality = line_with(block, "4. Data Quality");
        let or = |s: &str, d: &str| if s.is_empty() { d.to_string() } else { s.to_string() };
        let profile = SemanticProfile {
            task_description: format!(
                "This recording belongs to a {logic} task; the paradigm records scalp EEG under the dataset protocol."
            ),
            prior_knowledge: "Scalp EEG rhythms are conventionally split into Delta, Theta, Alpha, Beta and Gamma bands whose balance varies with vigilance and cortical state.".into(),
            physical_features: or(format!("{temporal} {spectral}").trim(), "No physical features supplied."),
            spatial_features: or(&top.join(" "), "No representative channels identified."),
            quality_notes: or(quality, "No quality notes."),
            feature_summary: or(dominant, "No dominant band identified."),
        };
        Ok(serde_json::to_string_pretty(&profile).expect("plain strings serialize"))
    }
}

/// Blocking HTTP client posting `{prompt, max_tokens, temperature: 0}`.
#[derive(Clone, Debug)]
pub struct HttpClient {
    pub endpoint: String,
    pub model: Option<String>,
    pub token: Option<String>,
    pub timeout: Duration,
    pub max_tokens: usize,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: None,
            token: None,
            timeout: Duration::from_secs(60),
            max_tokens: 1024,
        }
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        let mut body = json!({
            "prompt": prompt,
            "max_tokens": self.max_tokens,
            "temperature": 0,
        });
        if let Some(m) = &self.model {
            body["model"] = Value::String(m.clone());
        }
        body
    }
}

/// The completion text inside common response envelopes, else the raw body.
pub fn response_text(body: &str) -> String {
    let Ok(v) = serde_json::from_str::<Value>(body) else {
        return body.to_string();
    };
    let choice = v.get("choices").and_then(|c| c.get(0));
    let candidates = [
        choice.and_then(|c| c.get("message")).and_then(|m| m.get("content")),
        choice.and_then(|c| c.get("text")),
        v.get("text"),
        v.get("completion"),
        v.get("response"),
        v.get("content"),
    ];
    let found = candidates
        .into_iter()
        .flatten()
        .find_map(|c| c.as_str().map(str::to_string));
    found.unwrap_or_else(|| body.to_string())
}

impl LlmClient for HttpClient {
    fn complete(&mut self, prompt: &str) -> ProfileResult<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send(self.request_body(prompt).to_string())
            .map_err(|e| ProfileError::Transport(format!("{}: {e}", self.endpoint)))?;
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProfileError::Transport(format!("{}: {e}", self.endpoint)))?;
        Ok(response_text(&body))
    }
}

/// Parsed profile and the number of re-asks it took.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileOutcome {
    pub profile: SemanticProfile,
    pub retries: usize,
}

/// Asks `client` for a profile, re-asking up to [`MAX_RETRIES`] times when
/// the reply does not parse.
pub fn profile(prompt: &str, client: &mut dyn LlmClient) -> ProfileResult<ProfileOutcome> {
    let mut ask = prompt.to_string();
    let mut last = (String::new(), String::new());
    for retries in 0..=MAX_RETRIES {
        let raw = client.complete(&ask)?;
        match parse_profile(&raw) {
            Ok(profile) => return Ok(ProfileOutcome { profile, retries }),
            Err(msg) => last = (raw, msg),
        }
        ask = format!("{prompt}{REASK_SUFFIX}");
    }
    Err(ProfileError::Parse {
        msg: last.1,
        raw: last.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scripted(Vec<String>, usize);

    impl LlmClient for Scripted {
        fn complete(&mut self, _: &str) -> ProfileResult<String> {
            self.1 += 1;
            Ok(self.0.remove(0))
        }
    }

    fn valid() -> String {
        let v: Map<String, Value> = PROFILE_KEYS
            .iter()
            .map(|k| (k.to_string(), Value::String(format!("{k} text"))))
            .collect();
        Value::Object(v).to_string()
    }

    #[test]
    fn succeeds_after_two_malformed_replies() {
        let mut c = Scripted(vec!["sorry".into(), "{\"a\": 1}".into(), valid()], 0);
        let out = profile("p", &mut c).unwrap();
        assert_eq!(out.retries, 2);
        assert_eq!(out.profile.feature_summary, "Feature Summary text");
    }

    #[test]
    fn persistent_garbage_carries_raw_text() {
        let mut c = Scripted(vec!["x".into(), "y".into(), "no json here".into()], 0);
        match profile("p", &mut c) {
            Err(ProfileError::Parse { raw, .. }) => assert_eq!(raw, "no json here"),
            other => panic!("{other:?}"),
        }
        assert_eq!(c.1, 3);
    }

    #[test]
    fn empty_value_rejected() {
        let mut v: Value = serde_json::from_str(&valid()).unwrap();
        v["Data Quality Notes"] = Value::String(" ".into());
        assert!(parse_profile(&v.to_string()).is_err());
    }

    #[test]
    fn json_inside_prose_is_found() {
        let text = format!("Here you go:\n```json\n{}\n```", valid());
        assert!(parse_profile(&text).is_ok());
    }

    #[test]
    fn envelopes_are_unwrapped() {
        assert_eq!(response_text(r#"{"choices":[{"message":{"content":"hi"}}]}"#), "hi");
        assert_eq!(response_text(r#"{"choices":[{"text":"yo"}]}"#), "yo");
        assert_eq!(response_text("plain"), "plain");
    }

    #[test]
    fn request_body_shape() {
        let mut c = HttpClient::new("http://x");
        c.model = Some("m".into());
        let b = c.request_body("hello");
        assert_eq!(b["prompt"], "hello");
        assert_eq!(b["temperature"], 0);
        assert_eq!(b["model"], "m");
        assert!(b["max_tokens"].is_u64());
    }
}
