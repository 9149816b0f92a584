//! VLM client: prompt construction, response parsing and backends.
//!
//! Speaks a chat-completions style HTTP JSON protocol. Two backends share
//! one interface: a live HTTP backend configured through the
//! `VISION_VLM_ENDPOINT` / `VISION_VLM_KEY` environment variables, and a
//! replay backend that serves recorded responses from a fixture directory
//! keyed by a stable request digest. The whole test suite runs on replay;
//! nothing here requires a network to be exercised.
//!
//! Parsing is deliberately forgiving about the envelope (code fences,
//! prose preambles) and strict about the payload: invalid proposal entries
//! are dropped with a warning rather than rejecting the whole response.

use crate::roi::{EnrichedRoi, RoiProposal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Prompt profiles shipped with the crate, as versioned text assets.
const PROPOSAL_SYSTEM: &str = include_str!("../assets/prompts/proposal_system.txt");
const PROPOSAL_USER: &str = include_str!("../assets/prompts/proposal_user.txt");
const ASSESSMENT_SYSTEM: &str = include_str!("../assets/prompts/assessment_system.txt");
const ASSESSMENT_USER: &str = include_str!("../assets/prompts/assessment_user.txt");

/// Maximum length of a one-line defect description; longer model output is
/// truncated rather than rejected.
pub const MAX_DESCRIPTION_CHARS: usize = 280;

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("unknown prompt profile '{0}'")]
    UnknownProfile(String),
    #[error("no parsable JSON payload in the model output")]
    NoParsableJson,
    #[error("unknown assessment label '{0}'")]
    UnknownLabel(String),
    #[error("malformed assessment record: {0}")]
    InvalidRecord(String),
    #[error("assessment requires at least one close-up image")]
    MissingCloseups,
    #[error("no fixture for request digest {digest}")]
    FixtureMiss { digest: String },
    #[error("fixture directory error: {0}")]
    FixtureIo(String),
    #[error("backend transport error: {0}")]
    Transport(String),
    #[error("missing environment variable {0}")]
    MissingEnv(&'static str),
}

/// One chat message; `content` is plain text, image payloads are attached
/// by the backend from the request's `image_refs`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// A proposal query to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalRequest {
    pub image_ref: String,
    pub prompt_profile: String,
    pub max_rois: u32,
}

/// A fully built backend request. The digest key that identifies it in the
/// fixture store covers (profile, image refs, max_rois) and is insensitive
/// to field ordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VlmRequest {
    pub profile: String,
    pub image_refs: Vec<String>,
    pub max_rois: u32,
    pub messages: Vec<ChatMessage>,
}

impl VlmRequest {
    pub fn digest(&self) -> String {
        request_digest(&self.profile, &self.image_refs, self.max_rois)
    }
}

/// Stable digest over the semantic request fields. Fields are canonicalized
/// through a sorted map so semantically equal requests share a key.
pub fn request_digest(profile: &str, image_refs: &[String], max_rois: u32) -> String {
    let mut fields = BTreeMap::new();
    fields.insert("image_refs", image_refs.join("\u{1f}"));
    fields.insert("max_rois", max_rois.to_string());
    fields.insert("profile", profile.to_string());
    let mut hasher = Sha256::new();
    for (k, v) in &fields {
        hasher.update(k.as_bytes());
        hasher.update(b"=");
        hasher.update(v.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// Validated proposals plus the verbatim model output for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalResponse {
    pub proposals: Vec<RoiProposal>,
    pub raw: String,
    /// One entry per dropped or suspicious item.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssessmentResult {
    Confirmed,
    #[serde(rename = "Partially Confirmed")]
    PartiallyConfirmed,
    #[serde(rename = "Not Confirmed")]
    NotConfirmed,
}

/// Post-re-imaging verdict for one ROI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentRecord {
    pub original_reason: String,
    pub result: AssessmentResult,
    /// One-line defect description; present exactly when the result is not
    /// `NotConfirmed`.
    pub description: Option<String>,
}

/// Build the proposal message sequence for a profile.
///
/// Only proposal profiles are valid here; the assessment prompt has its own
/// builder. The prompt text is intentionally general and names no defect
/// taxonomy, which in practice widens hypothesis generation.
pub fn build_proposal_prompt(profile: &str, max_rois: u32) -> Result<Vec<ChatMessage>, VlmError> {
    if profile != "default" {
        return Err(VlmError::UnknownProfile(profile.to_string()));
    }
    Ok(vec![
        ChatMessage {
            role: "system".into(),
            content: PROPOSAL_SYSTEM.trim_end().to_string(),
        },
        ChatMessage {
            role: "user".into(),
            content: PROPOSAL_USER
                .replace("{max_rois}", &max_rois.to_string())
                .trim_end()
                .to_string(),
        },
    ])
}

/// Build the assessment message sequence for one ROI's rationale and its
/// close-up crops.
pub fn build_assessment_prompt(original_reason: &str, n_crops: usize) -> Vec<ChatMessage> {
    vec![
        ChatMessage {
            role: "system".into(),
            content: ASSESSMENT_SYSTEM.trim_end().to_string(),
        },
        ChatMessage {
            role: "user".into(),
            content: ASSESSMENT_USER
                .replace("{reason}", original_reason)
                .replace("{n_crops}", &n_crops.to_string())
                .trim_end()
                .to_string(),
        },
    ]
}

/// Find the first parsable JSON value in free text that starts with the
/// given delimiter, tolerating code fences and prose around it.
fn first_json_value(raw: &str, open: char) -> Option<Value> {
    for (i, c) in raw.char_indices() {
        if c != open {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        if let Some(Ok(value)) = stream.next() {
            return Some(value);
        }
    }
    None
}

/// Parse proposals out of arbitrary model text.
///
/// Extracts the first JSON array, validates each entry against the proposal
/// schema and drops invalid entries with a warning. Total over arbitrary
/// input: either a (possibly empty) response or `NoParsableJson`.
pub fn parse_proposals(raw: &str) -> Result<ProposalResponse, VlmError> {
    let Some(Value::Array(items)) = first_json_value(raw, '[') else {
        return Err(VlmError::NoParsableJson);
    };
    let mut proposals = Vec::new();
    let mut warnings = Vec::new();
    for (i, item) in items.into_iter().enumerate() {
        match serde_json::from_value::<RoiProposal>(item) {
            Ok(p) => match p.validate() {
                Ok(()) => proposals.push(p),
                Err(e) => warnings.push(format!("entry {i} dropped: {e}")),
            },
            Err(e) => warnings.push(format!("entry {i} dropped: {e}")),
        }
    }
    Ok(ProposalResponse {
        proposals,
        raw: raw.to_string(),
        warnings,
    })
}

/// Check the calibrated-confidence convention: when the prompt asked for
/// follow-up probabilities the confidences should sum to 1 within 0.01.
/// Returns a warning string instead of mutating anything; confidences are
/// validated, never renormalized.
pub fn calibration_warning(response: &ProposalResponse) -> Option<String> {
    if response.proposals.is_empty() {
        return None;
    }
    let sum: f64 = response.proposals.iter().map(|p| p.confidence).sum();
    if (sum - 1.0).abs() > 0.01 {
        Some(format!(
            "confidences sum to {sum:.3}, expected 1.00 +/- 0.01"
        ))
    } else {
        None
    }
}

fn canonical_label(label: &str) -> Result<AssessmentResult, VlmError> {
    let folded = label
        .to_lowercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    match folded.as_str() {
        "confirmed" => Ok(AssessmentResult::Confirmed),
        "partially confirmed" => Ok(AssessmentResult::PartiallyConfirmed),
        "not confirmed" => Ok(AssessmentResult::NotConfirmed),
        _ => Err(VlmError::UnknownLabel(label.to_string())),
    }
}

/// Parse the strict-JSON assessment record out of model text. The
/// `original_reason` stored in the returned record is the caller's, not the
/// model's echo, so the audit trail always refers to the actual hypothesis.
pub fn parse_assessment(raw: &str, original_reason: &str) -> Result<AssessmentRecord, VlmError> {
    let Some(Value::Object(obj)) = first_json_value(raw, '{') else {
        return Err(VlmError::NoParsableJson);
    };
    let label = obj
        .get("result")
        .or_else(|| obj.get("label"))
        .and_then(Value::as_str)
        .ok_or_else(|| VlmError::InvalidRecord("missing 'result'".into()))?;
    let result = canonical_label(label)?;
    let description = match result {
        AssessmentResult::NotConfirmed => None,
        _ => {
            let text = obj
                .get("description")
                .and_then(Value::as_str)
                .ok_or_else(|| {
                    VlmError::InvalidRecord("missing 'description' for a confirmed result".into())
                })?;
            Some(text.chars().take(MAX_DESCRIPTION_CHARS).collect())
        }
    };
    Ok(AssessmentRecord {
        original_reason: original_reason.to_string(),
        result,
        description,
    })
}

/// A completion backend. Calls are independent; handles are shareable.
pub trait VlmBackend {
    fn complete(&self, req: &VlmRequest) -> Result<String, VlmError>;
}

/// Run a proposal query against a backend and parse the result.
pub fn propose(
    backend: &dyn VlmBackend,
    request: &ProposalRequest,
) -> Result<ProposalResponse, VlmError> {
    let messages = build_proposal_prompt(&request.prompt_profile, request.max_rois)?;
    let req = VlmRequest {
        profile: request.prompt_profile.clone(),
        image_refs: vec![request.image_ref.clone()],
        max_rois: request.max_rois,
        messages,
    };
    parse_proposals(&backend.complete(&req)?)
}

/// Run an assessment query for an enriched ROI against a backend.
pub fn assess(
    original: &EnrichedRoi,
    closeup_refs: &[String],
    backend: &dyn VlmBackend,
) -> Result<AssessmentRecord, VlmError> {
    if closeup_refs.is_empty() {
        return Err(VlmError::MissingCloseups);
    }
    let reason = &original.proposal.reason;
    let req = VlmRequest {
        profile: "assessment".into(),
        image_refs: closeup_refs.to_vec(),
        max_rois: 1,
        messages: build_assessment_prompt(reason, closeup_refs.len()),
    };
    parse_assessment(&backend.complete(&req)?, reason)
}

/// Deterministic fixture-driven backend: one file per request digest
/// containing the verbatim response body. Never touches the network.
pub struct ReplayBackend {
    dir: PathBuf,
}

impl ReplayBackend {
    pub fn new(fixture_dir: impl AsRef<Path>) -> Result<Self, VlmError> {
        let dir = fixture_dir.as_ref().to_path_buf();
        if !dir.is_dir() {
            return Err(VlmError::FixtureIo(format!(
                "{} is not a directory",
                dir.display()
            )));
        }
        Ok(Self { dir })
    }

    pub fn fixture_path(&self, req: &VlmRequest) -> PathBuf {
        self.dir.join(format!("{}.txt", req.digest()))
    }

    /// Record a response body under the request's digest, for authoring
    /// fixtures from synthetic scenes or live sessions.
    pub fn write_fixture(&self, req: &VlmRequest, body: &str) -> Result<PathBuf, VlmError> {
        let path = self.fixture_path(req);
        std::fs::write(&path, body).map_err(|e| VlmError::FixtureIo(e.to_string()))?;
        Ok(path)
    }
}

impl VlmBackend for ReplayBackend {
    fn complete(&self, req: &VlmRequest) -> Result<String, VlmError> {
        let path = self.fixture_path(req);
        std::fs::read_to_string(&path).map_err(|_| VlmError::FixtureMiss {
            digest: req.digest(),
        })
    }
}

/// Live HTTP backend speaking the chat-completions JSON shape.
///
/// Image refs that resolve to readable files are inlined as base64 data
/// URLs on the last user message. One retry with jitter; 60 s timeout per
/// call, matching observed round-trip budgets on field links.
pub struct LiveBackend {
    endpoint: String,
    key: String,
    model: String,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn from_env() -> Result<Self, VlmError> {
        let endpoint = std::env::var("VISION_VLM_ENDPOINT")
            .map_err(|_| VlmError::MissingEnv("VISION_VLM_ENDPOINT"))?;
        let key =
            std::env::var("VISION_VLM_KEY").map_err(|_| VlmError::MissingEnv("VISION_VLM_KEY"))?;
        let model = std::env::var("VISION_VLM_MODEL").unwrap_or_else(|_| "default".to_string());
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(60))
            .build()
            .map_err(|e| VlmError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint,
            key,
            model,
            client,
        })
    }

    fn payload(&self, req: &VlmRequest) -> Value {
        use base64::Engine;
        let mut messages: Vec<Value> = Vec::new();
        for (i, msg) in req.messages.iter().enumerate() {
            let is_last = i + 1 == req.messages.len();
            if is_last && msg.role == "user" && !req.image_refs.is_empty() {
                let mut parts = vec![serde_json::json!({
                    "type": "text",
                    "text": msg.content,
                })];
                for image_ref in &req.image_refs {
                    if let Ok(bytes) = std::fs::read(image_ref) {
                        let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
                        parts.push(serde_json::json!({
                            "type": "image_url",
                            "image_url": { "url": format!("data:image/png;base64,{b64}") },
                        }));
                    }
                }
                messages.push(serde_json::json!({ "role": msg.role, "content": parts }));
            } else {
                messages.push(serde_json::json!({ "role": msg.role, "content": msg.content }));
            }
        }
        serde_json::json!({ "model": self.model, "messages": messages })
    }

    fn call_once(&self, body: &Value) -> Result<String, VlmError> {
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.key)
            .json(body)
            .send()
            .map_err(|e| VlmError::Transport(e.to_string()))?
            .error_for_status()
            .map_err(|e| VlmError::Transport(e.to_string()))?;
        let value: Value = response
            .json()
            .map_err(|e| VlmError::Transport(e.to_string()))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| VlmError::Transport("response has no message content".into()))
    }
}

impl VlmBackend for LiveBackend {
    fn complete(&self, req: &VlmRequest) -> Result<String, VlmError> {
        let body = self.payload(req);
        match self.call_once(&body) {
            Ok(text) => Ok(text),
            Err(first) => {
                let jitter_ms = 200 + (rand::random::<u64>() % 800);
                std::thread::sleep(std::time::Duration::from_millis(jitter_ms));
                self.call_once(&body).map_err(|second| {
                    VlmError::Transport(format!("{first}; retry failed: {second}"))
                })
            }
        }
    }
}
