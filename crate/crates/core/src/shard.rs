//! Post segmentation into verbatim, chronologically ordered shards.
//!
//! A teacher model proposes segments; [`validate_shards`] accepts only those
//! that are whitespace-normalized substrings of the body, at least
//! [`MIN_SHARD_WORDS`] words long, free of audience-address artifacts, and
//! positioned after the previously accepted shard.

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::corpus::Post;
use crate::gateway::{ChatMessage, ChatRequest, Gateway, GatewayError};
use crate::pipeline::EndpointConfig;

pub const MIN_SHARD_WORDS: usize = 3;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;

pub const DEFAULT_ARTIFACT_PATTERNS: &[&str] =
    &[r"has anyone", r"do any of you", r"edit:", r"update:"];

pub const SHARD_PROMPT: &str = "\
You are an AI assistant whose task is to segment Reddit posts into messages that will be sent to an AI chatbot.

Each message must give the AI a substantial \"hook\" to respond to. A \"hook\" must include at least one of:
- A complaint/problem
- Conflict
- Action taken
- Emotion
- Question
- Request for advice

If a fragment lacks a hook, merge it with an adjacent sentence that provides one. If a candidate segment does not include one of these elements, merge it with an adjacent segment until it does.

DO NOT add, remove, or change any words inside the message text. Each message must be an exact verbatim substring from the post (copy/paste only).

DO NOT include any Reddit-post artifacts:
- Any text that comes after a post update (e.g., \"Edit:\", \"Update:\", \"---\", etc.)
- Greetings
- Communal references: meaning any text addressed to the community/audience
  - Examples: \"Hello guys,\" \"Anyone else...,\" \"What would/did you do...,\" \"Has anyone...,\" \"Do any of you...\", \"Dads I need help!\"

Remove communal references even if they contain a question/hook; do not keep them to satisfy the hook requirement.

If removal leaves a fragment without a hook, merge it with adjacent non-communal text until it has a hook.

Output the segmented messages as a JSON array of strings. Output ONLY the JSON array, nothing else.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub post_id: String,
    pub index: usize,
    pub text: String,
    /// Byte offsets of the match in the whitespace-normalized body.
    pub match_start: usize,
    pub match_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NotSubstring,
    TooShort,
    OutOfOrder,
    ArtifactSuspect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub candidate: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardValidationReport {
    pub accepted: Vec<Shard>,
    pub rejected: Vec<Rejection>,
}

impl ShardValidationReport {
    pub fn has_rejection(&self, reason: RejectReason) -> bool {
        self.rejected.iter().any(|r| r.reason == reason)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShardError {
    #[error("post `{0}` has an empty body")]
    EmptyBody(String),
    #[error("no JSON array of strings found in teacher response")]
    NoArray,
    #[error("invalid artifact pattern `{pattern}`: {message}")]
    Pattern { pattern: String, message: String },
}

/// Case-insensitive audience-address patterns.
#[derive(Debug, Clone)]
pub struct ArtifactPatterns {
    patterns: Vec<Regex>,
}

impl ArtifactPatterns {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self, ShardError> {
        let patterns = patterns
            .iter()
            .map(|p| {
                Regex::new(&format!("(?i){}", p.as_ref())).map_err(|e| ShardError::Pattern {
                    pattern: p.as_ref().to_string(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(ArtifactPatterns { patterns })
    }

    pub fn matches(&self, text: &str) -> bool {
        self.patterns.iter().any(|re| re.is_match(text))
    }
}

impl Default for ArtifactPatterns {
    fn default() -> Self {
        ArtifactPatterns::new(DEFAULT_ARTIFACT_PATTERNS).expect("default patterns compile")
    }
}

/// Collapse whitespace runs to one space and trim.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn build_shard_prompt(post: &Post) -> Result<String, ShardError> {
    if post.body.trim().is_empty() {
        return Err(ShardError::EmptyBody(post.post_id.clone()));
    }
    Ok(format!("{SHARD_PROMPT}\n\n{}", post.body))
}

/// Elements of the last well-formed JSON array of strings in `text`.
pub fn parse_shard_response(text: &str) -> Result<Vec<String>, ShardError> {
    let mut last = None;
    let mut pos = 0;
    while let Some(off) = text[pos..].find('[') {
        let start = pos + off;
        let mut stream =
            serde_json::Deserializer::from_str(&text[start..]).into_iter::<Vec<String>>();
        match stream.next() {
            Some(Ok(items)) => {
                last = Some(items);
                pos = start + stream.byte_offset();
            }
            _ => pos = start + 1,
        }
    }
    last.ok_or(ShardError::NoArray)
}

/// Mechanical shard checks. Pure: same inputs, same report.
pub fn validate_shards(
    post: &Post,
    candidates: &[String],
    patterns: &ArtifactPatterns,
) -> ShardValidationReport {
    let body = normalize_whitespace(&post.body);
    let mut report = ShardValidationReport::default();
    let mut cursor = 0usize;
    for candidate in candidates {
        let norm = normalize_whitespace(candidate);
        let reject = |reason| Rejection {
            candidate: candidate.clone(),
            reason,
        };
        if norm.is_empty() || !body.contains(&norm) {
            report.rejected.push(reject(RejectReason::NotSubstring));
            continue;
        }
        if word_count(&norm) < MIN_SHARD_WORDS {
            report.rejected.push(reject(RejectReason::TooShort));
            continue;
        }
        if patterns.matches(&norm) {
            report.rejected.push(reject(RejectReason::ArtifactSuspect));
            continue;
        }
        match body[cursor..].find(&norm) {
            Some(off) => {
                let start = cursor + off;
                let end = start + norm.len();
                report.accepted.push(Shard {
                    post_id: post.post_id.clone(),
                    index: report.accepted.len(),
                    text: norm,
                    match_start: start,
                    match_end: end,
                });
                cursor = end;
            }
            None => report.rejected.push(reject(RejectReason::OutOfOrder)),
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ShardOutcome {
    Accepted {
        shards: Vec<Shard>,
        attempts: u32,
    },
    Excluded {
        post_id: String,
        attempts: u32,
        reason: String,
    },
}

/// Ask the teacher for a segmentation, up to `max_attempts` times. An attempt
/// succeeds when at least one shard is accepted and no candidate was rejected
/// as a non-substring. Each attempt carries a distinct seed so that retries
/// are not answered from the cache.
pub fn extract_shards(
    post: &Post,
    gateway: &Gateway,
    teacher: &EndpointConfig,
    patterns: &ArtifactPatterns,
    max_attempts: u32,
) -> Result<ShardOutcome, ShardError> {
    let prompt = build_shard_prompt(post)?;
    let mut last_reason = String::from("no attempts made");
    for attempt in 0..max_attempts.max(1) {
        let req = ChatRequest {
            endpoint: teacher.url.clone(),
            model: teacher.model.clone(),
            messages: vec![ChatMessage::user(prompt.clone())],
            temperature: teacher.temperature,
            max_tokens: teacher.max_tokens,
            seed: Some(teacher.seed.unwrap_or(0) + u64::from(attempt)),
        };
        let content = match gateway.chat_complete(&req) {
            Ok(resp) => resp.content,
            Err(e @ GatewayError::InvalidRequest(_)) => {
                last_reason = e.to_string();
                break;
            }
            Err(e) => {
                warn!(post_id = %post.post_id, attempt, error = %e, "shard teacher call failed");
                last_reason = e.to_string();
                continue;
            }
        };
        let candidates = match parse_shard_response(&content) {
            Ok(c) => c,
            Err(e) => {
                last_reason = e.to_string();
                continue;
            }
        };
        let report = validate_shards(post, &candidates, patterns);
        if report.accepted.is_empty() {
            last_reason = "no shard accepted".into();
        } else if report.has_rejection(RejectReason::NotSubstring) {
            last_reason = "teacher altered post text".into();
        } else {
            info!(post_id = %post.post_id, shards = report.accepted.len(), "post segmented");
            return Ok(ShardOutcome::Accepted {
                shards: report.accepted,
                attempts: attempt + 1,
            });
        }
    }
    Ok(ShardOutcome::Excluded {
        post_id: post.post_id.clone(),
        attempts: max_attempts.max(1),
        reason: last_reason,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub q1: f64,
    pub q3: f64,
}

impl DistributionSummary {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardStats {
    pub posts: usize,
    pub shards: usize,
    pub per_post_count: DistributionSummary,
    /// Share of posts with 3 to 8 shards inclusive.
    pub share_3_to_8: f64,
    pub word_length: DistributionSummary,
}

/// Quantile by linear interpolation between order statistics
/// (`h = (n-1)p`). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, median, sample SD and quartiles. `None` for empty input.
pub fn summarize(values: &[f64]) -> Option<DistributionSummary> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(DistributionSummary {
        mean,
        median: quantile(&sorted, 0.5),
        sd,
        q1: quantile(&sorted, 0.25),
        q3: quantile(&sorted, 0.75),
    })
}

/// Statistics over accepted posts; `per_post` holds each post's shards.
pub fn shard_statistics(per_post: &[Vec<Shard>]) -> Option<ShardStats> {
    let posts: Vec<&Vec<Shard>> = per_post.iter().filter(|s| !s.is_empty()).collect();
    let counts: Vec<f64> = posts.iter().map(|s| s.len() as f64).collect();
    let lengths: Vec<f64> = posts
        .iter()
        .flat_map(|s| s.iter().map(|sh| word_count(&sh.text) as f64))
        .collect();
    let per_post_count = summarize(&counts)?;
    let word_length = summarize(&lengths)?;
    let in_band = counts.iter().filter(|&&c| (3.0..=8.0).contains(&c)).count();
    Some(ShardStats {
        posts: posts.len(),
        shards: lengths.len(),
        per_post_count,
        share_3_to_8: in_band as f64 / counts.len() as f64,
        word_length,
    })
}
