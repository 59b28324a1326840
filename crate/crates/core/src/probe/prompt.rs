use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use super::{DistressLevel, ProbeError};
use crate::gateway::{ChatMessage, Role};

pub const DISTRESS_TEMPLATE: &str = "\
Instruction: You are an exceptional assistant whose task is to carefully read social media posts and assess their psychological / emotional distress severity level. You are to abide by the following instructions, provide reasoning for your classification, and reflect on your confidence level.

---

# Response Format

You MUST end your response with EXACTLY this format - no variations allowed:

First, provide your reasoning in these sections:
- Severity reasoning
- Confidence reasoning

Then END with this EXACT line:

Final answer: {\"severity\": \"<value>\", \"confidence\": \"<value>\"}

Only possible values for severity:
- None
- Mild
- Moderate+

Only possible values for confidence:
- High
- Low

Remember, you must end your response with a JSON.

---

# Instructions

{{ codebook }}

---

# Post

The post you are to classify is as follows:

Title: {{ post_title }}

Post: {{ post_text }}

---";

/// Default severity rubric substituted for the codebook placeholder. Runs may
/// override it in configuration.
pub const DEFAULT_DISTRESS_RUBRIC: &str = "\
Rate the user's overall psychological or emotional distress as expressed up to the end of the text.
- None: no expressed distress; neutral requests, information seeking, or positive or mildly inconvenienced affect.
- Mild: noticeable worry, sadness, frustration, stress or loneliness that the user describes as manageable and that does not dominate daily functioning.
- Moderate+: strong or persistent distress: hopelessness, panic, overwhelming fear or grief, inability to cope, impaired daily functioning, or any mention of self-harm or harm to others.
Judge only what the user expresses; do not infer distress from the topic alone. Use Low confidence when the text is short or ambiguous.";

pub const PREFIX_TITLE: &str = "Conversation so far";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistressJudgement {
    pub level: DistressLevel,
    pub confidence: Option<Confidence>,
}

fn render_prefix(prefix: &[ChatMessage]) -> String {
    prefix
        .iter()
        .filter(|m| m.role != Role::System)
        .map(|m| match m.role {
            Role::User => format!("User: {}", m.content),
            _ => format!("Assistant: {}", m.content),
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Teacher prompt for a conversation prefix; system messages are not shown.
pub fn build_distress_prompt(prefix: &[ChatMessage], rubric: &str) -> Result<String, ProbeError> {
    let text = render_prefix(prefix);
    if text.is_empty() {
        return Err(ProbeError::EmptyPrefix);
    }
    Ok(DISTRESS_TEMPLATE
        .replace("{{ codebook }}", rubric)
        .replace("{{ post_title }}", PREFIX_TITLE)
        .replace("{{ post_text }}", &text))
}

fn field_regex(field: &str) -> Regex {
    Regex::new(&format!(
        r#"(?i)["“”']?{field}["“”']?\s*:\s*["“”']([^"“”']*)["“”']"#
    ))
    .expect("valid regex")
}

fn severity_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| field_regex("severity"))
}

fn confidence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| field_regex("confidence"))
}

/// Severity (and confidence, when given) from the last `Final answer:` line,
/// or from the last severity field anywhere when that line is missing.
pub fn parse_distress_response(text: &str) -> Result<DistressJudgement, ProbeError> {
    let region = text
        .lines()
        .rev()
        .find(|l| l.to_ascii_lowercase().contains("final answer:"))
        .filter(|l| severity_re().is_match(l))
        .unwrap_or(text);
    let raw = severity_re()
        .captures_iter(region)
        .last()
        .map(|c| c[1].trim().to_string())
        .ok_or(ProbeError::NoSeverity)?;
    let level = match raw.to_ascii_lowercase().as_str() {
        "none" => DistressLevel::None,
        "mild" => DistressLevel::Mild,
        "moderate+" => DistressLevel::ModeratePlus,
        _ => return Err(ProbeError::InvalidSeverity(raw)),
    };
    let confidence = confidence_re()
        .captures_iter(region)
        .last()
        .and_then(|c| match c[1].trim().to_ascii_lowercase().as_str() {
            "high" => Some(Confidence::High),
            "low" => Some(Confidence::Low),
            _ => None,
        });
    Ok(DistressJudgement { level, confidence })
}
