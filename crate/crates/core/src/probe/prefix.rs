use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::prompt::{build_distress_prompt, parse_distress_response};
use super::DistressLevel;
use crate::gateway::{ChatMessage, ChatRequest, Gateway, Role};
use crate::pipeline::EndpointConfig;
use crate::store::hash_parts;

/// One line of a source dialogue file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDialogue {
    pub dialogue_id: String,
    /// Corpus of origin; sampling equalizes contributions across sources.
    pub source: String,
    pub messages: Vec<ChatMessage>,
}

/// One line of a prefix file, the extractor's input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixRecord {
    pub record_id: String,
    pub group_id: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<DistressLevel>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrefixStats {
    pub dialogues_available: BTreeMap<String, usize>,
    pub dialogues_sampled: BTreeMap<String, usize>,
    pub prefixes: usize,
    pub labeled: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixDataset {
    pub records: Vec<PrefixRecord>,
    pub stats: PrefixStats,
}

/// Every prefix that ends on a user message, shortest first.
pub fn enumerate_prefixes(dialogue: &SourceDialogue) -> Vec<PrefixRecord> {
    dialogue
        .messages
        .iter()
        .enumerate()
        .filter(|(_, m)| m.role == Role::User)
        .enumerate()
        .map(|(n, (i, _))| PrefixRecord {
            record_id: format!("{}#{n}", dialogue.dialogue_id),
            group_id: dialogue.dialogue_id.clone(),
            messages: dialogue.messages[..=i].to_vec(),
            label: None,
        })
        .collect()
}

fn source_seed(seed: u64, source: &str) -> u64 {
    let h = hash_parts([&seed.to_le_bytes()[..], source.as_bytes()]);
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

/// Downsample every source to the size of the smallest one. Selection is
/// seeded per source; input order is preserved among the kept dialogues.
pub fn sample_equal_contribution(dialogues: &[SourceDialogue], seed: u64) -> Vec<SourceDialogue> {
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in dialogues.iter().enumerate() {
        by_source.entry(&d.source).or_default().push(i);
    }
    let Some(quota) = by_source.values().map(Vec::len).min() else {
        return Vec::new();
    };
    let mut keep = Vec::new();
    for (source, mut idx) in by_source {
        let mut rng = ChaCha8Rng::seed_from_u64(source_seed(seed, source));
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..quota]);
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| dialogues[i].clone()).collect()
}

fn label_prefix(
    prefix: &PrefixRecord,
    rubric: &str,
    teacher: &EndpointConfig,
    gateway: &Gateway,
) -> Option<DistressLevel> {
    let prompt = build_distress_prompt(&prefix.messages, rubric).ok()?;
    for attempt in 0..2u64 {
        let req = ChatRequest {
            endpoint: teacher.url.clone(),
            model: teacher.model.clone(),
            messages: vec![ChatMessage::user(prompt.clone())],
            temperature: teacher.temperature,
            max_tokens: teacher.max_tokens,
            seed: Some(teacher.seed.unwrap_or(0) + attempt),
        };
        match gateway.chat_complete(&req) {
            Ok(resp) => match parse_distress_response(&resp.content) {
                Ok(j) => return Some(j.level),
                Err(e) => warn!(record_id = %prefix.record_id, attempt, error = %e, "teacher label unparseable"),
            },
            Err(e) => {
                warn!(record_id = %prefix.record_id, error = %e, "teacher call failed");
                return None;
            }
        }
    }
    None
}

/// Sample sources equally, enumerate user-terminated prefixes and label each
/// with the teacher. Prefixes the teacher cannot label are dropped and counted.
pub fn build_prefix_dataset(
    dialogues: &[SourceDialogue],
    rubric: &str,
    teacher: &EndpointConfig,
    gateway: &Gateway,
    seed: u64,
) -> PrefixDataset {
    let mut stats = PrefixStats::default();
    for d in dialogues {
        *stats.dialogues_available.entry(d.source.clone()).or_default() += 1;
    }
    let sampled = sample_equal_contribution(dialogues, seed);
    for d in &sampled {
        *stats.dialogues_sampled.entry(d.source.clone()).or_default() += 1;
    }
    let prefixes: Vec<PrefixRecord> = sampled.iter().flat_map(enumerate_prefixes).collect();
    stats.prefixes = prefixes.len();
    let labeled: Vec<Option<PrefixRecord>> = prefixes
        .into_par_iter()
        .map(|mut p| {
            p.label = Some(label_prefix(&p, rubric, teacher, gateway)?);
            Some(p)
        })
        .collect();
    let records: Vec<PrefixRecord> = labeled.into_iter().flatten().collect();
    stats.labeled = records.len();
    stats.dropped = stats.prefixes - stats.labeled;
    PrefixDataset { records, stats }
}
