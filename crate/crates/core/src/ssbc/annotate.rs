use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::prompt::{build_annotation_prompt, parse_annotation_response};
use super::LabelSet;
use crate::dialogue::{Conversation, SingleTurnResult};
use crate::gateway::{ChatMessage, ChatRequest, Gateway};
use crate::pipeline::EndpointConfig;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TurnKey {
    pub conv_id: String,
    pub turn: usize,
}

impl TurnKey {
    pub fn new(conv_id: impl Into<String>, turn: usize) -> Self {
        TurnKey {
            conv_id: conv_id.into(),
            turn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFlag {
    Ok,
    /// Response unparseable twice; labels recorded as empty.
    ParseFailed,
    /// No response could be obtained.
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub conv_id: String,
    pub turn: usize,
    pub temperature: f64,
    pub labels: LabelSet,
    /// Cache key of the raw annotator response.
    pub raw_response_ref: Option<String>,
    pub flag: AnnotationFlag,
}

impl AnnotationRecord {
    pub fn key(&self) -> TurnKey {
        TurnKey::new(self.conv_id.clone(), self.turn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRun {
    pub temperature: f64,
    pub records: BTreeMap<TurnKey, AnnotationRecord>,
}

impl AnnotationRun {
    pub fn from_records(temperature: f64, records: Vec<AnnotationRecord>) -> Self {
        AnnotationRun {
            temperature,
            records: records.into_iter().map(|r| (r.key(), r)).collect(),
        }
    }

    /// Build a run straight from label sets (fixtures, human files).
    pub fn from_labels(temperature: f64, labels: impl IntoIterator<Item = (TurnKey, LabelSet)>) -> Self {
        let records = labels
            .into_iter()
            .map(|(k, labels)| AnnotationRecord {
                conv_id: k.conv_id,
                turn: k.turn,
                temperature,
                labels,
                raw_response_ref: None,
                flag: AnnotationFlag::Ok,
            })
            .collect();
        Self::from_records(temperature, records)
    }

    pub fn labels(&self, key: &TurnKey) -> Option<&LabelSet> {
        self.records.get(key).map(|r| &r.labels)
    }

    pub fn to_records(&self) -> Vec<AnnotationRecord> {
        self.records.values().cloned().collect()
    }
}

struct Item<'a> {
    key: TurnKey,
    user: &'a str,
    assistant: &'a str,
}

fn annotate_items(
    items: Vec<Item<'_>>,
    temperature: f64,
    annotator: &EndpointConfig,
    gateway: &Gateway,
) -> AnnotationRun {
    let records: Vec<AnnotationRecord> = items
        .par_iter()
        .map(|item| annotate_one(item, temperature, annotator, gateway))
        .collect();
    AnnotationRun::from_records(temperature, records)
}

fn annotate_one(
    item: &Item<'_>,
    temperature: f64,
    annotator: &EndpointConfig,
    gateway: &Gateway,
) -> AnnotationRecord {
    let mut record = AnnotationRecord {
        conv_id: item.key.conv_id.clone(),
        turn: item.key.turn,
        temperature,
        labels: LabelSet::new(),
        raw_response_ref: None,
        flag: AnnotationFlag::Missing,
    };
    let prompt = match build_annotation_prompt(item.user, item.assistant) {
        Ok(p) => p,
        Err(e) => {
            warn!(conv_id = %item.key.conv_id, turn = item.key.turn, error = %e, "turn not annotatable");
            return record;
        }
    };
    // the retry differs only by seed, so it is not served from the cache
    for attempt in 0..2u64 {
        let req = ChatRequest {
            endpoint: annotator.url.clone(),
            model: annotator.model.clone(),
            messages: vec![ChatMessage::user(prompt.clone())],
            temperature,
            max_tokens: annotator.max_tokens,
            seed: Some(annotator.seed.unwrap_or(0) + attempt),
        };
        let resp = match gateway.chat_complete(&req) {
            Ok(r) => r,
            Err(e) => {
                warn!(conv_id = %item.key.conv_id, turn = item.key.turn, error = %e, "annotator call failed");
                record.flag = AnnotationFlag::Missing;
                return record;
            }
        };
        record.raw_response_ref = Some(resp.key.clone());
        match parse_annotation_response(&resp.content) {
            Ok(labels) => {
                record.labels = labels;
                record.flag = AnnotationFlag::Ok;
                return record;
            }
            Err(e) => {
                warn!(conv_id = %item.key.conv_id, turn = item.key.turn, attempt, error = %e, "annotation unparseable");
                record.flag = AnnotationFlag::ParseFailed;
            }
        }
    }
    record
}

/// One annotation request per turn of every complete conversation.
pub fn annotate_run(
    conversations: &[Conversation],
    temperature: f64,
    annotator: &EndpointConfig,
    gateway: &Gateway,
) -> AnnotationRun {
    let items = conversations
        .iter()
        .filter(|c| c.is_complete())
        .flat_map(|c| {
            c.turns.iter().map(move |t| Item {
                key: TurnKey::new(c.conv_id.clone(), t.index),
                user: &t.user_text,
                assistant: &t.assistant_text,
            })
        })
        .collect();
    annotate_items(items, temperature, annotator, gateway)
}

/// Single-turn replies keyed by `(post_id, 0)`.
pub fn annotate_single_turns(
    results: &[SingleTurnResult],
    temperature: f64,
    annotator: &EndpointConfig,
    gateway: &Gateway,
) -> AnnotationRun {
    let items = results
        .iter()
        .map(|r| Item {
            key: TurnKey::new(r.post_id.clone(), 0),
            user: &r.prompt_text,
            assistant: &r.assistant_text,
        })
        .collect();
    annotate_items(items, temperature, annotator, gateway)
}
