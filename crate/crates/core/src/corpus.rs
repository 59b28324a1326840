//! Source corpus ingestion.
//!
//! The corpus is a line-delimited file of JSON records
//! `{post_id, community, title, body, human_distress?}`. Malformed lines,
//! duplicate ids and empty bodies are excluded with a counted reason; none of
//! them abort ingestion.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::probe::DistressLevel;
use crate::store::{ArtifactKind, RunStore, StoreError};

pub const POSTS_RECORD: &str = "posts";
pub const STATS_RECORD: &str = "stats";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub community: String,
    #[serde(default)]
    pub title: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_distress: Option<DistressLevel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    Malformed,
    DuplicatePostId,
    EmptyBody,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    /// 1-based line number in the source file.
    pub line: usize,
    pub post_id: Option<String>,
    pub reason: ExclusionReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub conversations_per_community: BTreeMap<String, usize>,
    pub total_posts: usize,
    pub total_excluded: usize,
    pub exclusions: Vec<Exclusion>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Parse corpus text. Accepted posts keep file order; the first occurrence of
/// a duplicated `post_id` wins.
pub fn parse_corpus(text: &str) -> (Vec<Post>, CorpusStats) {
    let mut posts = Vec::new();
    let mut stats = CorpusStats::default();
    let mut seen = HashSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut exclude = |post_id: Option<String>, reason, detail: String| {
            warn!(line = line_no, ?reason, %detail, "corpus record excluded");
            stats.exclusions.push(Exclusion {
                line: line_no,
                post_id,
                reason,
                detail,
            });
        };
        let post: Post = match serde_json::from_str(raw) {
            Ok(p) => p,
            Err(e) => {
                exclude(None, ExclusionReason::Malformed, e.to_string());
                continue;
            }
        };
        if post.post_id.trim().is_empty() {
            exclude(None, ExclusionReason::Malformed, "empty post_id".into());
            continue;
        }
        if post.body.trim().is_empty() {
            exclude(
                Some(post.post_id.clone()),
                ExclusionReason::EmptyBody,
                "body empty after trimming".into(),
            );
            continue;
        }
        if !seen.insert(post.post_id.clone()) {
            exclude(
                Some(post.post_id.clone()),
                ExclusionReason::DuplicatePostId,
                "post_id already ingested".into(),
            );
            continue;
        }
        *stats
            .conversations_per_community
            .entry(post.community.clone())
            .or_default() += 1;
        posts.push(post);
    }
    stats.total_posts = posts.len();
    stats.total_excluded = stats.exclusions.len();
    (posts, stats)
}

pub fn read_corpus(path: &Path) -> Result<(Vec<Post>, CorpusStats), CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_corpus(&text))
}

/// Read the corpus file and store accepted posts plus statistics in the run.
pub fn ingest_corpus(
    path: &Path,
    store: &RunStore,
    run_id: &str,
) -> Result<CorpusStats, CorpusError> {
    let (posts, stats) = read_corpus(path)?;
    store.persist_records(run_id, ArtifactKind::Corpus, POSTS_RECORD, &posts)?;
    store.persist_records(run_id, ArtifactKind::Corpus, STATS_RECORD, &[&stats])?;
    Ok(stats)
}

pub fn load_posts(store: &RunStore, run_id: &str) -> Result<Vec<Post>, StoreError> {
    store.load_records(run_id, ArtifactKind::Corpus, POSTS_RECORD)
}
