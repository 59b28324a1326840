//! Run-directory layout and artifact persistence.
//!
//! Every artifact lives under `runs/<run_id>/<kind>/<record>.jsonl` and is
//! written atomically (temporary file, then rename). The run manifest records
//! the configuration snapshot and, per completed stage, the content hashes of
//! its inputs and outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("manifest missing for run `{0}`")]
    ManifestMissing(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed record in {path} line {line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl StoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        StoreError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Subdirectories of a run directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArtifactKind {
    Corpus,
    Shards,
    Conversations,
    Annotations,
    Probes,
    Stats,
    Reports,
    Cache,
}

impl ArtifactKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            ArtifactKind::Corpus => "corpus",
            ArtifactKind::Shards => "shards",
            ArtifactKind::Conversations => "conversations",
            ArtifactKind::Annotations => "annotations",
            ArtifactKind::Probes => "probes",
            ArtifactKind::Stats => "stats",
            ArtifactKind::Reports => "reports",
            ArtifactKind::Cache => "cache",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageVersion {
    pub input_hash: String,
    pub output_hash: String,
    /// Output files relative to the run directory.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    #[serde(default)]
    pub stage_versions: BTreeMap<String, StageVersion>,
    pub config_snapshot: serde_json::Value,
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash a sequence of labelled parts without ambiguity between boundaries.
pub fn hash_parts<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}

/// Map a record id onto a file-name-safe stem.
pub fn sanitize_record_id(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
    }
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp.{}.{n}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| StoreError::io(&tmp, e))?;
        f.sync_all().map_err(|e| StoreError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
}

/// Serialize records one JSON object per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>, StoreError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = fs::File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| StoreError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Root of all run directories (`runs/` by default).
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(sanitize_record_id(run_id))
    }

    pub fn kind_dir(&self, run_id: &str, kind: ArtifactKind) -> PathBuf {
        self.run_dir(run_id).join(kind.dir_name())
    }

    pub fn manifest_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join(MANIFEST_FILE)
    }

    pub fn has_run(&self, run_id: &str) -> bool {
        self.manifest_path(run_id).is_file()
    }

    /// Create the run directory and manifest, or refresh the config snapshot
    /// of an existing run while keeping its stage versions.
    pub fn open_run(
        &self,
        run_id: &str,
        config_snapshot: serde_json::Value,
    ) -> Result<RunManifest, StoreError> {
        let manifest = match self.load_manifest(run_id) {
            Ok(mut m) => {
                m.config_snapshot = config_snapshot;
                m
            }
            Err(StoreError::ManifestMissing(_)) => RunManifest {
                run_id: run_id.to_string(),
                stage_versions: BTreeMap::new(),
                config_snapshot,
            },
            Err(e) => return Err(e),
        };
        self.save_manifest(&manifest)?;
        Ok(manifest)
    }

    pub fn load_manifest(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        let path = self.manifest_path(run_id);
        if !path.is_file() {
            return Err(StoreError::ManifestMissing(run_id.to_string()));
        }
        let bytes = fs::read(&path).map_err(|e| StoreError::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        let mut bytes = serde_json::to_vec_pretty(manifest)?;
        bytes.push(b'\n');
        write_atomic(&self.manifest_path(&manifest.run_id), &bytes)
    }

    /// `runs/<run_id>/<kind>/<record_id>.jsonl`
    pub fn artifact_path(&self, run_id: &str, kind: ArtifactKind, record_id: &str) -> PathBuf {
        self.kind_dir(run_id, kind)
            .join(format!("{}.jsonl", sanitize_record_id(record_id)))
    }

    pub fn persist_artifact(
        &self,
        run_id: &str,
        kind: ArtifactKind,
        record_id: &str,
        payload: &[u8],
    ) -> Result<PathBuf, StoreError> {
        if !self.has_run(run_id) {
            return Err(StoreError::ManifestMissing(run_id.to_string()));
        }
        let path = self.artifact_path(run_id, kind, record_id);
        write_atomic(&path, payload)?;
        Ok(path)
    }

    pub fn persist_records<T: Serialize>(
        &self,
        run_id: &str,
        kind: ArtifactKind,
        record_id: &str,
        records: &[T],
    ) -> Result<PathBuf, StoreError> {
        self.persist_artifact(run_id, kind, record_id, &to_jsonl(records)?)
    }

    pub fn load_records<T: DeserializeOwned>(
        &self,
        run_id: &str,
        kind: ArtifactKind,
        record_id: &str,
    ) -> Result<Vec<T>, StoreError> {
        read_jsonl(&self.artifact_path(run_id, kind, record_id))
    }

    /// Write a non-record file (reports, tables) under a kind directory.
    pub fn persist_file(
        &self,
        run_id: &str,
        kind: ArtifactKind,
        file_name: &str,
        bytes: &[u8],
    ) -> Result<PathBuf, StoreError> {
        if !self.has_run(run_id) {
            return Err(StoreError::ManifestMissing(run_id.to_string()));
        }
        let path = self.kind_dir(run_id, kind).join(file_name);
        write_atomic(&path, bytes)?;
        Ok(path)
    }

    /// Record ids (file stems of `*.jsonl`) under a kind directory, sorted.
    pub fn list_records(&self, run_id: &str, kind: ArtifactKind) -> Result<Vec<String>, StoreError> {
        let dir = self.kind_dir(run_id, kind);
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| StoreError::io(&dir, e))? {
            let entry = entry.map_err(|e| StoreError::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') {
                continue;
            }
            if let Some(stem) = name.strip_suffix(".jsonl") {
                ids.push(stem.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Hash a set of files (relative to the run directory) by path and content.
    pub fn hash_outputs(&self, run_id: &str, outputs: &[String]) -> Result<String, StoreError> {
        let run_dir = self.run_dir(run_id);
        let mut sorted: Vec<&String> = outputs.iter().collect();
        sorted.sort();
        let mut hasher = Sha256::new();
        for rel in sorted {
            let path = run_dir.join(rel);
            let bytes = fs::read(&path).map_err(|e| StoreError::io(&path, e))?;
            hasher.update((rel.len() as u64).to_le_bytes());
            hasher.update(rel.as_bytes());
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Path relative to the run directory, with `/` separators.
    pub fn relative(&self, run_id: &str, path: &Path) -> String {
        let run_dir = self.run_dir(run_id);
        path.strip_prefix(&run_dir)
            .unwrap_or(path)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }
}
