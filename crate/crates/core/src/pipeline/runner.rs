use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{info, info_span};

use super::stages::{all_stages, Stage, StageContext};
use super::{PipelineConfig, PipelineError};
use crate::gateway::Gateway;
use crate::store::{hash_parts, ArtifactKind, RunStore, StageVersion, StoreError};

pub const STAGE_ORDER: [&str; 9] = [
    "ingest",
    "shard",
    "simulate",
    "annotate",
    "consensus",
    "probe-train",
    "probe-infer",
    "analyze",
    "report",
];

/// Stages in registration order. A stage may only depend on stages
/// registered before it, so the order is always topological.
pub struct StageRegistry {
    stages: Vec<Box<dyn Stage>>,
}

impl StageRegistry {
    pub fn empty() -> Self {
        StageRegistry { stages: Vec::new() }
    }

    pub fn register(&mut self, stage: Box<dyn Stage>) -> Result<(), PipelineError> {
        if self.stages.iter().any(|s| s.name() == stage.name()) {
            return Err(PipelineError::Config(format!("stage `{}` registered twice", stage.name())));
        }
        for dep in stage.deps() {
            if !self.stages.iter().any(|s| s.name() == *dep) {
                return Err(PipelineError::Config(format!(
                    "stage `{}` depends on unregistered `{dep}`",
                    stage.name()
                )));
            }
        }
        self.stages.push(stage);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&dyn Stage, PipelineError> {
        self.stages
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
            .ok_or_else(|| PipelineError::UnknownStage(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.stages.iter().map(|s| s.name()).collect()
    }
}

impl Default for StageRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        for s in all_stages() {
            r.register(s).expect("built-in stages form a DAG");
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    /// Inputs unchanged and outputs intact.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub status: StageStatus,
    pub input_hash: String,
    pub output_hash: String,
    pub outputs: Vec<String>,
    pub summary: Value,
    pub network_calls: u64,
}

pub struct Pipeline {
    config: PipelineConfig,
    store: RunStore,
    gateway: Gateway,
    registry: StageRegistry,
}

impl Pipeline {
    /// HTTP gateway caching under `runs/<id>/cache`, with API keys read from
    /// each endpoint's `api_key_env`.
    pub fn new(config: PipelineConfig) -> Self {
        let store = RunStore::new(&config.runs_dir);
        let mut gateway = Gateway::http(
            store.kind_dir(&config.run_id, ArtifactKind::Cache),
            config.gateway.clone(),
        );
        for e in config.endpoints.values() {
            if let Some(key) = e.api_key_env.as_ref().and_then(|v| std::env::var(v).ok()) {
                gateway = gateway.with_api_key(&e.url, key);
            }
        }
        Self::with_gateway(config, gateway)
    }

    pub fn with_gateway(config: PipelineConfig, gateway: Gateway) -> Self {
        Pipeline {
            store: RunStore::new(&config.runs_dir),
            config,
            gateway,
            registry: StageRegistry::default(),
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn registry(&self) -> &StageRegistry {
        &self.registry
    }

    fn input_hash(
        &self,
        stage: &dyn Stage,
        versions: &std::collections::BTreeMap<String, StageVersion>,
    ) -> Result<String, PipelineError> {
        let fp = stage.fingerprint(&self.config)?.to_string();
        let mut parts: Vec<&[u8]> = vec![
            b"stage/v1",
            env!("CARGO_PKG_VERSION").as_bytes(),
            stage.name().as_bytes(),
            fp.as_bytes(),
        ];
        for dep in stage.deps() {
            let v = versions.get(*dep).ok_or_else(|| PipelineError::DependencyMissing {
                stage: stage.name().to_string(),
                missing: dep.to_string(),
            })?;
            parts.push(dep.as_bytes());
            parts.push(v.output_hash.as_bytes());
        }
        Ok(hash_parts(parts))
    }

    /// Run one stage. Unless `force` is set, a stage whose inputs and
    /// recorded outputs are unchanged is skipped.
    pub fn run_stage(&self, name: &str, force: bool) -> Result<StageSummary, PipelineError> {
        let stage = self.registry.get(name)?;
        let run_id = &self.config.run_id;
        let snapshot = serde_json::to_value(&self.config).map_err(StoreError::from)?;
        let manifest = self.store.open_run(run_id, snapshot)?;
        let input_hash = self.input_hash(stage, &manifest.stage_versions)?;
        let _span = info_span!("stage", run_id = %run_id, stage = name).entered();
        if !force {
            if let Some(v) = manifest.stage_versions.get(name) {
                let intact = self.store.hash_outputs(run_id, &v.outputs).ok().as_ref() == Some(&v.output_hash);
                if v.input_hash == input_hash && intact {
                    info!("skipped (up to date)");
                    return Ok(StageSummary {
                        stage: name.to_string(),
                        status: StageStatus::Skipped,
                        input_hash,
                        output_hash: v.output_hash.clone(),
                        outputs: v.outputs.clone(),
                        summary: Value::Null,
                        network_calls: 0,
                    });
                }
            }
        }
        info!("started");
        let calls_before = self.gateway.network_calls();
        let ctx = StageContext {
            config: &self.config,
            store: &self.store,
            gateway: &self.gateway,
        };
        let out = stage.run(&ctx)?;
        let mut outputs: Vec<String> = out.outputs.iter().map(|p| self.store.relative(run_id, p)).collect();
        outputs.sort();
        outputs.dedup();
        let output_hash = self.store.hash_outputs(run_id, &outputs)?;
        let mut manifest = self.store.load_manifest(run_id)?;
        manifest.stage_versions.insert(
            name.to_string(),
            StageVersion {
                input_hash: input_hash.clone(),
                output_hash: output_hash.clone(),
                outputs: outputs.clone(),
            },
        );
        self.store.save_manifest(&manifest)?;
        let network_calls = self.gateway.network_calls() - calls_before;
        info!(summary = %out.summary, network_calls, "completed");
        Ok(StageSummary {
            stage: name.to_string(),
            status: StageStatus::Completed,
            input_hash,
            output_hash,
            outputs,
            summary: out.summary,
            network_calls,
        })
    }

    /// Every registered stage in topological order; stops at the first failure.
    pub fn run_all(&self, force: bool) -> Result<Vec<StageSummary>, PipelineError> {
        self.registry
            .names()
            .into_iter()
            .map(|name| self.run_stage(name, force))
            .collect()
    }
}
