use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{info, warn};

use super::{EndpointConfig, PipelineConfig, PipelineError, ProbeOptions};
use crate::corpus::{self, Post};
use crate::dialogue::{
    prefix_messages, simulate_conversation, simulate_single_turn, Conversation, ConversationStatus,
    SingleTurnResult,
};
use crate::gateway::Gateway;
use crate::probe::{
    build_ensemble, build_prefix_dataset, compare_with_human, cross_validate_layers, ensemble_predict,
    read_hsd, write_hsd, CvMetrics, DistressLevel, EnsembleProbe, HiddenStateClient, HsdRecord,
    LayerData, LayerSelection, ProbeError, ProbeHyperparams, SourceDialogue, DEFAULT_DISTRESS_RUBRIC,
};
use crate::report::{
    community_spread, cross_model_report, prevalence_report, render_community, render_cross_model,
    render_distress, render_prevalence, render_vignette, vignette_comparison, PrevalenceReport,
    Rendered, RunSummary,
};
use crate::shard::{extract_shards, shard_statistics, ArtifactPatterns, Shard, ShardOutcome};
use crate::ssbc::{
    agreement_metrics, annotate_run, annotate_single_turns, codebook_hash, consensus, human_agreement,
    AnnotationRecord, AnnotationRun, ConsensusRecord, HumanAgreementReport, LabelSet, LabeledTurn,
    StabilityReport, TurnKey,
};
use crate::stats::{
    build_tidy, per_tag_contingency, per_tag_regression, tidy_to_csv, Condition, ContingencyAnalysis,
    ModelRegistry, RegressionAnalysis,
};
use crate::store::{content_hash, hash_parts, read_jsonl, ArtifactKind, RunStore, StoreError};

const POSTS: &str = corpus::POSTS_RECORD;
const SHARDS: &str = "shards";
const SHARD_EXCLUSIONS: &str = "exclusions";
const SHARD_STATS: &str = "stats";
const CONVERSATIONS: &str = "conversations";
const SINGLE_TURN: &str = "single_turn";
const CONSENSUS: &str = "consensus";
const SINGLE_CONSENSUS: &str = "single_consensus";
const AGREEMENT: &str = "agreement";
const HUMAN_AGREEMENT: &str = "human_agreement";
const PREFIXES: &str = "prefixes";
const PREFIX_STATS: &str = "prefix_stats";
const TRAIN_HSD: &str = "train.hsd";
const LAYER_METRICS: &str = "layer_metrics";
const ENSEMBLE: &str = "ensemble";
const ESTIMATES: &str = "estimates";
const HUMAN_COMPARISON: &str = "human_comparison";
const TIDY: &str = "tidy.csv";
const PREVALENCE: &str = "prevalence";
const SUMMARY: &str = "summary";
const ISSUES: &str = "issues";

pub struct StageContext<'a> {
    pub config: &'a PipelineConfig,
    pub store: &'a RunStore,
    pub gateway: &'a Gateway,
}

impl StageContext<'_> {
    fn run_id(&self) -> &str {
        &self.config.run_id
    }

    fn load<T: DeserializeOwned>(&self, kind: ArtifactKind, id: &str) -> Result<Vec<T>, PipelineError> {
        Ok(self.store.load_records(self.run_id(), kind, id)?)
    }

    fn load_one<T: DeserializeOwned>(&self, kind: ArtifactKind, id: &str) -> Result<Option<T>, PipelineError> {
        let path = self.store.artifact_path(self.run_id(), kind, id);
        if !path.is_file() {
            return Ok(None);
        }
        Ok(read_jsonl::<T>(&path)?.pop())
    }

    fn save<T: Serialize>(&self, kind: ArtifactKind, id: &str, records: &[T]) -> Result<PathBuf, PipelineError> {
        Ok(self.store.persist_records(self.run_id(), kind, id, records)?)
    }
}

pub struct StageOutput {
    pub outputs: Vec<PathBuf>,
    pub summary: Value,
}

/// One node of the fixed stage DAG.
pub trait Stage: Send + Sync {
    fn name(&self) -> &'static str;
    fn deps(&self) -> &'static [&'static str];
    /// Configuration and external inputs that determine this stage's outputs.
    fn fingerprint(&self, config: &PipelineConfig) -> Result<Value, PipelineError>;
    fn run(&self, ctx: &StageContext<'_>) -> Result<StageOutput, PipelineError>;
}

fn endpoint_fp(e: &EndpointConfig) -> Value {
    json!({
        "url": e.url.trim_end_matches('/'),
        "model": e.model,
        "temperature": e.temperature,
        "max_tokens": e.max_tokens,
        "seed": e.seed,
    })
}

fn file_hash(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| StoreError::io(path, e))?;
    Ok(content_hash(&bytes))
}

fn opt_file_hash(path: Option<&PathBuf>) -> Result<Option<String>, PipelineError> {
    path.map(|p| file_hash(p)).transpose()
}

pub fn annotation_record_id(prefix: &str, temperature: f64) -> String {
    format!("{prefix}_t{:03}", (temperature * 100.0).round() as i64)
}

/// Identity of the annotation setup; cross-run comparisons require it to match.
pub fn annotator_hash(config: &PipelineConfig) -> String {
    let a = config.annotator();
    let temps = format!("{:?}", config.annotate.temperatures);
    hash_parts([
        b"annotator/v1".as_slice(),
        codebook_hash().as_bytes(),
        a.model.as_bytes(),
        temps.as_bytes(),
        &a.max_tokens.to_le_bytes(),
    ])
}

/// Complete conversations, plus the completed turns of partial ones when
/// `include_partial` is set.
pub fn analysis_conversations(conversations: Vec<Conversation>, include_partial: bool) -> Vec<Conversation> {
    conversations
        .into_iter()
        .filter_map(|mut c| {
            if c.is_complete() {
                Some(c)
            } else if include_partial && !c.turns.is_empty() {
                c.status = ConversationStatus::Complete;
                Some(c)
            } else {
                None
            }
        })
        .collect()
}

fn load_analysis_conversations(ctx: &StageContext<'_>) -> Result<Vec<Conversation>, PipelineError> {
    let convs = ctx.load(ArtifactKind::Conversations, CONVERSATIONS)?;
    Ok(analysis_conversations(convs, ctx.config.simulate.include_partial))
}

// ---- ingest ----

pub struct Ingest;

impl Stage for Ingest {
    fn name(&self) -> &'static str {
        "ingest"
    }

    fn deps(&self) -> &'static [&'static str] {
        &[]
    }

    fn fingerprint(&self, config: &PipelineConfig) -> Result<Value, PipelineError> {
        Ok(json!({ "corpus": file_hash(&config.corpus)? }))
    }

    fn run(&self, ctx: &StageContext<'_>) -> Result<StageOutput, PipelineError> {
        let stats = corpus::ingest_corpus(&ctx.config.corpus, ctx.store, ctx.run_id())?;
        if stats.total_posts == 0 {
            return Err(PipelineError::no_data(self.name(), "corpus has no valid post"));
        }
        let run = ctx.run_id();
        Ok(StageOutput {
            outputs: vec![
                ctx.store.artifact_path(run, ArtifactKind::Corpus, POSTS),
                ctx.store.artifact_path(run, ArtifactKind::Corpus, corpus::STATS_RECORD),
            ],
            summary: json!({
                "posts": stats.total_posts,
                "excluded": stats.total_excluded,
                "communities": stats.conversations_per_community,
            }),
        })
    }
}

// ---- shard ----

pub struct ShardStage;

impl Stage for ShardStage {
    fn name(&self) -> &'static str {
        "shard"
    }

    fn deps(&self) -> &'static [&'static str] {
        &["ingest"]
    }

    fn fingerprint(&self, config: &PipelineConfig) -> Result<Value, PipelineError> {
        Ok(json!({
            "teacher": endpoint_fp(config.shard_teacher()),
            "options": config.shard,
        }))
    }

    fn run(&self, ctx: &StageContext<'_>) -> Result<StageOutput, PipelineError> {
        let posts: Vec<Post> = ctx.load(ArtifactKind::Corpus, POSTS)?;
        let patterns = ArtifactPatterns::new(&ctx.config.shard.artifact_patterns)?;
        let teacher = ctx.config.shard_teacher();
        let outcomes: Vec<ShardOutcome> = posts
            .par_iter()
            .map(|p| {
                extract_shards(p, ctx.gateway, teacher, &patterns, ctx.config.shard.max_attempts).unwrap_or_else(
                    |e| ShardOutcome::Excluded {
                        post_id: p.post_id.clone(),
                        attempts: 0,
                        reason: e.to_string(),
                    },
                )
            })
            .collect();
        let mut per_post = Vec::new();
        let mut excluded = Vec::new();
        for o in outcomes {
            match o {
                ShardOutcome::Accepted { shards, .. } => per_post.push(shards),
                e @ ShardOutcome::Excluded { .. } => excluded.push(e),
            }
        }
        let stats = shard_statistics(&per_post)
            .ok_or_else(|| PipelineError::no_data(self.name(), "no post yielded a valid shard"))?;
        let shards: Vec<&Shard> = per_post.iter().flatten().collect();
        let outputs = vec![
            ctx.save(ArtifactKind::Shards, SHARDS, &shards)?,
            ctx.save(ArtifactKind::Shards, SHARD_EXCLUSIONS, &excluded)?,
            ctx.save(ArtifactKind::Shards, SHARD_STATS, &[&stats])?,
        ];
        Ok(StageOutput {
            outputs,
            summary: json!({
                "posts": per_post.len(),
                "excluded": excluded.len(),
                "shards": shards.len(),
                "mean_per_post": stats.per_post_count.mean,
            }),
        })
    }
}

// ---- simulate ----

pub struct Simulate;

impl Stage for Simulate {
    fn name(&self) -> &'static str {
        "simulate"
    }

    fn deps(&self) -> &'static [&'static str] {
        &["shard"]
    }

    fn fingerprint(&self, config: &PipelineConfig) -> Result<Value, PipelineError> {
        Ok(json!({
            "agent": endpoint_fp(config.agent()),
            "single_turn": config.simulate.single_turn,
        }))
    }

    fn run(&self, ctx: &StageContext<'_>) -> Result<StageOutput, PipelineError> {
        let shards: Vec<Shard> = ctx.load(ArtifactKind::Shards, SHARDS)?;
        let mut by_post: BTreeMap<String, Vec<Shard>> = BTreeMap::new();
        for s in shards {
            by_post.entry(s.post_id.clone()).or_default().push(s);
        }
        for v in by_post.values_mut() {
            v.sort_by_key(|s| s.index);
        }
        let agent = ctx.config.agent();
        let groups: Vec<&Vec<Shard>> = by_post.values().collect();
        let convs: Vec<Conversation> = groups
            .par_iter()
            .map(|s| simulate_conversation(s, agent, ctx.gateway))
            .collect();
        let complete = convs.iter().filter(|c| c.is_complete()).count();
        let turns: usize = convs.iter().map(|c| c.turns.len()).sum();
        let mut outputs = vec![ctx.save(ArtifactKind::Conversations, CONVERSATIONS, &convs)?];
        let mut singles = 0;
        if ctx.config.simulate.single_turn {
            let posts: Vec<Post> = ctx.load(ArtifactKind::Corpus, POSTS)?;
            let results: Vec<SingleTurnResult> = posts
                .par_iter()
                .filter(|p| by_post.contains_key(&p.post_id))
                .filter_map(|p| match simulate_single_turn(p, agent, ctx.gateway) {
                    Ok(r) => Some(r),
                    Err(e) => {
                        warn!(post_id = %p.post_id, error = %e, "single-turn reply missing");
                        None
                    }
                })
                .collect();
            singles = results.len();
            outputs.push(ctx.save(ArtifactKind::Conversations, SINGLE_TURN, &results)?);
        }
        Ok(StageOutput {
            outputs,
            summary: json!({
                "conversations": convs.len(),
                "complete": complete,
                "partial": convs.len() - complete,
                "assistant_turns": turns,
                "single_turn": singles,
            }),
        })
    }
}

// ---- annotate ----

pub struct Annotate;

impl Stage for Annotate {
    fn name(&self) -> &'static str {
        "annotate"
    }

    fn deps(&self) -> &'static [&'static str] {
        &["simulate"]
    }

    fn fingerprint(&self, config: &PipelineConfig) -> Result<Value, PipelineError> {
        Ok(json!({
            "annotator": endpoint_fp(config.annotator()),
            "temperatures": config.annotate.temperatures,
            "codebook": codebook_hash(),
            "include_partial": config.simulate.include_partial,
        }))
    }

    fn run(&self, ctx: &StageContext<'_>) -> Result<StageOutput, PipelineError> {
        let convs = load_analysis_conversations(ctx)?;
        if convs.is_empty() {
            return Err(PipelineError::no_data(self.name(), "no complete conversation"));
        }
        let annotator = ctx.config.annotator();
        let singles: Vec<SingleTurnResult> = if ctx.config.simulate.single_turn {
            ctx.load(ArtifactKind::Conversations, SINGLE_TURN)?
        } else {
            Vec::new()
        };
        let mut outputs = Vec::new();
        let mut flagged = 0;
        for &t in &ctx.config.annotate.temperatures {
            let run = annotate_run(&convs, t, annotator, ctx.gateway);
            let records = run.to_records();
            flagged += records.iter().filter(|r| r.flag != crate::ssbc::AnnotationFlag::Ok).count();
            outputs.push(ctx.save(ArtifactKind::Annotations, &annotation_record_id("run", t), &records)?);
            if !singles.is_empty() {
                let run = annotate_single_turns(&singles, t, annotator, ctx.gateway);
                outputs.push(ctx.save(
                    ArtifactKind::Annotations,
                    &annotation_record_id("single", t),
                    &run.to_records(),
                )?);
            }
        }
        Ok(StageOutput {
            outputs,
            summary: json!({
                "turns": convs.iter().map(|c| c.turns.len()).sum::<usize>(),
                "runs": ctx.config.annotate.temperatures.len(),
                "flagged": flagged,
            }),
        })
    }
}

// ---- consensus ----

fn load_runs(store: &RunStore, config: &PipelineConfig, prefix: &str) -> Result<Vec<AnnotationRun>, PipelineError> {
    config
        .annotate
        .temperatures
        .iter()
        .map(|&t| {
            let records: Vec<AnnotationRecord> =
                store.load_records(&config.run_id, ArtifactKind::Annotations, &annotation_record_id(prefix, t))?;
            Ok(AnnotationRun::from_records(t, records))
        })
        .collect()
}

/// Stability across the temperature runs and, given a human annotation file
/// of `{conv_id, turn, labels}` lines, agreement of the consensus with it.
pub fn compute_agreement(
    store: &RunStore,
    config: &PipelineConfig,
    human: Option<&Path>,
) -> Result<(StabilityReport, Option<HumanAgreementReport>), PipelineError> {
    let runs = load_runs(store, config, "run")?;
    let stability = agreement_metrics(&runs)?;
    let Some(path) = human else {
        return Ok((stability, None));
    };
    let human: Vec<LabeledTurn> = read_jsonl(path)?;
    let human: BTreeMap<TurnKey, LabelSet> = human
        .into_iter()
        .map(|h| (TurnKey::new(h.conv_id, h.turn), h.labels))
        .collect();
    let model: BTreeMap<TurnKey, LabelSet> = consensus(&runs)?
        .into_iter()
        .map(|c| (c.key(), c.labels))
        .collect();
    Ok((stability, Some(human_agreement(&model, &human)?)))
}

pub struct Consensus;

impl Stage for Consensus {
    fn name(&self) -> &'static str {
        "consensus"
    }

    fn deps(&self) -> &'static [&'static str] {
        &["annotate"]
    }

    fn fingerprint(&self, config: &PipelineConfig) -> Result<Value, PipelineError> {
        Ok(json!({ "human": opt_file_hash(config.human_annotations.as_ref())? }))
    }

    fn run(&self, ctx: &StageContext<'_>) -> Result<StageOutput, PipelineError> {
        let runs = load_runs(ctx.store, ctx.config, "run")?;
        let records = consensus(&runs)?;
        let mut outputs = vec![ctx.save(ArtifactKind::Annotations, CONSENSUS, &records)?];
        if ctx.config.simulate.single_turn {
            let singles = consensus(&load_runs(ctx.store, ctx.config, "single")?)?;
            outputs.push(ctx.save(ArtifactKind::Annotations, SINGLE_CONSENSUS, &singles)?);
        }
        let (stability, human) = compute_agreement(ctx.store, ctx.config, ctx.config.human_annotations.as_deref())?;
        outputs.push(ctx.save(ArtifactKind::Annotations, AGREEMENT, &[&stability])?);
        if let Some(h) = &human {
            outputs.push(ctx.save(ArtifactKind::Annotations, HUMAN_AGREEMENT, &[h])?);
        }
        Ok(StageOutput {
            outputs,
            summary: json!({
                "turns": records.len(),
                "mean_pairwise_f1": stability.mean_pairwise_f1,
                "mean_pairwise_jaccard": stability.mean_pairwise_jaccard,
                "exact_threeway_match_rate": stability.exact_threeway_match_rate,
            }),
        })
    }
}

// ---- probe-train ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetricsRecord {
    pub layer: u16,
    pub metrics: CvMetrics,
}

fn layer_selection(opts: &ProbeOptions) -> LayerSelection {
    match opts.layers {
        Some([lo, hi]) => LayerSelection::Indices((lo..=hi).collect()),
        None => LayerSelection::all(),
    }
}

/// Training states from `probe.hsd`, or built from `probe.dialogues` by
/// teacher labeling and hidden-state extraction. Returns the records and the
/// files written.
pub fn build_training_states(ctx: &StageContext<'_>) -> Result<(Vec<HsdRecord>, Vec<PathBuf>), PipelineError> {
    let opts = &ctx.config.probe;
    if let Some(path) = &opts.hsd {
        return Ok((read_hsd(path)?, Vec::new()));
    }
    let Some(path) = &opts.dialogues else {
        return Err(PipelineError::Config("probe training needs `probe.hsd` or `probe.dialogues`".into()));
    };
    let dialogues: Vec<SourceDialogue> = read_jsonl(path)?;
    let rubric = opts.rubric.as_deref().unwrap_or(DEFAULT_DISTRESS_RUBRIC);
    let dataset = build_prefix_dataset(&dialogues, rubric, ctx.config.distress_teacher(), ctx.gateway, opts.seed);
    let mut outputs = vec![
        ctx.save(ArtifactKind::Probes, PREFIXES, &dataset.records)?,
        ctx.save(ArtifactKind::Probes, PREFIX_STATS, &[&dataset.stats])?,
    ];
    let hs = ctx.config.hidden_states();
    let client = HiddenStateClient::new(&hs.url, &hs.model);
    let selection = layer_selection(opts);
    let per_prefix: Vec<Vec<HsdRecord>> = dataset
        .records
        .par_iter()
        .filter(|r| r.label.is_some())
        .filter_map(|r| match client.extract(ctx.gateway, &r.messages, selection.clone()) {
            Ok(resp) => Some(
                resp.layers
                    .into_iter()
                    .map(|l| HsdRecord {
                        record_id: r.record_id.clone(),
                        group_id: r.group_id.clone(),
                        layer: l.index,
                        label: r.label,
                        vector: l.vector,
                    })
                    .collect(),
            ),
            Err(e) => {
                warn!(record_id = %r.record_id, error = %e, "hidden-state extraction failed; prefix dropped");
                None
            }
        })
        .collect();
    let records: Vec<HsdRecord> = per_prefix.into_iter().flatten().collect();
    let path = ctx.store.kind_dir(ctx.run_id(), ArtifactKind::Probes).join(TRAIN_HSD);
    write_hsd(&path, &records)?;
    outputs.push(path);
    Ok((records, outputs))
}

type LayerTraining = (BTreeMap<u16, LayerData>, BTreeMap<u16, CvMetrics>);

/// Cross-validated metrics for every layer within the configured range.
pub fn train_layer_probes(
    records: &[HsdRecord],
    opts: &ProbeOptions,
) -> Result<LayerTraining, PipelineError> {
    let mut data = LayerData::from_records(records);
    if let Some([lo, hi]) = opts.layers {
        data.retain(|l, _| (lo..=hi).contains(l));
    }
    if data.is_empty() {
        return Err(PipelineError::no_data("probe-train", "no labeled hidden states"));
    }
    let metrics = cross_validate_layers(&data, opts.folds, opts.seed, &opts.hyper)?;
    Ok((data, metrics))
}

pub fn select_probe_ensemble(
    data: &BTreeMap<u16, LayerData>,
    metrics: &BTreeMap<u16, CvMetrics>,
    k: usize,
    hyper: &ProbeHyperparams,
) -> Result<EnsembleProbe, PipelineError> {
    Ok(build_ensemble(data, metrics, k, hyper)?)
}

pub struct ProbeTrain;

impl Stage for ProbeTrain {
    fn name(&self) -> &'static str {
        "probe-train"
    }

    fn deps(&self) -> &'static [&'static str] {
        &[]
    }

    fn fingerprint(&self, config: &PipelineConfig) -> Result<Value, PipelineError> {
        let mut opts = serde_json::to_value(&config.probe).map_err(StoreError::from)?;
        opts["hsd"] = json!(opt_file_hash(config.probe.hsd.as_ref())?);
        opts["dialogues"] = json!(opt_file_hash(config.probe.dialogues.as_ref())?);
        Ok(json!({
            "options": opts,
            "teacher": endpoint_fp(config.distress_teacher()),
            "hidden_states": endpoint_fp(config.hidden_states()),
        }))
    }

    fn run(&self, ctx: &StageContext<'_>) -> Result<StageOutput, PipelineError> {
        let opts = &ctx.config.probe;
        let (records, mut outputs) = build_training_states(ctx)?;
        let (data, metrics) = train_layer_probes(&records, opts)?;
        let rows: Vec<LayerMetricsRecord> = metrics
            .iter()
            .map(|(&layer, m)| LayerMetricsRecord {
                layer,
                metrics: m.clone(),
            })
            .collect();
        outputs.push(ctx.save(ArtifactKind::Probes, LAYER_METRICS, &rows)?);
        let ensemble = select_probe_ensemble(&data, &metrics, opts.k, &opts.hyper)?;
        outputs.push(ctx.save(ArtifactKind::Probes, ENSEMBLE, &[&ensemble])?);
        info!(layers = ?ensemble.layers(), "probe ensemble selected");
        Ok(StageOutput {
            outputs,
            summary: json!({
                "layers_trained": metrics.len(),
                "examples": data.values().next().map_or(0, LayerData::len),
                "ensemble": ensemble.layers(),
                "macro_f1": ensemble.members.iter().map(|m| metrics[&m.layer].macro_f1).collect::<Vec<_>>(),
            }),
        })
    }
}

// ---- probe-infer ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnEstimate {
    pub conv_id: String,
    pub post_id: String,
    pub turn: usize,
    pub level: DistressLevel,
    pub probabilities: [f64; 3],
}

/// Ensemble estimate for every turn, from the prefix ending at that turn's
/// user message.
pub fn infer_distress(
    conversations: &[Conversation],
    ensemble: &EnsembleProbe,
    client: &HiddenStateClient,
    gateway: &Gateway,
) -> Result<Vec<TurnEstimate>, ProbeError> {
    let layers = LayerSelection::Indices(ensemble.layers());
    let items: Vec<(&Conversation, usize)> = conversations
        .iter()
        .flat_map(|c| (0..c.turns.len()).map(move |t| (c, t)))
        .collect();
    items
        .par_iter()
        .map(|&(c, t)| {
            let resp = client.extract(gateway, &prefix_messages(c, t), layers.clone())?;
            let est = ensemble_predict(ensemble, &resp.into_map())?;
            Ok(TurnEstimate {
                conv_id: c.conv_id.clone(),
                post_id: c.post_id.clone(),
                turn: c.turns[t].index,
                level: est.level,
                probabilities: est.probabilities,
            })
        })
        .collect()
}

pub fn load_estimates(store: &RunStore, run_id: &str) -> Result<Vec<TurnEstimate>, StoreError> {
    store.load_records(run_id, ArtifactKind::Probes, ESTIMATES)
}

pub struct ProbeInfer;

impl Stage for ProbeInfer {
    fn name(&self) -> &'static str {
        "probe-infer"
    }

    fn deps(&self) -> &'static [&'static str] {
        &["simulate", "probe-train"]
    }

    fn fingerprint(&self, config: &PipelineConfig) -> Result<Value, PipelineError> {
        Ok(json!({
            "hidden_states": endpoint_fp(config.hidden_states()),
            "include_partial": config.simulate.include_partial,
        }))
    }

    fn run(&self, ctx: &StageContext<'_>) -> Result<StageOutput, PipelineError> {
        let ensemble: EnsembleProbe = ctx
            .load_one(ArtifactKind::Probes, ENSEMBLE)?
            .ok_or_else(|| PipelineError::no_data(self.name(), "no trained ensemble"))?;
        let convs = load_analysis_conversations(ctx)?;
        let hs = ctx.config.hidden_states();
        let client = HiddenStateClient::new(&hs.url, &hs.model);
        let estimates = infer_distress(&convs, &ensemble, &client, ctx.gateway)?;
        let mut outputs = vec![ctx.save(ArtifactKind::Probes, ESTIMATES, &estimates)?];
        let posts: Vec<Post> = ctx.load(ArtifactKind::Corpus, POSTS)?;
        let human: BTreeMap<String, DistressLevel> = posts
            .iter()
            .filter_map(|p| p.human_distress.map(|h| (p.post_id.clone(), h)))
            .collect();
        let pairs: Vec<(String, DistressLevel)> = estimates.iter().map(|e| (e.post_id.clone(), e.level)).collect();
        let mut summary = json!({ "turns": estimates.len() });
        match compare_with_human(&pairs, &human) {
            Ok(cmp) => {
                summary["human_exact_match"] = json!(cmp.exact_match_rate);
                summary["human_qwk"] = json!(cmp.quadratic_weighted_kappa);
                outputs.push(ctx.save(ArtifactKind::Probes, HUMAN_COMPARISON, &[&cmp])?);
            }
            Err(ProbeError::NoOverlap) => {}
            Err(e) => return Err(e.into()),
        }
        Ok(StageOutput { outputs, summary })
    }
}

// ---- analyze ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisIssue {
    pub analysis: String,
    pub error: String,
}

pub struct Analyze;

fn contingency_id(c: Condition) -> String {
    format!("contingency_{}", c.as_str())
}

fn regression_id(c: Condition) -> String {
    format!("regression_{}", c.as_str())
}

impl Stage for Analyze {
    fn name(&self) -> &'static str {
        "analyze"
    }

    fn deps(&self) -> &'static [&'static str] {
        &["consensus", "probe-infer"]
    }

    fn fingerprint(&self, config: &PipelineConfig) -> Result<Value, PipelineError> {
        Ok(json!({
            "analysis": config.analysis,
            "annotator": annotator_hash(config),
            "include_partial": config.simulate.include_partial,
        }))
    }

    fn run(&self, ctx: &StageContext<'_>) -> Result<StageOutput, PipelineError> {
        let cfg = ctx.config;
        let convs = load_analysis_conversations(ctx)?;
        let consensus: Vec<ConsensusRecord> = ctx.load(ArtifactKind::Annotations, CONSENSUS)?;
        let distress: BTreeMap<TurnKey, DistressLevel> = load_estimates(ctx.store, ctx.run_id())?
            .into_iter()
            .map(|e| (TurnKey::new(e.conv_id, e.turn), e.level))
            .collect();
        let posts: Vec<Post> = ctx.load(ArtifactKind::Corpus, POSTS)?;
        let community_of: BTreeMap<String, String> =
            posts.into_iter().map(|p| (p.post_id, p.community)).collect();
        let tidy = build_tidy(&convs, &consensus, &distress, &community_of)?;
        let run = ctx.run_id();
        let mut outputs = vec![ctx.store.persist_file(run, ArtifactKind::Stats, TIDY, &tidy_to_csv(&tidy)?)?];

        let labels: Vec<LabelSet> = tidy.iter().map(|r| r.labels.clone()).collect();
        let prevalence = prevalence_report(&labels)?;
        outputs.push(ctx.save(ArtifactKind::Stats, PREVALENCE, &[&prevalence])?);

        let registry = ModelRegistry::default();
        let model = registry.get(&cfg.analysis.method)?;
        let mut issues = Vec::new();
        let mut distress_analysis = None;
        let mut significant = BTreeMap::new();
        for condition in [Condition::Distress, Condition::Community] {
            match per_tag_contingency(&tidy, condition, cfg.analysis.q) {
                Ok(a) => {
                    significant.insert(condition.as_str(), a.results.iter().filter(|r| r.significant).count());
                    outputs.push(ctx.save(ArtifactKind::Stats, &contingency_id(condition), &[&a])?);
                    if condition == Condition::Distress {
                        distress_analysis = Some(a);
                    }
                }
                Err(e) => issues.push(AnalysisIssue {
                    analysis: contingency_id(condition),
                    error: e.to_string(),
                }),
            }
            match per_tag_regression(&tidy, condition, model, &cfg.analysis) {
                Ok(a) => outputs.push(ctx.save(ArtifactKind::Stats, &regression_id(condition), &[&a])?),
                Err(e) => issues.push(AnalysisIssue {
                    analysis: regression_id(condition),
                    error: e.to_string(),
                }),
            }
        }
        for i in &issues {
            warn!(analysis = %i.analysis, error = %i.error, "analysis skipped");
        }
        outputs.push(ctx.save(ArtifactKind::Stats, ISSUES, &issues)?);
        let summary = RunSummary {
            run_id: run.to_string(),
            agent_model: cfg.agent().model.clone(),
            annotator_hash: annotator_hash(cfg),
            prevalence,
            distress: distress_analysis,
        };
        outputs.push(ctx.save(ArtifactKind::Stats, SUMMARY, &[&summary])?);
        Ok(StageOutput {
            outputs,
            summary: json!({
                "turns": tidy.len(),
                "significant": significant,
                "issues": issues.len(),
            }),
        })
    }
}

// ---- report ----

pub struct Report;

impl Report {
    fn other_summary(config: &PipelineConfig, other: &str) -> Result<RunSummary, PipelineError> {
        let store = RunStore::new(&config.runs_dir);
        let mut v: Vec<RunSummary> = store.load_records(other, ArtifactKind::Stats, SUMMARY)?;
        v.pop()
            .ok_or_else(|| PipelineError::no_data("report", format!("run `{other}` has no analysis summary")))
    }
}

impl Stage for Report {
    fn name(&self) -> &'static str {
        "report"
    }

    fn deps(&self) -> &'static [&'static str] {
        &["analyze"]
    }

    fn fingerprint(&self, config: &PipelineConfig) -> Result<Value, PipelineError> {
        let other = match &config.report.compare {
            Some(o) => {
                let path = RunStore::new(&config.runs_dir).artifact_path(o, ArtifactKind::Stats, SUMMARY);
                Some(file_hash(&path)?)
            }
            None => None,
        };
        Ok(json!({ "options": config.report, "compare_summary": other }))
    }

    fn run(&self, ctx: &StageContext<'_>) -> Result<StageOutput, PipelineError> {
        let cfg = ctx.config;
        let prevalence: PrevalenceReport = ctx
            .load_one(ArtifactKind::Stats, PREVALENCE)?
            .ok_or_else(|| PipelineError::no_data(self.name(), "no prevalence statistics"))?;
        let mut rendered: Vec<Rendered> = vec![render_prevalence(&prevalence)?];
        let distress: Option<ContingencyAnalysis> = ctx.load_one(ArtifactKind::Stats, &contingency_id(Condition::Distress))?;
        if let Some(d) = &distress {
            rendered.push(render_distress(d, "Estimated distress and support tags")?);
        }
        let community: Option<ContingencyAnalysis> =
            ctx.load_one(ArtifactKind::Stats, &contingency_id(Condition::Community))?;
        if let Some(c) = &community {
            let adjusted: Option<RegressionAnalysis> =
                ctx.load_one(ArtifactKind::Stats, &regression_id(Condition::Community))?;
            let (main, odds) = render_community(&community_spread(c)?, adjusted.as_ref())?;
            rendered.push(main);
            rendered.extend(odds);
        }
        if let Some(other) = &cfg.report.compare {
            let mine: RunSummary = ctx
                .load_one(ArtifactKind::Stats, SUMMARY)?
                .ok_or_else(|| PipelineError::no_data(self.name(), "no analysis summary"))?;
            let theirs = Self::other_summary(cfg, other)?;
            let r = cross_model_report(&mine, &theirs)?;
            rendered.push(render_cross_model(&r, &mine, &theirs)?);
        }
        if let Some(conv_id) = &cfg.report.vignette {
            let consensus: Vec<ConsensusRecord> = ctx.load(ArtifactKind::Annotations, CONSENSUS)?;
            let trajectory: Vec<(usize, LabelSet)> = consensus
                .into_iter()
                .filter(|c| &c.conv_id == conv_id)
                .map(|c| (c.turn, c.labels))
                .collect();
            let convs: Vec<Conversation> = ctx.load(ArtifactKind::Conversations, CONVERSATIONS)?;
            let post_id = convs
                .iter()
                .find(|c| &c.conv_id == conv_id)
                .map_or(conv_id.as_str(), |c| c.post_id.as_str());
            let singles: Vec<ConsensusRecord> = if cfg.simulate.single_turn {
                ctx.load(ArtifactKind::Annotations, SINGLE_CONSENSUS)?
            } else {
                Vec::new()
            };
            let single = singles.iter().find(|s| s.conv_id == post_id).map(|s| &s.labels);
            let v = vignette_comparison(conv_id, &trajectory, single)?;
            rendered.push(render_vignette(&v)?);
        }
        let run = ctx.run_id();
        let mut outputs = Vec::new();
        for r in &rendered {
            outputs.push(ctx.store.persist_file(run, ArtifactKind::Reports, &format!("{}.csv", r.name), r.csv.as_bytes())?);
            outputs.push(ctx.store.persist_file(run, ArtifactKind::Reports, &format!("{}.md", r.name), r.markdown.as_bytes())?);
        }
        Ok(StageOutput {
            outputs,
            summary: json!({ "reports": rendered.iter().map(|r| r.name).collect::<Vec<_>>() }),
        })
    }
}

pub(crate) fn all_stages() -> Vec<Box<dyn Stage>> {
    vec![
        Box::new(Ingest),
        Box::new(ShardStage),
        Box::new(Simulate),
        Box::new(Annotate),
        Box::new(Consensus),
        Box::new(ProbeTrain),
        Box::new(ProbeInfer),
        Box::new(Analyze),
        Box::new(Report),
    ]
}
