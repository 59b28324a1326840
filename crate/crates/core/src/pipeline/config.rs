use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::gateway::GatewayConfig;
use crate::probe::ProbeHyperparams;
use crate::shard::{DEFAULT_ARTIFACT_PATTERNS, DEFAULT_MAX_ATTEMPTS};
use crate::stats::AnalysisOptions;

/// One chat-completions (or hidden-state) endpoint alias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL; `/chat/completions` is appended per request.
    pub url: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    /// Environment variable holding the bearer token.
    pub api_key_env: Option<String>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            url: "http://127.0.0.1:8000/v1".to_string(),
            model: String::new(),
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
            api_key_env: None,
        }
    }
}

/// Endpoint alias used by each pipeline role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    pub shard_teacher: String,
    pub agent: String,
    pub annotator: String,
    pub distress_teacher: String,
    pub hidden_states: String,
}

impl Roles {
    fn entries(&self) -> [(&'static str, &str); 5] {
        [
            ("shard_teacher", &self.shard_teacher),
            ("agent", &self.agent),
            ("annotator", &self.annotator),
            ("distress_teacher", &self.distress_teacher),
            ("hidden_states", &self.hidden_states),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShardOptions {
    pub max_attempts: u32,
    pub artifact_patterns: Vec<String>,
}

impl Default for ShardOptions {
    fn default() -> Self {
        ShardOptions {
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            artifact_patterns: DEFAULT_ARTIFACT_PATTERNS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOptions {
    pub single_turn: bool,
    /// Keep completed turns of partial conversations in the analysis.
    pub include_partial: bool,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        SimulateOptions {
            single_turn: true,
            include_partial: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateOptions {
    pub temperatures: Vec<f64>,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions {
            temperatures: vec![0.0, 0.3, 0.7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeOptions {
    /// Pre-extracted training states.
    pub hsd: Option<PathBuf>,
    /// Source dialogues to label and extract when no HSD file is given.
    pub dialogues: Option<PathBuf>,
    /// Severity rubric replacing the built-in one.
    pub rubric: Option<String>,
    /// Inclusive layer range to train; all layers when absent.
    pub layers: Option<[u16; 2]>,
    pub folds: usize,
    pub k: usize,
    pub seed: u64,
    pub hyper: ProbeHyperparams,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            hsd: None,
            dialogues: None,
            rubric: None,
            layers: None,
            folds: 5,
            k: crate::probe::DEFAULT_K,
            seed: 0,
            hyper: ProbeHyperparams::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub compare: Option<String>,
    pub vignette: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub run_id: String,
    pub corpus: PathBuf,
    #[serde(default = "default_runs_dir")]
    pub runs_dir: PathBuf,
    /// Human SSBC annotations for agreement reporting.
    #[serde(default)]
    pub human_annotations: Option<PathBuf>,
    pub endpoints: BTreeMap<String, EndpointConfig>,
    pub roles: Roles,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub shard: ShardOptions,
    #[serde(default)]
    pub simulate: SimulateOptions,
    #[serde(default)]
    pub annotate: AnnotateOptions,
    #[serde(default)]
    pub probe: ProbeOptions,
    #[serde(default)]
    pub analysis: AnalysisOptions,
    #[serde(default)]
    pub report: ReportOptions,
}

fn default_runs_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn var_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex"))
}

/// Replace `${NAME}` with the value of `lookup(NAME)`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, PipelineError> {
    let mut missing = None;
    let out = var_re().replace_all(text, |c: &regex::Captures| match lookup(&c[1]) {
        Some(v) => v,
        None => {
            missing.get_or_insert_with(|| c[1].to_string());
            String::new()
        }
    });
    match missing {
        Some(name) => Err(PipelineError::Config(format!("environment variable `{name}` is not set"))),
        None => Ok(out.into_owned()),
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let text = interpolate(text, |k| std::env::var(k).ok())?;
        let cfg: PipelineConfig = toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative paths in the file resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.runs_dir);
        if let Some(p) = self.probe.hsd.as_mut() {
            fix(p);
        }
        if let Some(p) = self.probe.dialogues.as_mut() {
            fix(p);
        }
        if let Some(p) = self.human_annotations.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.run_id.trim().is_empty() {
            return bad("run_id is empty".into());
        }
        for (role, alias) in self.roles.entries() {
            match self.endpoints.get(alias) {
                None => return bad(format!("role `{role}` refers to undefined endpoint `{alias}`")),
                Some(e) if e.model.trim().is_empty() => {
                    return bad(format!("endpoint `{alias}` has no model"))
                }
                Some(_) => {}
            }
        }
        let temps = &self.annotate.temperatures;
        if temps.len() != crate::ssbc::CONSENSUS_RUNS {
            return bad(format!(
                "annotate.temperatures must list exactly {} values, got {}",
                crate::ssbc::CONSENSUS_RUNS,
                temps.len()
            ));
        }
        for (i, t) in temps.iter().enumerate() {
            if !t.is_finite() || !(0.0..=2.0).contains(t) {
                return bad(format!("annotation temperature {t} outside [0, 2]"));
            }
            if temps[..i].contains(t) {
                return bad(format!("annotation temperature {t} listed twice"));
            }
        }
        if self.probe.folds < 2 {
            return bad("probe.folds must be at least 2".into());
        }
        if self.probe.k == 0 {
            return bad("probe.k must be positive".into());
        }
        if let Some([lo, hi]) = self.probe.layers {
            if lo > hi {
                return bad(format!("probe.layers range [{lo}, {hi}] is empty"));
            }
        }
        if !(0.0..=1.0).contains(&self.analysis.q) || self.analysis.q == 0.0 {
            return bad(format!("analysis.q = {} outside (0, 1]", self.analysis.q));
        }
        Ok(())
    }

    pub fn endpoint(&self, alias: &str) -> &EndpointConfig {
        &self.endpoints[alias]
    }

    pub fn shard_teacher(&self) -> &EndpointConfig {
        self.endpoint(&self.roles.shard_teacher)
    }

    pub fn agent(&self) -> &EndpointConfig {
        self.endpoint(&self.roles.agent)
    }

    pub fn annotator(&self) -> &EndpointConfig {
        self.endpoint(&self.roles.annotator)
    }

    pub fn distress_teacher(&self) -> &EndpointConfig {
        self.endpoint(&self.roles.distress_teacher)
    }

    pub fn hidden_states(&self) -> &EndpointConfig {
        self.endpoint(&self.roles.hidden_states)
    }

    /// Point every endpoint alias at `url`.
    pub fn set_all_urls(&mut self, url: &str) {
        for e in self.endpoints.values_mut() {
            e.url = url.to_string();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
run_id = "r1"
corpus = "posts.jsonl"

[endpoints.llm]
url = "http://localhost:9/v1"
model = "m"

[endpoints.hs]
url = "http://localhost:9"
model = "hs-model"

[roles]
shard_teacher = "llm"
agent = "llm"
annotator = "llm"
distress_teacher = "llm"
hidden_states = "hs"
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = PipelineConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.annotate.temperatures, vec![0.0, 0.3, 0.7]);
        assert_eq!(cfg.probe.k, 3);
        assert_eq!(cfg.analysis.method, "random_intercept");
        assert_eq!(cfg.runs_dir, PathBuf::from("runs"));
        assert_eq!(cfg.agent().max_tokens, 1024);
    }

    #[test]
    fn undefined_alias_rejected() {
        let text = MINIMAL.replace("agent = \"llm\"", "agent = \"nope\"");
        let err = PipelineConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
    }

    #[test]
    fn temperatures_must_be_three_distinct() {
        let two = format!("{MINIMAL}\n[annotate]\ntemperatures = [0.0, 0.3]\n");
        assert!(PipelineConfig::from_toml(&two).is_err());
        let dup = format!("{MINIMAL}\n[annotate]\ntemperatures = [0.0, 0.3, 0.3]\n");
        assert!(PipelineConfig::from_toml(&dup).is_err());
    }

    #[test]
    fn env_interpolation() {
        let env = |k: &str| (k == "HOST").then(|| "example.org".to_string());
        assert_eq!(interpolate("http://${HOST}/v1", env).unwrap(), "http://example.org/v1");
        assert!(interpolate("${MISSING_VAR_X}", env).is_err());
        assert_eq!(interpolate("no vars", env).unwrap(), "no vars");
    }
}
