use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ssbc_audit_core::mock::MockServer;
use ssbc_audit_core::pipeline::{compute_agreement, Pipeline, PipelineConfig, StageSummary};
use ssbc_audit_core::probe::build_prefix_dataset;
use ssbc_audit_core::store::{read_jsonl, to_jsonl, write_atomic};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "ssbc-audit", version, about = "Multi-turn support-behavior audit pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, env = "SSBC_AUDIT_CONFIG")]
    config: Option<PathBuf>,
    /// Run id; overrides `run_id` in the configuration.
    #[arg(long, global = true)]
    run: Option<String>,
    /// Base URL of the agent endpoint.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Agent model name.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Retries after a rate limit or server error.
    #[arg(long, global = true)]
    max_retries: Option<u32>,
    /// Bound on concurrent HTTP requests.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    /// Serve every request from the cache; a miss fails.
    #[arg(long, global = true)]
    offline: bool,
    /// Re-run stages even when up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Log filter, e.g. `info` or `ssbc_audit_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
}

#[derive(Subcommand)]
enum Command {
    /// Every stage in dependency order.
    All,
    /// Load and validate the post corpus.
    Ingest,
    /// Split posts into verbatim shards with the teacher model.
    Shard {
        #[arg(long)]
        max_attempts: Option<u32>,
    },
    /// Replay shards as user turns against the support agent.
    Simulate {
        /// Endpoint alias for the support agent.
        #[arg(long)]
        agent: Option<String>,
        /// Also collect single-turn replies to the full posts.
        #[arg(long)]
        single_turn: Option<bool>,
    },
    /// Label every assistant turn at each annotation temperature.
    Annotate {
        /// Comma-separated annotation temperatures.
        #[arg(long, value_delimiter = ',')]
        temps: Option<Vec<f64>>,
    },
    /// Majority-vote labels across the annotation runs.
    Consensus,
    /// Annotation stability and, optionally, agreement with human labels.
    Agreement {
        /// JSONL of `{conv_id, turn, labels}`.
        #[arg(long)]
        human: Option<PathBuf>,
    },
    /// Distress probe training, selection and inference.
    #[command(subcommand)]
    Probe(ProbeCommand),
    /// Same as `probe train` with configured settings.
    #[command(name = "probe-train")]
    ProbeTrain,
    /// Same as `probe infer`.
    #[command(name = "probe-infer")]
    ProbeInfer,
    /// Prevalence, distress, community and regression statistics.
    Analyze,
    /// Render tables and markdown reports.
    Report {
        /// Another run to compare against.
        #[arg(long)]
        compare: Option<String>,
        /// Conversation id for the trajectory vs single-turn comparison.
        #[arg(long)]
        vignette: Option<String>,
    },
    /// Serve the deterministic mock LLM and hidden-state endpoints.
    MockServer {
        #[arg(long, default_value_t = 8089)]
        port: u16,
    },
}

#[derive(Subcommand)]
enum ProbeCommand {
    /// Cross-validate probes at every layer and keep the top K.
    Train {
        /// Pre-extracted hidden states.
        #[arg(long)]
        hsd: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Re-select the ensemble size.
    Select {
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Turn-level distress estimates for the run's conversations.
    Infer,
    /// Teacher-labeled prefix file for hidden-state extraction.
    Prefixes {
        #[arg(long)]
        dialogues: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let path = g.config.as_ref().context("--config is required")?;
    let mut cfg = PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(run) = &g.run {
        cfg.run_id = run.clone();
    }
    if let Some(url) = &g.endpoint {
        let alias = cfg.roles.agent.clone();
        cfg.endpoints.get_mut(&alias).expect("validated alias").url = url.clone();
    }
    if let Some(model) = &g.model {
        let alias = cfg.roles.agent.clone();
        cfg.endpoints.get_mut(&alias).expect("validated alias").model = model.clone();
    }
    if let Some(n) = g.max_retries {
        cfg.gateway.max_retries = n;
    }
    if let Some(n) = g.concurrency {
        cfg.gateway.concurrency = n.max(1);
    }
    cfg.gateway.offline |= g.offline;
    Ok(cfg)
}

fn print(summary: &StageSummary) -> Result<()> {
    println!("{}", serde_json::to_string(summary)?);
    Ok(())
}

fn run_stages(cfg: PipelineConfig, stages: &[&str], force: bool) -> Result<()> {
    cfg.validate()?;
    let pipeline = Pipeline::new(cfg);
    for s in stages {
        print(&pipeline.run_stage(s, force)?)?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let force = g.force;
    match cli.command {
        Command::MockServer { port } => {
            let server = MockServer::bind(&format!("127.0.0.1:{port}"))?;
            println!("{}", server.url());
            server.wait();
            Ok(())
        }
        Command::All => {
            let pipeline = Pipeline::new(load_config(g)?);
            for s in pipeline.run_all(force)? {
                print(&s)?;
            }
            Ok(())
        }
        Command::Ingest => run_stages(load_config(g)?, &["ingest"], force),
        Command::Shard { max_attempts } => {
            let mut cfg = load_config(g)?;
            if let Some(n) = max_attempts {
                cfg.shard.max_attempts = n;
            }
            run_stages(cfg, &["shard"], force)
        }
        Command::Simulate { agent, single_turn } => {
            let mut cfg = load_config(g)?;
            if let Some(a) = agent {
                cfg.roles.agent = a;
            }
            if let Some(s) = single_turn {
                cfg.simulate.single_turn = s;
            }
            run_stages(cfg, &["simulate"], force)
        }
        Command::Annotate { temps } => {
            let mut cfg = load_config(g)?;
            if let Some(t) = temps {
                cfg.annotate.temperatures = t;
            }
            run_stages(cfg, &["annotate"], force)
        }
        Command::Consensus => run_stages(load_config(g)?, &["consensus"], force),
        Command::Agreement { human } => {
            let cfg = load_config(g)?;
            let pipeline = Pipeline::new(cfg);
            let (stability, human) = compute_agreement(pipeline.store(), pipeline.config(), human.as_deref())?;
            println!("{}", serde_json::to_string(&stability)?);
            if let Some(h) = human {
                println!("{}", serde_json::to_string(&h)?);
            }
            Ok(())
        }
        Command::ProbeTrain | Command::Probe(ProbeCommand::Train { hsd: None, k: None }) => {
            run_stages(load_config(g)?, &["probe-train"], force)
        }
        Command::Probe(ProbeCommand::Train { hsd, k }) => {
            let mut cfg = load_config(g)?;
            if let Some(p) = hsd {
                cfg.probe.hsd = Some(p);
                cfg.probe.dialogues = None;
            }
            if let Some(k) = k {
                cfg.probe.k = k;
            }
            run_stages(cfg, &["probe-train"], force)
        }
        Command::Probe(ProbeCommand::Select { k }) => {
            let mut cfg = load_config(g)?;
            cfg.probe.k = k;
            run_stages(cfg, &["probe-train"], force)
        }
        Command::ProbeInfer | Command::Probe(ProbeCommand::Infer) => {
            run_stages(load_config(g)?, &["probe-infer"], force)
        }
        Command::Probe(ProbeCommand::Prefixes { dialogues, out }) => {
            let cfg = load_config(g)?;
            let pipeline = Pipeline::new(cfg);
            let cfg = pipeline.config();
            let source = read_jsonl(&dialogues)?;
            let rubric = cfg
                .probe
                .rubric
                .as_deref()
                .unwrap_or(ssbc_audit_core::probe::DEFAULT_DISTRESS_RUBRIC);
            let dataset =
                build_prefix_dataset(&source, rubric, cfg.distress_teacher(), pipeline.gateway(), cfg.probe.seed);
            write_atomic(&out, &to_jsonl(&dataset.records)?)?;
            println!("{}", serde_json::to_string(&dataset.stats)?);
            Ok(())
        }
        Command::Analyze => run_stages(load_config(g)?, &["analyze"], force),
        Command::Report { compare, vignette } => {
            let mut cfg = load_config(g)?;
            if compare.is_some() {
                cfg.report.compare = compare;
            }
            if vignette.is_some() {
                cfg.report.vignette = vignette;
            }
            if cfg.report.compare.as_deref() == Some(cfg.run_id.as_str()) {
                bail!("--compare names the run being reported");
            }
            run_stages(cfg, &["report"], force)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(&cli.global.log));
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_current_span(true)
        .with_writer(std::io::stderr)
        .init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = format!("{e:#}"), "failed");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
