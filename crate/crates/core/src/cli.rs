//! The `semcert` command line.
//!
//! Failures print one JSON object on stderr (`{"error":kind,"message":...}`)
//! and exit with a code per kind; see [`CliError::exit_code`]. Every command
//! that writes into an output directory also writes `manifest.json` there,
//! holding the command, its resolved settings and input digests.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::adapter::{open_provider, serve_mock, serve_mock_tcp, AdapterSpec, PolicyFile, TableProvider, VerdictTable};
use crate::certification::{certify, sample_audit_plan, CertifiedCore, Event, VerdictProvider};
use crate::experiments::{
    emit_static, emit_timeseries, emit_tradeoff, run_static, run_timeseries, run_tradeoff, ExperimentError, Scenario,
    StaticConfig, TimeseriesConfig, TradeoffConfig, TwoPopulationModel,
};
use crate::guard::{measure_disagreement_logged, write_evaluation_log};
use crate::ledger::{replay_file, verify_file, ChainStatus, Ledger, LedgerError, ReplayError};
use crate::lifecycle::{recertify, renegotiate, Entrenchment};
use crate::simagents::{color_vocabulary, gen_events, gen_policies, Condition, SimConfig, SimProvider};
use crate::stats::{normal_quantile, wilson_upper, ProtocolParams};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("ledger chain invalid at seq {invalid_at}")]
    LedgerInvalid { invalid_at: u64 },
    #[error("{0}")]
    Provider(String),
    #[error(transparent)]
    Replay(ReplayError),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::LedgerInvalid { .. } => "ledger_invalid",
            Self::Provider(_) => "provider",
            Self::Replay(_) => "replay",
            Self::Domain(_) => "domain",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Config(_) => 3,
            Self::Io { .. } => 4,
            Self::LedgerInvalid { .. } => 5,
            Self::Provider(_) => 6,
            Self::Replay(_) => 7,
            Self::Domain(_) => 8,
        }
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        if let Self::LedgerInvalid { invalid_at } = self {
            v["invalid_at"] = json!(invalid_at);
        }
        v
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

impl From<LedgerError> for CliError {
    fn from(e: LedgerError) -> Self {
        match e {
            LedgerError::Tampered { seq } => Self::LedgerInvalid { invalid_at: seq },
            LedgerError::Io(source) => Self::Io { path: PathBuf::from("<ledger>"), source },
            other => Self::Domain(other.to_string()),
        }
    }
}

impl From<ReplayError> for CliError {
    fn from(e: ReplayError) -> Self {
        match e {
            ReplayError::Tampered { seq } | ReplayError::Ledger(LedgerError::Tampered { seq }) => {
                Self::LedgerInvalid { invalid_at: seq }
            }
            ReplayError::Ledger(other) => other.into(),
            other => Self::Replay(other),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(m) => Self::Config(m),
            ExperimentError::Io(source) => Self::Io { path: PathBuf::from("<output>"), source },
            other => Self::Domain(other.to_string()),
        }
    }
}

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

// ------------------------------------------------------------------ args

#[derive(Debug, Parser)]
#[command(name = "semcert", version, about = "Certify shared vocabulary between two agents")]
pub struct Cli {
    /// JSON file supplying values for omitted flags; flags win on conflict.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Audit both agents on every term and write the certified core.
    Certify(CertifyArgs),
    #[command(subcommand)]
    Guard(GuardCommand),
    /// Re-audit core terms on fresh events and revoke those that fail.
    Recertify(RecertifyArgs),
    /// Restore a term via the entrenched agent's interpretation.
    Renegotiate(RenegotiateArgs),
    #[command(subcommand)]
    Ledger(LedgerCommand),
    #[command(subcommand)]
    Exp(ExpCommand),
    #[command(subcommand)]
    Sim(SimCommand),
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Serve a recorded verdict table over the wire protocol (stdio or TCP).
    MockAgent(MockAgentArgs),
}

#[derive(Debug, Args)]
pub struct ParamArgs {
    /// Contradiction threshold [default: 0.05]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Confidence parameter of the Wilson bound [default: 0.05]
    #[arg(long)]
    pub delta: Option<f64>,
    /// Minimum coverage [default: 0.10]
    #[arg(long)]
    pub rho_min: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AgentArgs {
    /// Agent adapter spec (sim:<policy-file>, cmd:<argv>, tcp:<host:port>); give twice
    #[arg(long = "agents", value_name = "SPEC")]
    pub agents: Vec<String>,
    /// Per-verdict timeout for external agents, in ms [default: 30000]
    #[arg(long)]
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory [default: semcert-out]
    #[arg(long, env = "SEMCERT_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    /// Audit pool, JSON lines of events
    #[arg(long)]
    pub events: PathBuf,
    #[command(flatten)]
    pub agents: AgentArgs,
    #[command(flatten)]
    pub params: ParamArgs,
    /// Events audited per term [default: 170]
    #[arg(long)]
    pub per_term: Option<usize>,
    /// Comma-separated vocabulary [default: red,yellow,green,cyan,blue,magenta]
    #[arg(long)]
    pub vocab: Option<String>,
    /// Root seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epoch stamped on ledger entries [default: 0]
    #[arg(long)]
    pub epoch: Option<u64>,
    /// Existing ledger to extend; copied into the output directory first
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Subcommand)]
pub enum GuardCommand {
    /// Measure guarded and unguarded disagreement on held-out events.
    Measure(GuardArgs),
}

#[derive(Debug, Args)]
pub struct GuardArgs {
    /// Certified core JSON
    #[arg(long)]
    pub core: PathBuf,
    /// Held-out events, JSON lines
    #[arg(long)]
    pub events: PathBuf,
    #[command(flatten)]
    pub agents: AgentArgs,
    /// Comma-separated vocabulary [default: red,yellow,green,cyan,blue,magenta]
    #[arg(long)]
    pub vocab: Option<String>,
    /// Epoch passed to the agents [default: 0]
    #[arg(long)]
    pub epoch: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct RecertifyArgs {
    #[arg(long)]
    pub ledger: PathBuf,
    #[arg(long)]
    pub core: PathBuf,
    /// Fresh events, JSON lines
    #[arg(long)]
    pub events: PathBuf,
    /// New epoch; must exceed the core's
    #[arg(long)]
    pub epoch: u64,
    #[command(flatten)]
    pub agents: AgentArgs,
    #[command(flatten)]
    pub params: ParamArgs,
    /// Events re-audited per term [default: 170]
    #[arg(long)]
    pub per_term: Option<usize>,
    /// Root seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct RenegotiateArgs {
    #[arg(long)]
    pub term: String,
    #[arg(long)]
    pub ledger: PathBuf,
    #[arg(long)]
    pub core: PathBuf,
    /// Fresh events, JSON lines
    #[arg(long)]
    pub events: PathBuf,
    /// New epoch; must exceed the core's
    #[arg(long)]
    pub epoch: u64,
    #[command(flatten)]
    pub agents: AgentArgs,
    #[command(flatten)]
    pub params: ParamArgs,
    /// Events re-audited [default: 170]
    #[arg(long)]
    pub per_term: Option<usize>,
    /// Root seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Subcommand)]
pub enum LedgerCommand {
    /// Check the hash chain; exit 5 and report the first bad seq if broken.
    Verify {
        path: PathBuf,
    },
    /// Recompute the certified core of one epoch from the ledger alone.
    Replay {
        path: PathBuf,
        /// Epoch to replay [default: 0]
        #[arg(long)]
        epoch: Option<u64>,
        #[command(flatten)]
        params: ParamArgs,
        /// Also write core.json and a manifest here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExpCommand {
    /// Guarded vs unguarded disagreement across divergence conditions.
    Static(StaticArgs),
    /// Drift, recertification and renegotiation over epochs.
    Timeseries(TimeseriesArgs),
    /// Coverage and guarded disagreement as functions of tau.
    Tradeoff(TradeoffArgs),
}

#[derive(Debug, Args)]
pub struct StaticArgs {
    /// noise-only, moderate, high or all [default: all]
    #[arg(long)]
    pub condition: Option<String>,
    /// Runs per condition [default: 100]
    #[arg(long)]
    pub runs: Option<usize>,
    /// Root seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub params: ParamArgs,
    /// Events audited per term [default: 170]
    #[arg(long)]
    pub per_term: Option<usize>,
    /// Audit pool size [default: 400]
    #[arg(long)]
    pub audit_pool: Option<usize>,
    /// Held-out events [default: 600]
    #[arg(long)]
    pub held_out: Option<usize>,
    /// Moderate Drift shift in degrees [default: calibrated to 7.4% unguarded]
    #[arg(long)]
    pub moderate_shift: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct TimeseriesArgs {
    /// baseline, frozen, recert, renegotiate or all [default: all]
    #[arg(long)]
    pub scenario: Option<String>,
    /// Epochs [default: 50]
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Epoch at which drift is injected [default: 10]
    #[arg(long)]
    pub drift_epoch: Option<u64>,
    /// Drift in degrees [default: 16]
    #[arg(long)]
    pub drift_magnitude: Option<f64>,
    /// Trajectories averaged per epoch [default: 30]
    #[arg(long)]
    pub runs: Option<usize>,
    /// Root seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub params: ParamArgs,
    /// Events audited per term at epoch 0 [default: 170]
    #[arg(long)]
    pub per_term: Option<usize>,
    /// Fresh events audited per term when recertifying [default: 800]
    #[arg(long)]
    pub recert_per_term: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct TradeoffArgs {
    /// Comma-separated fractions of well-aligned terms [default: 0.3,0.5,0.7,0.9]
    #[arg(long)]
    pub pi: Option<String>,
    /// start:stop:step, inclusive [default: 0.01:0.20:0.01]
    #[arg(long)]
    pub tau_grid: Option<String>,
    /// Contradiction rate of aligned terms [default: 0.02]
    #[arg(long)]
    pub p_lo: Option<f64>,
    /// Contradiction rate of misaligned terms [default: 0.12]
    #[arg(long)]
    pub p_hi: Option<f64>,
    /// Eligible comparisons per audit [default: 120]
    #[arg(long)]
    pub k_audit: Option<u64>,
    /// Confidence parameter [default: 0.05]
    #[arg(long)]
    pub delta: Option<f64>,
    /// Monte Carlo trials per pi for the cross-check [default: 100000]
    #[arg(long)]
    pub mc: Option<usize>,
    /// Root seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Subcommand)]
pub enum SimCommand {
    /// Uniform-hue events; writes events.jsonl, audit.jsonl and held_out.jsonl.
    GenEvents {
        /// Number of events [default: 1000]
        #[arg(long)]
        n: Option<usize>,
        /// Leading events assigned to the audit pool [default: 400]
        #[arg(long)]
        audit: Option<usize>,
        /// Root seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Agent policy files A1.json and A2.json for a condition.
    GenAgents {
        /// noise-only, moderate or high [default: noise-only]
        #[arg(long)]
        condition: Option<String>,
        /// Root seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum StatsCommand {
    /// One-sided Wilson upper bound for c contradictions in k comparisons.
    Wilson {
        #[arg(long)]
        c: u64,
        #[arg(long)]
        k: u64,
        /// Confidence parameter [default: 0.05]
        #[arg(long)]
        delta: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct MockAgentArgs {
    /// Verdict table JSON
    #[arg(long)]
    pub table: PathBuf,
    /// Serve TCP on this address instead of stdio
    #[arg(long)]
    pub listen: Option<String>,
}

// ---------------------------------------------------------------- config

/// Values a `--config` file may supply.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub tau: Option<f64>,
    pub delta: Option<f64>,
    pub rho_min: Option<f64>,
    pub seed: Option<u64>,
    pub per_term: Option<usize>,
    pub recert_per_term: Option<usize>,
    pub audit_pool: Option<usize>,
    pub held_out: Option<usize>,
    pub runs: Option<usize>,
    pub epochs: Option<u64>,
    pub drift_epoch: Option<u64>,
    pub drift_magnitude: Option<f64>,
    pub moderate_shift: Option<f64>,
    pub timeout_ms: Option<u64>,
    pub vocab: Option<Vec<String>>,
    pub agents: Option<Vec<String>>,
    pub out: Option<PathBuf>,
    pub condition: Option<String>,
    pub scenario: Option<String>,
    pub pi: Option<Vec<f64>>,
    pub tau_grid: Option<String>,
    pub p_lo: Option<f64>,
    pub p_hi: Option<f64>,
    pub k_audit: Option<u64>,
    pub mc: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    fn params(&self, args: &ParamArgs) -> Result<ProtocolParams, CliError> {
        let d = ProtocolParams::default();
        ProtocolParams::new(
            args.tau.or(self.tau).unwrap_or(d.tau),
            args.delta.or(self.delta).unwrap_or(d.delta),
            args.rho_min.or(self.rho_min).unwrap_or(d.rho_min),
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }

    fn out(&self, args: &OutArgs) -> PathBuf {
        args.out.clone().or_else(|| self.out.clone()).unwrap_or_else(|| PathBuf::from("semcert-out"))
    }

    fn vocab(&self, flag: &Option<String>) -> Vec<String> {
        match flag {
            Some(list) => list.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect(),
            None => self.vocab.clone().unwrap_or_else(color_vocabulary),
        }
    }

    fn timeout(&self, args: &AgentArgs) -> Duration {
        Duration::from_millis(args.timeout_ms.or(self.timeout_ms).unwrap_or(30_000))
    }

    fn agent_specs(&self, args: &AgentArgs) -> Result<[AdapterSpec; 2], CliError> {
        let specs = if args.agents.is_empty() { self.agents.clone().unwrap_or_default() } else { args.agents.clone() };
        let [a, b] = <[String; 2]>::try_from(specs)
            .map_err(|got| CliError::Usage(format!("--agents must be given exactly twice, got {}", got.len())))?;
        let parse = |s: &str| s.parse::<AdapterSpec>().map_err(|e| CliError::Usage(e.to_string()));
        Ok([parse(&a)?, parse(&b)?])
    }
}

// --------------------------------------------------------------- helpers

pub fn read_events(path: &Path) -> Result<Vec<Event>, CliError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line)
            .map_err(|e| CliError::Config(format!("{}:{}: bad event: {e}", path.display(), i + 1)))?;
        events.push(event);
    }
    Ok(events)
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<(), CliError> {
    let mut text = String::new();
    for e in events {
        text.push_str(&serde_json::to_string(e).expect("event serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

fn read_core(path: &Path) -> Result<CertifiedCore, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: bad core: {e}", path.display())))
}

fn write_pretty<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Prints one line on stdout. A closed pipe (`| head`) is not an error.
fn say(line: impl std::fmt::Display) {
    let mut stdout = io::stdout().lock();
    let _ = writeln!(stdout, "{line}").and_then(|_| stdout.flush());
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// argv without the program name and without `--out`, so that reruns into
/// another directory produce an identical manifest.
fn manifest_argv(argv: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for arg in argv.iter().skip(1) {
        if skip {
            skip = false;
        } else if arg == "--out" {
            skip = true;
        } else if !arg.starts_with("--out=") {
            out.push(arg.clone());
        }
    }
    out
}

struct Ctx {
    argv: Vec<String>,
    config: RunConfig,
    config_path: Option<PathBuf>,
}

impl Ctx {
    fn write_manifest(&self, dir: &Path, command: &str, settings: Value, inputs: &[&Path]) -> Result<(), CliError> {
        let mut digests = BTreeMap::new();
        for path in inputs.iter().copied().chain(self.config_path.as_deref()) {
            digests.insert(path.display().to_string(), sha256_file(path)?);
        }
        let manifest = json!({
            "tool": "semcert",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "argv": manifest_argv(&self.argv),
            "settings": settings,
            "inputs": digests,
        });
        write_pretty(&dir.join("manifest.json"), &manifest)
    }
}

/// An agent the CLI can write back after adoption.
enum LoadedAgent {
    Sim(SimProvider),
    Other(Box<dyn VerdictProvider>),
}

impl LoadedAgent {
    fn load(spec: &AdapterSpec, agent: &str, timeout: Duration) -> Result<Self, CliError> {
        let provider_err = |e: crate::adapter::AdapterError| CliError::Provider(e.to_string());
        match spec {
            AdapterSpec::Sim(path) => match PolicyFile::load(path).map_err(|e| CliError::Config(e.to_string()))? {
                PolicyFile::Interval(policy) => Ok(Self::Sim(SimProvider::new(policy))),
                PolicyFile::Table(table) => Ok(Self::Other(Box::new(TableProvider::new(table)))),
            },
            other => Ok(Self::Other(open_provider(other, agent, timeout).map_err(provider_err)?)),
        }
    }

    fn provider(&self) -> &dyn VerdictProvider {
        match self {
            Self::Sim(p) => p,
            Self::Other(p) => p.as_ref(),
        }
    }

    fn provider_mut(&mut self) -> &mut dyn VerdictProvider {
        match self {
            Self::Sim(p) => p,
            Self::Other(p) => p.as_mut(),
        }
    }
}

fn load_agents(config: &RunConfig, args: &AgentArgs) -> Result<(LoadedAgent, LoadedAgent), CliError> {
    let [s1, s2] = config.agent_specs(args)?;
    let timeout = config.timeout(args);
    let a1 = LoadedAgent::load(&s1, "A1", timeout)?;
    let a2 = LoadedAgent::load(&s2, "A2", timeout)?;
    if a1.provider().agent_id() == a2.provider().agent_id() {
        return Err(CliError::Config(format!("both agents are named {:?}", a1.provider().agent_id())));
    }
    Ok((a1, a2))
}

fn sim_file_inputs(args: &AgentArgs, config: &RunConfig) -> Vec<PathBuf> {
    let specs = if args.agents.is_empty() { config.agents.clone().unwrap_or_default() } else { args.agents.clone() };
    specs
        .iter()
        .filter_map(|s| match s.parse::<AdapterSpec>() {
            Ok(AdapterSpec::Sim(p)) => Some(p),
            _ => None,
        })
        .collect()
}

/// Copies `input` (verified) into `dir/ledger.jsonl`, or starts a fresh
/// ledger there, and opens it for appending.
fn output_ledger(input: Option<&Path>, dir: &Path) -> Result<Ledger, CliError> {
    let target = dir.join("ledger.jsonl");
    match input {
        Some(path) => {
            let loaded = Ledger::load(path).map_err(|e| match e {
                LedgerError::Io(source) => CliError::Io { path: path.to_path_buf(), source },
                other => other.into(),
            })?;
            loaded.write_to(&target)?;
        }
        None => fs::write(&target, b"").map_err(io_err(&target))?,
    }
    Ok(Ledger::open(&target)?)
}

fn parse_condition(s: &str) -> Result<Condition, CliError> {
    s.parse().map_err(|e: crate::simagents::SimError| CliError::Usage(e.to_string()))
}

fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("bad grid {spec:?}: expected start:stop:step"));
    let parts: Vec<f64> = spec.split(':').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    let [start, stop, step] = parts[..] else { return Err(bad()) };
    if step.is_nan() || step <= 0.0 || stop < start {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    // Round to 12 decimals so 0.01:0.2:0.01 yields 0.07 rather than 0.07000000000000001.
    Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect())
}

fn parse_list(spec: &str) -> Result<Vec<f64>, CliError> {
    spec.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("bad number {p:?} in {spec:?}"))))
        .collect()
}

// -------------------------------------------------------------- commands

fn cmd_certify(ctx: &Ctx, args: &CertifyArgs) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let params = cfg.params(&args.params)?;
    let per_term = args.per_term.or(cfg.per_term).unwrap_or(170);
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let epoch = args.epoch.unwrap_or(0);
    let vocab = cfg.vocab(&args.vocab);
    let out = cfg.out(&args.out);
    let events = read_events(&args.events)?;
    let (a1, a2) = load_agents(cfg, &args.agents)?;
    let plan = sample_audit_plan(&events, &vocab, per_term, seed).map_err(|e| CliError::Config(e.to_string()))?;
    create_dir(&out)?;
    let mut ledger = output_ledger(args.ledger.as_deref(), &out)?;
    let core = certify(a1.provider(), a2.provider(), &plan, &params, &mut ledger, epoch).map_err(domain)?;
    write_pretty(&out.join("core.json"), &core)?;
    let mut inputs: Vec<PathBuf> = vec![args.events.clone()];
    inputs.extend(args.ledger.clone());
    inputs.extend(sim_file_inputs(&args.agents, cfg));
    let settings = json!({ "params": params, "per_term": per_term, "seed": seed, "epoch": epoch, "vocab": vocab });
    ctx.write_manifest(&out, "certify", settings, &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    say(json!({ "core": core.core, "failed": core.failed.keys().collect::<Vec<_>>() }));
    Ok(())
}

fn cmd_guard(ctx: &Ctx, args: &GuardArgs) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let out = cfg.out(&args.out);
    let epoch = args.epoch.unwrap_or(0);
    let core = read_core(&args.core)?;
    let events = read_events(&args.events)?;
    let vocab = cfg.vocab(&args.vocab);
    let (a1, a2) = load_agents(cfg, &args.agents)?;
    let all = vocab.iter().cloned().collect();
    let (unguarded, log) = measure_disagreement_logged(a1.provider(), a2.provider(), &all, &events, epoch);
    let guarded = unguarded.restricted_to(&crate::guard::guarded_vocabulary(&core, &vocab));
    create_dir(&out)?;
    let reduction = if unguarded.rate > 0.0 { 1.0 - guarded.rate / unguarded.rate } else { 0.0 };
    write_pretty(&out.join("report.json"), &json!({ "guarded": guarded, "unguarded": unguarded, "reduction": reduction }))?;
    let log_path = out.join("evaluation_log.jsonl");
    let file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    write_evaluation_log(&log, io::BufWriter::new(file)).map_err(io_err(&log_path))?;
    let mut inputs = vec![args.core.clone(), args.events.clone()];
    inputs.extend(sim_file_inputs(&args.agents, cfg));
    ctx.write_manifest(
        &out,
        "guard measure",
        json!({ "epoch": epoch, "vocab": vocab }),
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
    )?;
    say(json!({ "guarded": guarded.rate, "unguarded": unguarded.rate, "terms": guarded.terms_used }));
    Ok(())
}

fn cmd_recertify(ctx: &Ctx, args: &RecertifyArgs) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let params = cfg.params(&args.params)?;
    let per_term = args.per_term.or(cfg.per_term).unwrap_or(170);
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let out = cfg.out(&args.out);
    let core = read_core(&args.core)?;
    let events = read_events(&args.events)?;
    let (a1, a2) = load_agents(cfg, &args.agents)?;
    create_dir(&out)?;
    let mut ledger = output_ledger(Some(&args.ledger), &out)?;
    let (updated, outcomes) =
        recertify(&core, a1.provider(), a2.provider(), &events, per_term, &params, &mut ledger, args.epoch, seed)
            .map_err(domain)?;
    write_pretty(&out.join("core.json"), &updated)?;
    write_pretty(&out.join("recert_outcomes.json"), &outcomes)?;
    let mut inputs = vec![args.ledger.clone(), args.core.clone(), args.events.clone()];
    inputs.extend(sim_file_inputs(&args.agents, cfg));
    let settings = json!({ "params": params, "per_term": per_term, "seed": seed, "epoch": args.epoch });
    ctx.write_manifest(&out, "recertify", settings, &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    say(json!({ "core": updated.core, "revoked": outcomes.iter().filter(|o| o.action.is_revoked()).map(|o| &o.term).collect::<Vec<_>>() }));
    Ok(())
}

fn cmd_renegotiate(ctx: &Ctx, args: &RenegotiateArgs) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let params = cfg.params(&args.params)?;
    let per_term = args.per_term.or(cfg.per_term).unwrap_or(170);
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let out = cfg.out(&args.out);
    let mut core = read_core(&args.core)?;
    let events = read_events(&args.events)?;
    let (mut a1, mut a2) = load_agents(cfg, &args.agents)?;
    create_dir(&out)?;
    let mut ledger = output_ledger(Some(&args.ledger), &out)?;
    let outcome = renegotiate(
        &args.term,
        &mut core,
        a1.provider_mut(),
        a2.provider_mut(),
        &Entrenchment,
        &mut ledger,
        &events,
        per_term,
        &params,
        args.epoch,
        seed,
    )
    .map_err(domain)?;
    write_pretty(&out.join("core.json"), &core)?;
    write_pretty(&out.join("renegotiation.json"), &outcome)?;
    // Adoption changes a simulated agent; persist it so later commands see it.
    for agent in [&a1, &a2] {
        if let LoadedAgent::Sim(p) = agent {
            write_pretty(&out.join(format!("{}.json", p.policy.agent)), &PolicyFile::Interval(p.policy.clone()))?;
        }
    }
    let mut inputs = vec![args.ledger.clone(), args.core.clone(), args.events.clone()];
    inputs.extend(sim_file_inputs(&args.agents, cfg));
    let settings =
        json!({ "term": args.term, "params": params, "per_term": per_term, "seed": seed, "epoch": args.epoch });
    ctx.write_manifest(&out, "renegotiate", settings, &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    say(json!({ "term": outcome.term, "adopted": outcome.adopted, "restored": outcome.restored }));
    Ok(())
}

fn cmd_ledger(ctx: &Ctx, command: &LedgerCommand) -> Result<(), CliError> {
    match command {
        LedgerCommand::Verify { path } => {
            let status = verify_file(path).map_err(|e| match e {
                LedgerError::Io(source) => CliError::Io { path: path.clone(), source },
                other => other.into(),
            })?;
            say(serde_json::to_string(&status).expect("status serializes"));
            match status {
                ChainStatus::Valid => Ok(()),
                ChainStatus::Invalid { invalid_at } => Err(CliError::LedgerInvalid { invalid_at }),
            }
        }
        LedgerCommand::Replay { path, epoch, params, out } => {
            let params = ctx.config.params(params)?;
            let epoch = epoch.unwrap_or(0);
            let core = replay_file(path, &params, epoch).map_err(|e| match e {
                ReplayError::Ledger(LedgerError::Io(source)) => CliError::Io { path: path.clone(), source },
                other => other.into(),
            })?;
            say(core.to_json());
            if let Some(dir) = out {
                create_dir(dir)?;
                write_pretty(&dir.join("core.json"), &core)?;
                ctx.write_manifest(dir, "ledger replay", json!({ "params": params, "epoch": epoch }), &[path])?;
            }
            Ok(())
        }
    }
}

fn cmd_exp(ctx: &Ctx, command: &ExpCommand) -> Result<(), CliError> {
    let cfg = &ctx.config;
    match command {
        ExpCommand::Static(args) => {
            let conditions = match args.condition.clone().or_else(|| cfg.condition.clone()).as_deref() {
                None | Some("all") => Condition::ALL.to_vec(),
                Some(c) => vec![parse_condition(c)?],
            };
            let sim = SimConfig { moderate_shift: args.moderate_shift.or(cfg.moderate_shift), ..SimConfig::default() };
            let d = StaticConfig::default();
            let config = StaticConfig {
                n_runs: args.runs.or(cfg.runs).unwrap_or(d.n_runs),
                params: cfg.params(&args.params)?,
                base_seed: args.seed.or(cfg.seed).unwrap_or(d.base_seed),
                audit_pool: args.audit_pool.or(cfg.audit_pool).unwrap_or(d.audit_pool),
                held_out: args.held_out.or(cfg.held_out).unwrap_or(d.held_out),
                per_term_size: args.per_term.or(cfg.per_term).unwrap_or(d.per_term_size),
                sim,
            };
            let results =
                conditions.iter().map(|c| run_static(*c, &config)).collect::<Result<Vec<_>, _>>()?;
            let out = cfg.out(&args.out);
            emit_static(&out, &results)?;
            let settings = json!({ "conditions": conditions, "config": config });
            ctx.write_manifest(&out, "exp static", settings, &[])?;
            for (_, s) in &results {
                say(serde_json::to_string(s).expect("summary serializes"));
            }
        }
        ExpCommand::Timeseries(args) => {
            let scenarios = match args.scenario.clone().or_else(|| cfg.scenario.clone()).as_deref() {
                None | Some("all") => Scenario::ALL.to_vec(),
                Some(s) => vec![s.parse::<Scenario>().map_err(|e| CliError::Usage(e.to_string()))?],
            };
            let d = TimeseriesConfig::default();
            let config = TimeseriesConfig {
                epochs: args.epochs.or(cfg.epochs).unwrap_or(d.epochs),
                drift_epoch: args.drift_epoch.or(cfg.drift_epoch).unwrap_or(d.drift_epoch),
                drift_magnitude: args.drift_magnitude.or(cfg.drift_magnitude).unwrap_or(d.drift_magnitude),
                n_runs: args.runs.or(cfg.runs).unwrap_or(d.n_runs),
                params: cfg.params(&args.params)?,
                seed: args.seed.or(cfg.seed).unwrap_or(d.seed),
                per_term_size: args.per_term.or(cfg.per_term).unwrap_or(d.per_term_size),
                recert_per_term: args.recert_per_term.or(cfg.recert_per_term).unwrap_or(d.recert_per_term),
                recert_pool: args.recert_per_term.or(cfg.recert_per_term).unwrap_or(d.recert_pool).max(d.recert_pool),
                ..d
            };
            let mut records = Vec::new();
            for scenario in &scenarios {
                records.extend(run_timeseries(*scenario, &config)?);
            }
            let out = cfg.out(&args.out);
            emit_timeseries(&out, &records)?;
            ctx.write_manifest(&out, "exp timeseries", json!({ "scenarios": scenarios, "config": config }), &[])?;
            say(json!({ "records": records.len(), "out": out }));
        }
        ExpCommand::Tradeoff(args) => {
            let pi = match &args.pi {
                Some(list) => parse_list(list)?,
                None => cfg.pi.clone().unwrap_or_else(|| vec![0.3, 0.5, 0.7, 0.9]),
            };
            let grid = parse_grid(args.tau_grid.as_deref().or(cfg.tau_grid.as_deref()).unwrap_or("0.01:0.20:0.01"))?;
            let d = TradeoffConfig::default();
            let config = TradeoffConfig {
                model: TwoPopulationModel {
                    p_lo: args.p_lo.or(cfg.p_lo).unwrap_or(d.model.p_lo),
                    p_hi: args.p_hi.or(cfg.p_hi).unwrap_or(d.model.p_hi),
                },
                k_audit: args.k_audit.or(cfg.k_audit).unwrap_or(d.k_audit),
                delta: args.delta.or(cfg.delta).unwrap_or(d.delta),
                n_mc: args.mc.or(cfg.mc).unwrap_or(d.n_mc),
                seed: args.seed.or(cfg.seed).unwrap_or(d.seed),
            };
            let points = run_tradeoff(&pi, &grid, &config)?;
            let out = cfg.out(&args.out);
            emit_tradeoff(&out, &points, &config)?;
            ctx.write_manifest(&out, "exp tradeoff", json!({ "pi": pi, "tau_grid": grid, "config": config }), &[])?;
            say(json!({ "points": points.len(), "out": out }));
        }
    }
    Ok(())
}

fn cmd_sim(ctx: &Ctx, command: &SimCommand) -> Result<(), CliError> {
    let cfg = &ctx.config;
    match command {
        SimCommand::GenEvents { n, audit, seed, out } => {
            let n = n.unwrap_or(1000);
            let audit = audit.or(cfg.audit_pool).unwrap_or(400);
            let seed = seed.or(cfg.seed).unwrap_or(0);
            if n == 0 || audit > n {
                return Err(CliError::Usage(format!("need 1 <= n and audit <= n, got n={n} audit={audit}")));
            }
            let events: Vec<Event> = gen_events(n, seed).iter().map(|e| e.to_event()).collect();
            let out = cfg.out(out);
            create_dir(&out)?;
            write_events(&out.join("events.jsonl"), &events)?;
            write_events(&out.join("audit.jsonl"), &events[..audit])?;
            write_events(&out.join("held_out.jsonl"), &events[audit..])?;
            ctx.write_manifest(&out, "sim gen-events", json!({ "n": n, "audit": audit, "seed": seed }), &[])?;
        }
        SimCommand::GenAgents { condition, seed, out } => {
            let condition = parse_condition(condition.as_deref().or(cfg.condition.as_deref()).unwrap_or("noise-only"))?;
            let seed = seed.or(cfg.seed).unwrap_or(0);
            let sim = SimConfig { moderate_shift: cfg.moderate_shift, ..SimConfig::default() };
            let (p1, p2) = gen_policies(condition, seed, &sim).map_err(domain)?;
            let out = cfg.out(out);
            create_dir(&out)?;
            for p in [p1, p2] {
                write_pretty(&out.join(format!("{}.json", p.agent)), &PolicyFile::Interval(p))?;
            }
            ctx.write_manifest(&out, "sim gen-agents", json!({ "condition": condition, "seed": seed, "sim": sim }), &[])?;
        }
    }
    Ok(())
}

fn cmd_stats(ctx: &Ctx, command: &StatsCommand) -> Result<(), CliError> {
    match command {
        StatsCommand::Wilson { c, k, delta } => {
            let delta = delta.or(ctx.config.delta).unwrap_or(0.05);
            let u = wilson_upper(*c, *k, delta).map_err(domain)?;
            let z = normal_quantile(1.0 - delta).map_err(domain)?;
            say(json!({ "c": c, "k": k, "delta": delta, "z": z, "u": u }));
        }
    }
    Ok(())
}

fn load_table(path: &Path) -> Result<VerdictTable, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if let Ok(PolicyFile::Table(t)) = serde_json::from_str(&text) {
        return Ok(t);
    }
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: bad verdict table: {e}", path.display())))
}

fn cmd_mock(args: &MockAgentArgs) -> Result<(), CliError> {
    let table = load_table(&args.table)?;
    let transport = |e: io::Error| CliError::Provider(e.to_string());
    match &args.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(transport)?;
            // Announce the bound address so callers can pass port 0.
            say(listener.local_addr().map_err(transport)?);
            io::stdout().flush().map_err(transport)?;
            serve_mock_tcp(&table, listener).map_err(transport)
        }
        None => serve_mock(&table, io::stdin().lock(), io::stdout().lock()).map_err(transport),
    }
}

/// Parses and runs; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
            }
            let err = CliError::Usage(e.to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match execute(&cli, argv.iter().map(|a| a.to_string_lossy().into_owned()).collect()) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{}", err.to_json());
            err.exit_code()
        }
    }
}

fn execute(cli: &Cli, argv: Vec<String>) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx { argv, config, config_path: cli.config.clone() };
    match &cli.command {
        Command::Certify(args) => cmd_certify(&ctx, args),
        Command::Guard(GuardCommand::Measure(args)) => cmd_guard(&ctx, args),
        Command::Recertify(args) => cmd_recertify(&ctx, args),
        Command::Renegotiate(args) => cmd_renegotiate(&ctx, args),
        Command::Ledger(command) => cmd_ledger(&ctx, command),
        Command::Exp(command) => cmd_exp(&ctx, command),
        Command::Sim(command) => cmd_sim(&ctx, command),
        Command::Stats(command) => cmd_stats(&ctx, command),
        Command::MockAgent(args) => cmd_mock(args),
    }
}
