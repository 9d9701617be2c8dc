//! Simulation studies: the static comparison across divergence conditions,
//! the drift timeseries, and the coverage/reliability trade-off.
//!
//! Every run derives its randomness from one root seed, and parallel runs are
//! collected in index order, so repeated invocations are bit-identical.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Binomial as BinomialSampler, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::certification::{certify, sample_audit_plan, CertificationError, CertifiedCore, Event};
use crate::guard::{measure_disagreement, DisagreementReport};
use crate::ledger::Ledger;
use crate::lifecycle::{recertify, renegotiate, Entrenchment, LifecycleError};
use crate::rng::{derive_seed, seeded_rng};
use crate::simagents::{
    color_vocabulary, gen_events, gen_policies, inject_drift, AgentPolicy, Condition, NoiseParams, SimConfig,
    SimError, SimProvider,
};
use crate::stats::{max_passing_contradictions, normal_quantile, ProtocolParams, StatsError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Certification(#[from] CertificationError),
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn to_events(n: usize, seed: u64) -> Vec<Event> {
    gen_events(n, seed).iter().map(|e| e.to_event()).collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

// ---------------------------------------------------------------- static

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticConfig {
    pub n_runs: usize,
    pub params: ProtocolParams,
    pub base_seed: u64,
    pub audit_pool: usize,
    pub held_out: usize,
    pub per_term_size: usize,
    pub sim: SimConfig,
}

impl Default for StaticConfig {
    fn default() -> Self {
        Self {
            n_runs: 100,
            params: ProtocolParams::default(),
            base_seed: 0,
            audit_pool: 400,
            held_out: 600,
            per_term_size: 170,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermSummary {
    pub n_aud: u64,
    pub k: u64,
    pub c: u64,
    pub u: f64,
    pub s: f64,
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticRunRecord {
    pub condition: Condition,
    pub run: usize,
    pub seed: u64,
    pub core_size: usize,
    pub unguarded_rate: f64,
    pub guarded_rate: f64,
    pub no_vocabulary: bool,
    pub certificates: BTreeMap<String, TermSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticSummary {
    pub condition: Condition,
    pub n_runs: usize,
    pub mean_unguarded: f64,
    /// Mean over runs with a nonempty core; zero when there are none.
    pub mean_guarded: f64,
    pub mean_core: f64,
    pub empty_cores: usize,
}

/// Everything one static run produced, for callers that want to inspect the
/// ledger or replay it.
#[derive(Debug)]
pub struct StaticRunArtifacts {
    pub record: StaticRunRecord,
    pub ledger: Ledger,
    pub core: CertifiedCore,
    pub unguarded: DisagreementReport,
    pub policies: (AgentPolicy, AgentPolicy),
}

pub fn static_run_seed(condition: Condition, base_seed: u64, run: usize) -> u64 {
    derive_seed(base_seed, &[b"static", condition.as_str().as_bytes(), &(run as u64).to_le_bytes()])
}

/// One static run: generate events and agents, certify on the audit pool,
/// then measure disagreement on the held-out events.
pub fn static_run(condition: Condition, run: usize, config: &StaticConfig) -> Result<StaticRunArtifacts, ExperimentError> {
    let seed = static_run_seed(condition, config.base_seed, run);
    let events = to_events(config.audit_pool + config.held_out, derive_seed(seed, &[b"events"]));
    let (audit, held_out) = events.split_at(config.audit_pool);
    let (p1, p2) = gen_policies(condition, derive_seed(seed, &[b"agents"]), &config.sim)?;
    let (a1, a2) = (SimProvider::new(p1.clone()), SimProvider::new(p2.clone()));
    let vocab = color_vocabulary();
    let plan = sample_audit_plan(audit, &vocab, config.per_term_size, derive_seed(seed, &[b"plan"]))?;
    let mut ledger = Ledger::new();
    let core = certify(&a1, &a2, &plan, &config.params, &mut ledger, 0)?;
    let all_terms = vocab.iter().cloned().collect();
    let unguarded = measure_disagreement(&a1, &a2, &all_terms, held_out, 0);
    let guarded = unguarded.restricted_to(&core.core);
    let certificates = core
        .certificates
        .iter()
        .map(|(t, c)| {
            let summary = TermSummary {
                n_aud: c.tally.n_aud,
                k: c.tally.k,
                c: c.tally.c,
                u: c.u,
                s: c.s,
                certified: c.status.is_certified(),
            };
            (t.clone(), summary)
        })
        .collect();
    let record = StaticRunRecord {
        condition,
        run,
        seed,
        core_size: core.len(),
        unguarded_rate: unguarded.rate,
        guarded_rate: guarded.rate,
        no_vocabulary: guarded.no_vocabulary,
        certificates,
    };
    Ok(StaticRunArtifacts { record, ledger, core, unguarded, policies: (p1, p2) })
}

pub fn summarize_static(condition: Condition, records: &[StaticRunRecord]) -> StaticSummary {
    StaticSummary {
        condition,
        n_runs: records.len(),
        mean_unguarded: mean(records.iter().map(|r| r.unguarded_rate)),
        mean_guarded: mean(records.iter().filter(|r| !r.no_vocabulary).map(|r| r.guarded_rate)),
        mean_core: mean(records.iter().map(|r| r.core_size as f64)),
        empty_cores: records.iter().filter(|r| r.core_size == 0).count(),
    }
}

pub fn run_static(
    condition: Condition,
    config: &StaticConfig,
) -> Result<(Vec<StaticRunRecord>, StaticSummary), ExperimentError> {
    if config.n_runs == 0 {
        return Err(ExperimentError::Config("n_runs must be at least 1".into()));
    }
    let records = (0..config.n_runs)
        .into_par_iter()
        .map(|run| static_run(condition, run, config).map(|a| a.record))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = summarize_static(condition, &records);
    Ok((records, summary))
}

// ------------------------------------------------------------ timeseries

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Baseline,
    Frozen,
    Recert,
    Renegotiate,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Self::Baseline, Self::Frozen, Self::Recert, Self::Renegotiate];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Frozen => "frozen",
            Self::Recert => "recert",
            Self::Renegotiate => "renegotiate",
        }
    }

    fn drifts(self) -> bool {
        self != Self::Baseline
    }

    fn recertifies(self) -> bool {
        matches!(self, Self::Recert | Self::Renegotiate)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| ExperimentError::Config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeseriesConfig {
    pub epochs: u64,
    pub drift_epoch: u64,
    /// Shift in degrees applied to agent 2's drifted term.
    pub drift_magnitude: f64,
    /// Independent trajectories averaged per epoch.
    pub n_runs: usize,
    pub params: ProtocolParams,
    pub seed: u64,
    pub noise: NoiseParams,
    pub audit_pool: usize,
    pub per_term_size: usize,
    /// Fresh events drawn each epoch for recertification and renegotiation.
    pub recert_pool: usize,
    pub recert_per_term: usize,
    pub held_out: usize,
}

impl Default for TimeseriesConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            drift_epoch: 10,
            drift_magnitude: 16.0,
            n_runs: 30,
            params: ProtocolParams::default(),
            seed: 0,
            noise: NoiseParams::default(),
            audit_pool: 400,
            per_term_size: 170,
            recert_pool: 800,
            recert_per_term: 800,
            held_out: 600,
        }
    }
}

/// Per-epoch averages over the configured runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeseriesRecord {
    pub scenario: Scenario,
    pub epoch: u64,
    pub drift: bool,
    /// Mean over runs whose core is nonempty at this epoch.
    pub guarded_rate: f64,
    pub unguarded_rate: f64,
    pub core_size: f64,
    pub runs_with_core: usize,
    pub revocations: usize,
    pub restorations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EpochSample {
    guarded: Option<f64>,
    unguarded: f64,
    core: usize,
    revoked: usize,
    restored: usize,
}

fn timeseries_run(scenario: Scenario, run: usize, config: &TimeseriesConfig) -> Result<Vec<EpochSample>, ExperimentError> {
    let seed = derive_seed(config.seed, &[b"timeseries", &(run as u64).to_le_bytes()]);
    let epoch_seed = |label: &[u8], epoch: u64| derive_seed(seed, &[label, &epoch.to_le_bytes()]);
    let vocab = color_vocabulary();
    let all_terms = vocab.iter().cloned().collect();
    let mut a1 = SimProvider::new(AgentPolicy::canonical("A1", config.noise, derive_seed(seed, &[b"noise", b"A1"])));
    let mut a2 = SimProvider::new(AgentPolicy::canonical("A2", config.noise, derive_seed(seed, &[b"noise", b"A2"])));

    let mut ledger = Ledger::new();
    let audit = to_events(config.audit_pool, epoch_seed(b"audit", 0));
    let plan = sample_audit_plan(&audit, &vocab, config.per_term_size, epoch_seed(b"plan", 0))?;
    let mut core = certify(&a1, &a2, &plan, &config.params, &mut ledger, 0)?;

    let mut samples = Vec::with_capacity(config.epochs as usize);
    for epoch in 0..config.epochs {
        let mut sample = EpochSample { guarded: None, unguarded: 0.0, core: 0, revoked: 0, restored: 0 };
        if scenario.drifts() && epoch == config.drift_epoch {
            let target = vocab.iter().find(|t| core.contains(t)).unwrap_or(&vocab[0]);
            a2.policy = inject_drift(&a2.policy, target, config.drift_magnitude)?;
        }
        if scenario.recertifies() && epoch > 0 {
            if scenario == Scenario::Renegotiate {
                let pending: Vec<String> = core.revoked.iter().cloned().collect();
                for (i, term) in pending.iter().enumerate() {
                    let pool = to_events(config.recert_pool, derive_seed(seed, &[b"renegotiate", term.as_bytes(), &epoch.to_le_bytes()]));
                    let outcome = renegotiate(
                        term,
                        &mut core,
                        &mut a1,
                        &mut a2,
                        &Entrenchment,
                        &mut ledger,
                        &pool,
                        config.recert_per_term,
                        &config.params,
                        epoch,
                        epoch_seed(b"renegotiate-plan", epoch ^ ((i as u64) << 32)),
                    )?;
                    sample.restored += usize::from(outcome.restored);
                }
            }
            let pool = to_events(config.recert_pool, epoch_seed(b"recert", epoch));
            let (updated, outcomes) = recertify(
                &core,
                &a1,
                &a2,
                &pool,
                config.recert_per_term,
                &config.params,
                &mut ledger,
                epoch,
                epoch_seed(b"recert-plan", epoch),
            )?;
            sample.revoked = outcomes.iter().filter(|o| o.action.is_revoked()).count();
            core = updated;
        }
        let held_out = to_events(config.held_out, epoch_seed(b"held-out", epoch));
        let unguarded = measure_disagreement(&a1, &a2, &all_terms, &held_out, epoch);
        let guarded = unguarded.restricted_to(&core.core);
        sample.unguarded = unguarded.rate;
        sample.guarded = (!guarded.no_vocabulary).then_some(guarded.rate);
        sample.core = core.len();
        samples.push(sample);
    }
    Ok(samples)
}

pub fn run_timeseries(scenario: Scenario, config: &TimeseriesConfig) -> Result<Vec<TimeseriesRecord>, ExperimentError> {
    if config.drift_epoch >= config.epochs {
        return Err(ExperimentError::Config(format!(
            "drift epoch {} must precede the epoch count {}",
            config.drift_epoch, config.epochs
        )));
    }
    if config.n_runs == 0 {
        return Err(ExperimentError::Config("n_runs must be at least 1".into()));
    }
    let runs = (0..config.n_runs)
        .into_par_iter()
        .map(|run| timeseries_run(scenario, run, config))
        .collect::<Result<Vec<_>, _>>()?;
    let records = (0..config.epochs)
        .map(|epoch| {
            let at: Vec<&EpochSample> = runs.iter().map(|r| &r[epoch as usize]).collect();
            TimeseriesRecord {
                scenario,
                epoch,
                drift: scenario.drifts() && epoch >= config.drift_epoch,
                guarded_rate: mean(at.iter().filter_map(|s| s.guarded)),
                unguarded_rate: mean(at.iter().map(|s| s.unguarded)),
                core_size: mean(at.iter().map(|s| s.core as f64)),
                runs_with_core: at.iter().filter(|s| s.guarded.is_some()).count(),
                revocations: at.iter().map(|s| s.revoked).sum(),
                restorations: at.iter().map(|s| s.restored).sum(),
            }
        })
        .collect();
    Ok(records)
}

// -------------------------------------------------------------- tradeoff

/// Terms are either well aligned (contradiction rate `p_lo`) or not (`p_hi`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoPopulationModel {
    pub p_lo: f64,
    pub p_hi: f64,
}

impl Default for TwoPopulationModel {
    fn default() -> Self {
        Self { p_lo: 0.02, p_hi: 0.12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffConfig {
    pub model: TwoPopulationModel,
    pub k_audit: u64,
    pub delta: f64,
    pub n_mc: usize,
    pub seed: u64,
}

impl Default for TradeoffConfig {
    fn default() -> Self {
        Self { model: TwoPopulationModel::default(), k_audit: 120, delta: 0.05, n_mc: 100_000, seed: 0 }
    }
}

/// Coverage ignores the coverage floor: the model has no neutral verdicts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub pi: f64,
    pub tau: f64,
    pub coverage: f64,
    pub guarded_disagreement: f64,
    pub unguarded_baseline: f64,
    pub mc_coverage: f64,
    pub mc_guarded_disagreement: f64,
}

/// `P(wilson_upper(C, k) <= tau)` for `C ~ Binomial(k, p)`.
pub fn pass_probability(p: f64, k: u64, tau: f64, z: f64) -> Result<f64, ExperimentError> {
    let Some(c_max) = max_passing_contradictions(k, tau, z) else { return Ok(0.0) };
    let dist = Binomial::new(p, k).map_err(|e| ExperimentError::Config(e.to_string()))?;
    Ok(dist.cdf(c_max).clamp(0.0, 1.0))
}

fn check_rate(name: &str, v: f64) -> Result<(), ExperimentError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ExperimentError::Config(format!("{name} = {v} outside [0, 1]")))
    }
}

pub fn run_tradeoff(pi_values: &[f64], tau_grid: &[f64], config: &TradeoffConfig) -> Result<Vec<TradeoffPoint>, ExperimentError> {
    if pi_values.is_empty() || tau_grid.is_empty() {
        return Err(ExperimentError::Config("pi and tau grids must be nonempty".into()));
    }
    let TwoPopulationModel { p_lo, p_hi } = config.model;
    check_rate("p_lo", p_lo)?;
    check_rate("p_hi", p_hi)?;
    for &v in pi_values.iter().chain(tau_grid) {
        check_rate("grid value", v)?;
    }
    let z = normal_quantile(1.0 - config.delta)?;
    let c_max: Vec<Option<u64>> = tau_grid.iter().map(|&tau| max_passing_contradictions(config.k_audit, tau, z)).collect();

    let mut points = Vec::with_capacity(pi_values.len() * tau_grid.len());
    for &pi in pi_values {
        // Common draws across the tau grid keep the Monte Carlo curves monotone.
        let mut rng = seeded_rng(derive_seed(config.seed, &[b"tradeoff", &pi.to_bits().to_le_bytes()]));
        let lo = BinomialSampler::new(config.k_audit, p_lo).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let hi = BinomialSampler::new(config.k_audit, p_hi).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let mut passed = vec![0u64; tau_grid.len()];
        let mut passed_rate = vec![0.0f64; tau_grid.len()];
        for _ in 0..config.n_mc {
            let (p, c) = if rng.gen::<f64>() < pi { (p_lo, lo.sample(&mut rng)) } else { (p_hi, hi.sample(&mut rng)) };
            for (i, m) in c_max.iter().enumerate() {
                if m.is_some_and(|m| c <= m) {
                    passed[i] += 1;
                    passed_rate[i] += p;
                }
            }
        }
        for (i, &tau) in tau_grid.iter().enumerate() {
            let pass_lo = pass_probability(p_lo, config.k_audit, tau, z)?;
            let pass_hi = pass_probability(p_hi, config.k_audit, tau, z)?;
            let coverage = pi * pass_lo + (1.0 - pi) * pass_hi;
            let guarded = if coverage > 0.0 { (pi * pass_lo * p_lo + (1.0 - pi) * pass_hi * p_hi) / coverage } else { 0.0 };
            let n_mc = config.n_mc.max(1) as f64;
            points.push(TradeoffPoint {
                pi,
                tau,
                coverage,
                guarded_disagreement: guarded,
                unguarded_baseline: pi * p_lo + (1.0 - pi) * p_hi,
                mc_coverage: passed[i] as f64 / n_mc,
                mc_guarded_disagreement: if passed[i] == 0 { 0.0 } else { passed_rate[i] / passed[i] as f64 },
            });
        }
    }
    Ok(points)
}

// ---------------------------------------------------------------- output

#[derive(Debug, Serialize)]
struct StaticRow<'a> {
    condition: &'a str,
    run: usize,
    seed: u64,
    unguarded: f64,
    guarded: f64,
    core: usize,
    no_vocabulary: bool,
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    condition: &'a str,
    runs: usize,
    unguarded: f64,
    guarded: f64,
    core: f64,
    empty_cores: usize,
}

#[derive(Debug, Serialize)]
struct TimeseriesRow<'a> {
    scenario: &'a str,
    epoch: u64,
    drift: bool,
    guarded: f64,
    unguarded: f64,
    core: f64,
    runs_with_core: usize,
    revocations: usize,
    restorations: usize,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), ExperimentError> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// `static_runs.csv` (condition,run,seed,unguarded,guarded,core,no_vocabulary),
/// `static_summary.csv` (condition,runs,unguarded,guarded,core,empty_cores)
/// and `static.json` with full records.
pub fn emit_static(dir: &Path, runs: &[(Vec<StaticRunRecord>, StaticSummary)]) -> Result<(), ExperimentError> {
    if runs.iter().all(|(r, _)| r.is_empty()) {
        return Err(ExperimentError::Config("no records to emit".into()));
    }
    fs::create_dir_all(dir)?;
    write_csv(
        &dir.join("static_runs.csv"),
        runs.iter().flat_map(|(records, _)| records).map(|r| StaticRow {
            condition: r.condition.as_str(),
            run: r.run,
            seed: r.seed,
            unguarded: r.unguarded_rate,
            guarded: r.guarded_rate,
            core: r.core_size,
            no_vocabulary: r.no_vocabulary,
        }),
    )?;
    write_csv(
        &dir.join("static_summary.csv"),
        runs.iter().map(|(_, s)| SummaryRow {
            condition: s.condition.as_str(),
            runs: s.n_runs,
            unguarded: s.mean_unguarded,
            guarded: s.mean_guarded,
            core: s.mean_core,
            empty_cores: s.empty_cores,
        }),
    )?;
    let json: Vec<_> = runs
        .iter()
        .map(|(records, summary)| serde_json::json!({ "summary": summary, "runs": records }))
        .collect();
    write_json(&dir.join("static.json"), &json)
}

/// `timeseries.csv` keyed by (scenario, epoch) plus `timeseries.json`.
pub fn emit_timeseries(dir: &Path, records: &[TimeseriesRecord]) -> Result<(), ExperimentError> {
    if records.is_empty() {
        return Err(ExperimentError::Config("no records to emit".into()));
    }
    fs::create_dir_all(dir)?;
    write_csv(
        &dir.join("timeseries.csv"),
        records.iter().map(|r| TimeseriesRow {
            scenario: r.scenario.as_str(),
            epoch: r.epoch,
            drift: r.drift,
            guarded: r.guarded_rate,
            unguarded: r.unguarded_rate,
            core: r.core_size,
            runs_with_core: r.runs_with_core,
            revocations: r.revocations,
            restorations: r.restorations,
        }),
    )?;
    write_json(&dir.join("timeseries.json"), records)
}

/// `tradeoff.csv` keyed by (pi, tau) plus `tradeoff.json`.
pub fn emit_tradeoff(dir: &Path, points: &[TradeoffPoint], config: &TradeoffConfig) -> Result<(), ExperimentError> {
    if points.is_empty() {
        return Err(ExperimentError::Config("no records to emit".into()));
    }
    fs::create_dir_all(dir)?;
    write_csv(&dir.join("tradeoff.csv"), points)?;
    write_json(
        &dir.join("tradeoff.json"),
        &serde_json::json!({ "config": config, "coverage_floor": "not applied", "points": points }),
    )
}
