//! Term certification: audit two agents per term on sampled events, record
//! every verdict in the ledger, tally, and certify terms whose Wilson upper
//! bound and coverage clear the protocol thresholds.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{EventId, Ledger, LedgerError, LedgerQuery, TestPayload, Verdict};
use crate::rng::{derive_seed, seeded_rng};
use crate::simagents::Interval;
use crate::stats::{coverage, wilson_upper, ProtocolParams, StatsError, TermTally};

/// A public event as presented to agents.
///
/// `content` is what an external agent reads; `hue` is the position in the
/// simulated colour space and is only set for simulated events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub pei: EventId,
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hue: Option<f64>,
}

impl Event {
    pub fn new(pei: EventId, content: impl Into<String>) -> Self {
        Self { pei, content: content.into(), hue: None }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("agent {agent}: no response within {timeout_ms} ms")]
    Timeout { agent: String, timeout_ms: u64 },
    #[error("agent {agent}: malformed response: {detail}")]
    Malformed { agent: String, detail: String },
    #[error("agent {agent}: response id {got} does not match any outstanding request")]
    IdMismatch { agent: String, got: u64 },
    #[error("agent {agent}: transport failure: {detail}")]
    Transport { agent: String, detail: String },
    #[error("agent {agent}: {detail}")]
    Domain { agent: String, detail: String },
    #[error("agent {agent} refused to adopt a policy for {term}")]
    AdoptionRefused { agent: String, term: String },
}

/// Anything that can answer "does `term` apply to `event`?".
///
/// Simulated providers are deterministic in (term, event, epoch). External
/// providers carry no such guarantee. Providers that cannot serve concurrent
/// calls serialize internally.
pub trait VerdictProvider: Send + Sync {
    fn agent_id(&self) -> &str;

    fn verdict(&self, term: &str, event: &Event, epoch: u64) -> Result<Verdict, ProviderError>;

    /// The provider's current interpretation of `term`, if it can share one.
    fn term_rule(&self, _term: &str) -> Option<Interval> {
        None
    }

    /// Replace this provider's interpretation of `term` with `rule`.
    fn adopt_rule(&mut self, term: &str, _rule: &Interval) -> Result<(), ProviderError> {
        Err(ProviderError::AdoptionRefused { agent: self.agent_id().to_string(), term: term.to_string() })
    }
}

impl<P: VerdictProvider + ?Sized> VerdictProvider for Box<P> {
    fn agent_id(&self) -> &str {
        (**self).agent_id()
    }

    fn verdict(&self, term: &str, event: &Event, epoch: u64) -> Result<Verdict, ProviderError> {
        (**self).verdict(term, event, epoch)
    }

    fn term_rule(&self, term: &str) -> Option<Interval> {
        (**self).term_rule(term)
    }

    fn adopt_rule(&mut self, term: &str, rule: &Interval) -> Result<(), ProviderError> {
        (**self).adopt_rule(term, rule)
    }
}

#[derive(Debug, Error)]
pub enum CertificationError {
    #[error("per-term audit size {per_term} exceeds pool of {pool} events")]
    PoolTooSmall { per_term: usize, pool: usize },
    #[error("per-term audit size must be at least 1")]
    EmptyAudit,
    #[error("audit of term {term} aborted: {source}")]
    Provider { term: String, source: ProviderError },
    #[error("audit of term {term} could not write the ledger: {source}")]
    Ledger { term: String, source: LedgerError },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Events to audit for one term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermAuditSet {
    pub term: String,
    pub events: Vec<Event>,
}

/// Per-term audit sets, each drawn without replacement from the audit pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditPlan {
    pub seed: u64,
    pub per_term_size: usize,
    pub terms: Vec<TermAuditSet>,
}

impl AuditPlan {
    pub fn events_for(&self, term: &str) -> Option<&[Event]> {
        self.terms.iter().find(|t| t.term == term).map(|t| t.events.as_slice())
    }
}

/// Draws an independent uniform sample per term. Samples never repeat an
/// event within one term but may overlap across terms.
pub fn sample_audit_plan(
    pool: &[Event],
    vocabulary: &[String],
    per_term_size: usize,
    seed: u64,
) -> Result<AuditPlan, CertificationError> {
    if per_term_size == 0 {
        return Err(CertificationError::EmptyAudit);
    }
    if per_term_size > pool.len() {
        return Err(CertificationError::PoolTooSmall { per_term: per_term_size, pool: pool.len() });
    }
    let terms = vocabulary
        .iter()
        .map(|term| {
            let mut rng = seeded_rng(derive_seed(seed, &[b"audit-plan", term.as_bytes()]));
            let events = sample(&mut rng, pool.len(), per_term_size)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect();
            TermAuditSet { term: term.clone(), events }
        })
        .collect();
    Ok(AuditPlan { seed, per_term_size, terms })
}

/// Outcome of auditing one term: the tally and the ledger seqs written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermAudit {
    pub tally: TermTally,
    pub ledger_span: Option<(u64, u64)>,
}

/// Queries both agents on every event, records both verdicts, and tallies.
///
/// A provider failure aborts the term; pairs recorded before the failure
/// stay in the ledger.
pub fn audit_term(
    a1: &dyn VerdictProvider,
    a2: &dyn VerdictProvider,
    term: &str,
    events: &[Event],
    ledger: &mut Ledger,
    epoch: u64,
) -> Result<TermAudit, CertificationError> {
    let mut tally = TermTally::default();
    let mut span: Option<(u64, u64)> = None;
    for event in events {
        let provider_err = |source| CertificationError::Provider { term: term.to_string(), source };
        let v1 = a1.verdict(term, event, epoch).map_err(provider_err)?;
        let v2 = a2.verdict(term, event, epoch).map_err(provider_err)?;
        for (agent, verdict) in [(a1.agent_id(), v1), (a2.agent_id(), v2)] {
            let seq = ledger
                .append(TestPayload {
                    agent: agent.to_string(),
                    event: event.pei.clone(),
                    term: term.to_string(),
                    verdict,
                    epoch,
                })
                .map_err(|source| CertificationError::Ledger { term: term.to_string(), source })?;
            span = Some(span.map_or((seq, seq), |(first, _)| (first, seq)));
        }
        tally.record(v1, v2);
    }
    Ok(TermAudit { tally, ledger_span: span })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateStatus {
    Certified,
    RejectedBound,
    RejectedCoverage,
    RejectedBoth,
}

impl CertificateStatus {
    pub fn evaluate(u: f64, s: f64, params: &ProtocolParams) -> Self {
        match (u <= params.tau, s >= params.rho_min) {
            (true, true) => Self::Certified,
            (false, true) => Self::RejectedBound,
            (true, false) => Self::RejectedCoverage,
            (false, false) => Self::RejectedBoth,
        }
    }

    pub fn is_certified(self) -> bool {
        self == Self::Certified
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCertificate {
    pub term: String,
    pub tally: TermTally,
    pub u: f64,
    pub s: f64,
    pub params: ProtocolParams,
    pub epoch: u64,
    pub ledger_span: Option<(u64, u64)>,
    pub status: CertificateStatus,
}

impl TermCertificate {
    pub fn from_tally(
        term: String,
        tally: TermTally,
        params: ProtocolParams,
        epoch: u64,
        ledger_span: Option<(u64, u64)>,
    ) -> Result<Self, StatsError> {
        let u = wilson_upper(tally.c, tally.k, params.delta)?;
        let s = coverage(&tally);
        let status = CertificateStatus::evaluate(u, s, &params);
        Ok(Self { term, tally, u, s, params, epoch, ledger_span, status })
    }
}

/// The certified core at one epoch together with every certificate issued,
/// rejections included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedCore {
    pub epoch: u64,
    pub certificates: BTreeMap<String, TermCertificate>,
    pub core: BTreeSet<String>,
    /// Terms whose audit aborted, with the reason. They hold no certificate.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failed: BTreeMap<String, String>,
    /// Terms removed from the core by recertification and not yet restored.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub revoked: BTreeSet<String>,
}

impl CertifiedCore {
    pub fn empty(epoch: u64) -> Self {
        Self {
            epoch,
            certificates: BTreeMap::new(),
            core: BTreeSet::new(),
            failed: BTreeMap::new(),
            revoked: BTreeSet::new(),
        }
    }

    pub fn from_certificates(epoch: u64, certificates: BTreeMap<String, TermCertificate>) -> Self {
        let core = certificates
            .values()
            .filter(|c| c.status.is_certified())
            .map(|c| c.term.clone())
            .collect();
        Self { epoch, certificates, core, failed: BTreeMap::new(), revoked: BTreeSet::new() }
    }

    pub fn len(&self) -> usize {
        self.core.len()
    }

    pub fn is_empty(&self) -> bool {
        self.core.is_empty()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.core.contains(term)
    }

    /// Installs a certificate, adding or removing its term from the core to
    /// match its status.
    pub fn install(&mut self, cert: TermCertificate) {
        if cert.status.is_certified() {
            self.core.insert(cert.term.clone());
        } else {
            self.core.remove(&cert.term);
        }
        self.failed.remove(&cert.term);
        self.certificates.insert(cert.term.clone(), cert);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("core always serializes")
    }
}

/// Runs the full certification over every term in the plan.
///
/// Terms are independent: a provider failure on one term is recorded in
/// `failed` and the remaining terms are still audited.
pub fn certify(
    a1: &dyn VerdictProvider,
    a2: &dyn VerdictProvider,
    plan: &AuditPlan,
    params: &ProtocolParams,
    ledger: &mut Ledger,
    epoch: u64,
) -> Result<CertifiedCore, CertificationError> {
    params.validate()?;
    let mut core = CertifiedCore::empty(epoch);
    for set in &plan.terms {
        match audit_term(a1, a2, &set.term, &set.events, ledger, epoch) {
            Ok(audit) => {
                let cert =
                    TermCertificate::from_tally(set.term.clone(), audit.tally, *params, epoch, audit.ledger_span)?;
                core.install(cert);
            }
            Err(err @ CertificationError::Provider { .. }) => {
                core.failed.insert(set.term.clone(), err.to_string());
            }
            Err(err) => return Err(err),
        }
    }
    Ok(core)
}

/// An agent's witnessed verdicts for one term, partitioned by verdict.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusMeaning {
    pub term: String,
    pub agent: String,
    pub positive: BTreeSet<EventId>,
    pub negative: BTreeSet<EventId>,
    pub neutral: BTreeSet<EventId>,
}

impl StimulusMeaning {
    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len() + self.neutral.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Partitions the agent's ledger entries for `term`. If an event was tested
/// more than once in range the latest verdict wins, keeping the sets disjoint.
pub fn stimulus_meaning(
    ledger: &Ledger,
    agent: &str,
    term: &str,
    epochs: Option<RangeInclusive<u64>>,
) -> StimulusMeaning {
    let mut query = LedgerQuery::new().agent(agent).term(term);
    query.epochs = epochs;
    let mut latest: BTreeMap<&EventId, Verdict> = BTreeMap::new();
    for entry in ledger.query(&query) {
        latest.insert(&entry.pei, entry.verdict);
    }
    let mut meaning = StimulusMeaning { term: term.to_string(), agent: agent.to_string(), ..Default::default() };
    for (pei, verdict) in latest {
        let bucket = match verdict {
            Verdict::Assent => &mut meaning.positive,
            Verdict::Dissent => &mut meaning.negative,
            Verdict::Neutral => &mut meaning.neutral,
        };
        bucket.insert(pei.clone());
    }
    meaning
}
