//! Keeping a certified core honest over time.
//!
//! Recertification re-audits core terms on fresh events and revokes those
//! that no longer pass. It can only shrink the core. Renegotiation is the way
//! back: the less entrenched agent adopts the other's interpretation of a
//! term and the term is re-audited from scratch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certification::{
    audit_term, sample_audit_plan, CertificationError, CertifiedCore, Event, ProviderError, TermCertificate,
    VerdictProvider,
};
use crate::ledger::{Ledger, LedgerQuery};
use crate::stats::{ProtocolParams, StatsError};

#[derive(Debug, Error)]
pub enum LifecycleError {
    #[error("epoch {epoch} must be greater than the core's epoch {core_epoch}")]
    EpochNotIncreasing { epoch: u64, core_epoch: u64 },
    #[error("term {0} is already in the certified core")]
    AlreadyCertified(String),
    #[error(transparent)]
    Certification(#[from] CertificationError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecertAction {
    Retained,
    /// Refreshed bound above `tau`, whatever the coverage.
    RevokedBound,
    RevokedCoverage,
    /// The re-audit itself failed; revoked conservatively.
    RevokedAuditError,
}

impl RecertAction {
    pub fn is_revoked(self) -> bool {
        self != Self::Retained
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecertOutcome {
    pub term: String,
    pub epoch: u64,
    pub u_prime: Option<f64>,
    pub s_prime: Option<f64>,
    pub action: RecertAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Re-audits core terms on a fresh sample and revokes those that fail.
///
/// Terms whose certificate was issued at `epoch` already (for instance by a
/// renegotiation earlier in the same epoch) are fresh and are not re-audited.
#[allow(clippy::too_many_arguments)]
pub fn recertify(
    core: &CertifiedCore,
    a1: &dyn VerdictProvider,
    a2: &dyn VerdictProvider,
    fresh_pool: &[Event],
    per_term_size: usize,
    params: &ProtocolParams,
    ledger: &mut Ledger,
    epoch: u64,
    seed: u64,
) -> Result<(CertifiedCore, Vec<RecertOutcome>), LifecycleError> {
    if epoch <= core.epoch {
        return Err(LifecycleError::EpochNotIncreasing { epoch, core_epoch: core.epoch });
    }
    params.validate()?;
    let stale: Vec<String> =
        core.core.iter().filter(|t| core.certificates.get(*t).map_or(true, |c| c.epoch < epoch)).cloned().collect();
    let plan = sample_audit_plan(fresh_pool, &stale, per_term_size, seed)?;
    let mut updated = core.clone();
    updated.epoch = epoch;
    let mut outcomes = Vec::with_capacity(stale.len());
    for set in &plan.terms {
        let term = set.term.clone();
        match audit_term(a1, a2, &term, &set.events, ledger, epoch) {
            Ok(audit) => {
                let cert = TermCertificate::from_tally(term.clone(), audit.tally, *params, epoch, audit.ledger_span)?;
                let action = if cert.status.is_certified() {
                    RecertAction::Retained
                } else if cert.u > params.tau {
                    RecertAction::RevokedBound
                } else {
                    RecertAction::RevokedCoverage
                };
                outcomes.push(RecertOutcome {
                    term: term.clone(),
                    epoch,
                    u_prime: Some(cert.u),
                    s_prime: Some(cert.s),
                    action,
                    error: None,
                });
                updated.install(cert);
            }
            Err(err @ CertificationError::Provider { .. }) => {
                updated.core.remove(&term);
                updated.failed.insert(term.clone(), err.to_string());
                outcomes.push(RecertOutcome {
                    term: term.clone(),
                    epoch,
                    u_prime: None,
                    s_prime: None,
                    action: RecertAction::RevokedAuditError,
                    error: Some(err.to_string()),
                });
            }
            Err(err) => return Err(err.into()),
        }
        if outcomes.last().is_some_and(|o| o.action.is_revoked()) {
            updated.revoked.insert(term);
        }
    }
    Ok((updated, outcomes))
}

/// Number of decided verdicts `agent` has given for `term`, over all epochs.
pub fn entrenchment(ledger: &Ledger, term: &str, agent: &str) -> u64 {
    ledger.query(&LedgerQuery::new().term(term).agent(agent)).into_iter().filter(|e| e.verdict.is_decided()).count() as u64
}

/// Chooses whose interpretation of a term becomes the reference.
pub trait PrecedentCriterion {
    /// Returns the reference agent and the per-agent scores it was chosen by.
    fn reference_agent(&self, ledger: &Ledger, term: &str, agents: [&str; 2]) -> (String, BTreeMap<String, u64>);
}

/// Most decided verdicts wins; ties go to the lexicographically smaller id.
#[derive(Debug, Clone, Copy, Default)]
pub struct Entrenchment;

impl PrecedentCriterion for Entrenchment {
    fn reference_agent(&self, ledger: &Ledger, term: &str, agents: [&str; 2]) -> (String, BTreeMap<String, u64>) {
        let counts: BTreeMap<String, u64> =
            agents.iter().map(|a| (a.to_string(), entrenchment(ledger, term, a))).collect();
        // BTreeMap iterates ids in ascending order; the fold keeps the first on ties.
        let reference = counts
            .iter()
            .fold(None::<(&String, u64)>, |best, (id, &n)| match best {
                Some((_, m)) if m >= n => best,
                _ => Some((id, n)),
            })
            .map(|(id, _)| id.clone())
            .expect("two agents");
        (reference, counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenegotiationPath {
    /// The term was in the core before recertification removed it.
    Revoked,
    NeverCertified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenegotiationOutcome {
    pub term: String,
    pub epoch: u64,
    pub path: RenegotiationPath,
    pub reference_agent: String,
    pub entrenchment_counts: BTreeMap<String, u64>,
    pub adopted: bool,
    pub restored: bool,
    /// Absent when adoption failed and no re-audit ran.
    pub certificate: Option<TermCertificate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Attempts to bring `term` back into `core`.
///
/// On success the core gains the term with the new certificate. The core's
/// epoch is left alone so that a recertification may still run at `epoch`.
#[allow(clippy::too_many_arguments)]
pub fn renegotiate(
    term: &str,
    core: &mut CertifiedCore,
    a1: &mut dyn VerdictProvider,
    a2: &mut dyn VerdictProvider,
    criterion: &dyn PrecedentCriterion,
    ledger: &mut Ledger,
    fresh_pool: &[Event],
    per_term_size: usize,
    params: &ProtocolParams,
    epoch: u64,
    seed: u64,
) -> Result<RenegotiationOutcome, LifecycleError> {
    if core.contains(term) {
        return Err(LifecycleError::AlreadyCertified(term.to_string()));
    }
    if epoch <= core.epoch {
        return Err(LifecycleError::EpochNotIncreasing { epoch, core_epoch: core.epoch });
    }
    params.validate()?;
    let path = if core.revoked.contains(term) { RenegotiationPath::Revoked } else { RenegotiationPath::NeverCertified };
    let (reference, counts) = criterion.reference_agent(ledger, term, [a1.agent_id(), a2.agent_id()]);
    let mut outcome = RenegotiationOutcome {
        term: term.to_string(),
        epoch,
        path,
        reference_agent: reference.clone(),
        entrenchment_counts: counts,
        adopted: false,
        restored: false,
        certificate: None,
        error: None,
    };

    let a1_is_reference = a1.agent_id() == reference;
    let source: &dyn VerdictProvider = if a1_is_reference { &*a1 } else { &*a2 };
    let shared = source.term_rule(term).ok_or_else(|| ProviderError::Domain {
        agent: source.agent_id().to_string(),
        detail: format!("cannot share its rule for {term}"),
    });
    let adoption = shared.and_then(|rule| {
        if a1_is_reference {
            a2.adopt_rule(term, &rule)
        } else {
            a1.adopt_rule(term, &rule)
        }
    });
    if let Err(err) = adoption {
        outcome.error = Some(err.to_string());
        return Ok(outcome);
    }
    outcome.adopted = true;

    let plan = sample_audit_plan(fresh_pool, &[term.to_string()], per_term_size, seed)?;
    match audit_term(&*a1, &*a2, term, &plan.terms[0].events, ledger, epoch) {
        Ok(audit) => {
            let cert = TermCertificate::from_tally(term.to_string(), audit.tally, *params, epoch, audit.ledger_span)?;
            outcome.restored = cert.status.is_certified();
            if outcome.restored {
                core.install(cert.clone());
                core.revoked.remove(term);
            }
            outcome.certificate = Some(cert);
        }
        Err(err @ CertificationError::Provider { .. }) => outcome.error = Some(err.to_string()),
        Err(err) => return Err(err.into()),
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{EventId, TestPayload, Verdict};
    use crate::simagents::{gen_events, inject_drift, AgentPolicy, NoiseParams, SimProvider};

    fn entry(ledger: &mut Ledger, agent: &str, term: &str, i: usize, verdict: Verdict, epoch: u64) {
        ledger
            .append(TestPayload {
                agent: agent.into(),
                event: EventId::new(format!("e{i}")).unwrap(),
                term: term.into(),
                verdict,
                epoch,
            })
            .unwrap();
    }

    fn sim_pair(noise: NoiseParams) -> (SimProvider, SimProvider) {
        (
            SimProvider::new(AgentPolicy::canonical("A1", noise, 1)),
            SimProvider::new(AgentPolicy::canonical("A2", noise, 2)),
        )
    }

    fn pool(n: usize, seed: u64) -> Vec<Event> {
        gen_events(n, seed).iter().map(|e| e.to_event()).collect()
    }

    #[test]
    fn entrenchment_counts_decided_only() {
        let mut ledger = Ledger::new();
        assert_eq!(entrenchment(&ledger, "T", "A1"), 0);
        for i in 0..120 {
            let v = if i < 10 { Verdict::Neutral } else { Verdict::Assent };
            entry(&mut ledger, "A1", "T", i, v, 0);
        }
        entry(&mut ledger, "A1", "U", 0, Verdict::Dissent, 0);
        assert_eq!(entrenchment(&ledger, "T", "A1"), 110);
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let mut ledger = Ledger::new();
        entry(&mut ledger, "B", "T", 0, Verdict::Assent, 0);
        entry(&mut ledger, "A", "T", 0, Verdict::Dissent, 0);
        assert_eq!(Entrenchment.reference_agent(&ledger, "T", ["B", "A"]).0, "A");
        entry(&mut ledger, "B", "T", 1, Verdict::Assent, 0);
        assert_eq!(Entrenchment.reference_agent(&ledger, "T", ["A", "B"]).0, "B");
    }

    #[test]
    fn recertify_rejects_stale_epoch() {
        let (a1, a2) = sim_pair(NoiseParams::default());
        let core = CertifiedCore::empty(3);
        let err = recertify(&core, &a1, &a2, &pool(10, 0), 5, &ProtocolParams::default(), &mut Ledger::new(), 3, 0);
        assert!(matches!(err, Err(LifecycleError::EpochNotIncreasing { .. })));
    }

    fn certified_core(a1: &SimProvider, a2: &SimProvider, ledger: &mut Ledger) -> CertifiedCore {
        let vocab = crate::simagents::color_vocabulary();
        let plan = sample_audit_plan(&pool(400, 10), &vocab, 400, 0).unwrap();
        crate::certification::certify(a1, a2, &plan, &ProtocolParams::default(), ledger, 0).unwrap()
    }

    #[test]
    fn drift_is_revoked_and_renegotiated_back() {
        let (a1, a2) = sim_pair(NoiseParams::NONE);
        let mut ledger = Ledger::new();
        let core = certified_core(&a1, &a2, &mut ledger);
        assert_eq!(core.len(), 6);

        let mut a2 = SimProvider::new(inject_drift(&a2.policy, "green", 30.0).unwrap());
        let p = ProtocolParams::default();
        let (mut core, outcomes) = recertify(&core, &a1, &a2, &pool(200, 11), 200, &p, &mut ledger, 1, 1).unwrap();
        assert_eq!(core.len(), 5);
        let revoked: Vec<_> = outcomes.iter().filter(|o| o.action.is_revoked()).map(|o| o.term.as_str()).collect();
        assert_eq!(revoked, ["green"]);
        assert_eq!(outcomes.iter().find(|o| o.term == "green").unwrap().action, RecertAction::RevokedBound);
        assert!(core.revoked.contains("green"));

        let mut a1 = a1;
        let out = renegotiate(
            "green", &mut core, &mut a1, &mut a2, &Entrenchment, &mut ledger, &pool(200, 12), 200, &p, 2, 2,
        )
        .unwrap();
        assert_eq!(out.path, RenegotiationPath::Revoked);
        assert!(out.adopted && out.restored);
        assert_eq!(out.certificate.as_ref().unwrap().tally.c, 0);
        assert_eq!(core.len(), 6);
        assert!(core.revoked.is_empty());
        assert_eq!(a1.term_rule("green"), a2.term_rule("green"));
        assert!(ledger.verify().is_valid());
    }

    #[test]
    fn recertification_never_adds_terms() {
        let (a1, a2) = sim_pair(NoiseParams::default());
        let mut ledger = Ledger::new();
        let mut core = certified_core(&a1, &a2, &mut ledger);
        core.core.remove("red");
        let (updated, outcomes) =
            recertify(&core, &a1, &a2, &pool(300, 3), 300, &ProtocolParams::default(), &mut ledger, 1, 9).unwrap();
        assert!(updated.core.is_subset(&core.core));
        assert!(outcomes.iter().all(|o| o.term != "red"));
    }

    #[test]
    fn renegotiating_a_certified_term_is_an_error() {
        let (mut a1, mut a2) = sim_pair(NoiseParams::NONE);
        let mut ledger = Ledger::new();
        let mut core = certified_core(&a1, &a2, &mut ledger);
        let err = renegotiate(
            "red", &mut core, &mut a1, &mut a2, &Entrenchment, &mut ledger, &pool(10, 0), 5,
            &ProtocolParams::default(), 1, 0,
        );
        assert!(matches!(err, Err(LifecycleError::AlreadyCertified(_))));
    }

    #[test]
    fn refusal_skips_reaudit() {
        struct Stubborn;
        impl VerdictProvider for Stubborn {
            fn agent_id(&self) -> &str {
                "Z"
            }
            fn verdict(&self, _: &str, _: &Event, _: u64) -> Result<Verdict, ProviderError> {
                Ok(Verdict::Assent)
            }
        }
        let mut a1 = SimProvider::new(AgentPolicy::canonical("A1", NoiseParams::NONE, 1));
        let mut ledger = Ledger::new();
        // A1 is entrenched, so the stubborn agent is asked to adopt and refuses.
        entry(&mut ledger, "A1", "red", 0, Verdict::Assent, 0);
        let mut core = CertifiedCore::empty(0);
        let out = renegotiate(
            "red", &mut core, &mut a1, &mut Stubborn, &Entrenchment, &mut ledger, &pool(50, 0), 50,
            &ProtocolParams::default(), 1, 0,
        )
        .unwrap();
        assert_eq!(out.reference_agent, "A1");
        assert!(!out.adopted && !out.restored && out.certificate.is_none());
        assert_eq!(out.path, RenegotiationPath::NeverCertified);
        assert_eq!(ledger.len(), 1);
        assert!(core.is_empty());
    }
}
