//! Core-guarded reasoning: restrict decisions to certified terms and measure
//! how often two agents still contradict each other on held-out events.
//!
//! Evaluation verdicts never enter the certification ledger. Callers that
//! need a record of them ask for an [`EvaluationRecord`] log instead.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::certification::{CertifiedCore, Event, VerdictProvider};
use crate::ledger::{EventId, Verdict};

/// The terms an agent may consult for consequential decisions.
pub fn guarded_vocabulary(core: &CertifiedCore, full_vocab: &[String]) -> BTreeSet<String> {
    full_vocab.iter().filter(|t| core.contains(t)).cloned().collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermDisagreement {
    pub eligible: u64,
    pub contradictions: u64,
    pub rate: f64,
}

impl TermDisagreement {
    fn record(&mut self, v1: Verdict, v2: Verdict) {
        if v1.is_decided() && v2.is_decided() {
            self.eligible += 1;
            if v1 != v2 {
                self.contradictions += 1;
            }
        }
    }

    fn finish(&mut self) {
        self.rate = ratio(self.contradictions, self.eligible);
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Pooled contradiction rate over a set of terms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DisagreementReport {
    pub terms_used: BTreeSet<String>,
    pub eligible: u64,
    pub contradictions: u64,
    pub rate: f64,
    pub per_term: BTreeMap<String, TermDisagreement>,
    /// No terms were available, so `rate = 0` means "nothing measurable".
    pub no_vocabulary: bool,
    /// Some provider call failed; affected terms hold partial counts.
    pub incomplete: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub errors: BTreeMap<String, String>,
}

impl DisagreementReport {
    /// Recomputes the totals from the per-term counts.
    pub fn restricted_to(&self, terms: &BTreeSet<String>) -> DisagreementReport {
        let mut out = DisagreementReport {
            terms_used: terms.intersection(&self.terms_used).cloned().collect(),
            ..Default::default()
        };
        for term in &out.terms_used {
            let counts = self.per_term[term];
            out.eligible += counts.eligible;
            out.contradictions += counts.contradictions;
            out.per_term.insert(term.clone(), counts);
            if let Some(err) = self.errors.get(term) {
                out.errors.insert(term.clone(), err.clone());
            }
        }
        out.rate = ratio(out.contradictions, out.eligible);
        out.no_vocabulary = out.terms_used.is_empty();
        out.incomplete = !out.errors.is_empty();
        out
    }
}

/// One held-out comparison, for the evaluation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub epoch: u64,
    pub term: String,
    pub pei: EventId,
    pub verdicts: [(String, Verdict); 2],
}

/// Queries both agents on every (term, event) pair and counts contradictions
/// among eligible comparisons.
pub fn measure_disagreement(
    a1: &dyn VerdictProvider,
    a2: &dyn VerdictProvider,
    terms: &BTreeSet<String>,
    events: &[Event],
    epoch: u64,
) -> DisagreementReport {
    measure(a1, a2, terms, events, epoch, None)
}

/// [`measure_disagreement`] that also returns every comparison made.
pub fn measure_disagreement_logged(
    a1: &dyn VerdictProvider,
    a2: &dyn VerdictProvider,
    terms: &BTreeSet<String>,
    events: &[Event],
    epoch: u64,
) -> (DisagreementReport, Vec<EvaluationRecord>) {
    let mut log = Vec::new();
    let report = measure(a1, a2, terms, events, epoch, Some(&mut log));
    (report, log)
}

fn measure(
    a1: &dyn VerdictProvider,
    a2: &dyn VerdictProvider,
    terms: &BTreeSet<String>,
    events: &[Event],
    epoch: u64,
    mut log: Option<&mut Vec<EvaluationRecord>>,
) -> DisagreementReport {
    let mut report = DisagreementReport { terms_used: terms.clone(), no_vocabulary: terms.is_empty(), ..Default::default() };
    for term in terms {
        let mut counts = TermDisagreement::default();
        for event in events {
            let pair = a1.verdict(term, event, epoch).and_then(|v1| Ok((v1, a2.verdict(term, event, epoch)?)));
            let (v1, v2) = match pair {
                Ok(pair) => pair,
                Err(err) => {
                    report.errors.insert(term.clone(), err.to_string());
                    break;
                }
            };
            counts.record(v1, v2);
            if let Some(log) = log.as_deref_mut() {
                log.push(EvaluationRecord {
                    epoch,
                    term: term.clone(),
                    pei: event.pei.clone(),
                    verdicts: [(a1.agent_id().to_string(), v1), (a2.agent_id().to_string(), v2)],
                });
            }
        }
        counts.finish();
        report.eligible += counts.eligible;
        report.contradictions += counts.contradictions;
        report.per_term.insert(term.clone(), counts);
    }
    report.rate = ratio(report.contradictions, report.eligible);
    report.incomplete = !report.errors.is_empty();
    report
}

/// Writes the log as JSON lines.
pub fn write_evaluation_log(records: &[EvaluationRecord], mut out: impl Write) -> io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
