//! Append-only, SHA-256 hash-chained ledger of witnessed tests.
//!
//! Every verdict an agent gives during an audit becomes a [`WitnessedTest`]
//! linked to the digest of the entry before it. The on-disk form is JSON
//! Lines with a fixed field order; the digest is taken over a key-sorted,
//! whitespace-free JSON encoding of the payload (including `prev_hash`), so
//! any implementation can recompute it bit for bit.
//!
//! Any third party holding the file can run [`verify_bytes`] to check the
//! chain and [`replay_certification`] to recompute a certification decision
//! from the recorded verdicts alone.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::certification::{CertifiedCore, TermCertificate};
use crate::stats::{ProtocolParams, StatsError, TermTally};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("ledger chain invalid at seq {seq}")]
    Tampered { seq: u64 },
    #[error("event identifier must be non-empty")]
    EmptyEventId,
    #[error("ledger encoding failed: {0}")]
    Encode(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("refusing to replay: ledger chain invalid at seq {seq}")]
    Tampered { seq: u64 },
    #[error(
        "orphaned verdict at seq {seq}: agent {agent} on ({pei}, {term}, epoch {epoch}) has no counterpart"
    )]
    OrphanedVerdict { seq: u64, agent: String, pei: String, term: String, epoch: u64 },
    #[error("seq {seq}: more than two verdicts, or a repeated agent, for ({pei}, {term}, epoch {epoch})")]
    ExtraVerdict { seq: u64, pei: String, term: String, epoch: u64 },
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Public event identifier: stable, globally unique, non-empty.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EventId(String);

impl EventId {
    pub fn new(pei: impl Into<String>) -> Result<Self, LedgerError> {
        let pei = pei.into();
        if pei.is_empty() {
            return Err(LedgerError::EmptyEventId);
        }
        Ok(Self(pei))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for EventId {
    type Error = LedgerError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<EventId> for String {
    fn from(value: EventId) -> Self {
        value.0
    }
}

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An agent's judgment of whether a term applies to an event.
///
/// `Neutral` is an explicit abstention and is recorded like any other
/// verdict; it is not the same as the absence of a ledger entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Assent,
    Neutral,
    Dissent,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Assent => "assent",
            Self::Neutral => "neutral",
            Self::Dissent => "dissent",
        }
    }

    pub fn is_decided(self) -> bool {
        self != Self::Neutral
    }

    /// Assent and dissent swap; neutral stays neutral.
    pub fn inverted(self) -> Self {
        match self {
            Self::Assent => Self::Dissent,
            Self::Dissent => Self::Assent,
            Self::Neutral => Self::Neutral,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("not a verdict: {0:?} (expected assent, neutral or dissent)")]
pub struct ParseVerdictError(pub String);

impl FromStr for Verdict {
    type Err = ParseVerdictError;

    /// Exact, case-sensitive match. No coercion of near misses.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "assent" => Ok(Self::Assent),
            "neutral" => Ok(Self::Neutral),
            "dissent" => Ok(Self::Dissent),
            other => Err(ParseVerdictError(other.to_string())),
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// 32-byte SHA-256 digest, encoded as 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Strict parse: exactly 64 characters from `[0-9a-f]`.
    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 64 || !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return None;
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Self(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 lowercase hex chars"))
    }
}

/// The caller-supplied part of a ledger entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestPayload {
    pub agent: String,
    pub event: EventId,
    pub term: String,
    pub verdict: Verdict,
    pub epoch: u64,
}

/// One ledger entry. Field order here is the on-disk field order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WitnessedTest {
    pub seq: u64,
    pub epoch: u64,
    pub agent: String,
    pub pei: EventId,
    pub term: String,
    pub verdict: Verdict,
    pub prev_hash: Digest,
    pub entry_hash: Digest,
}

/// Hashed form: keys in lexicographic order, no whitespace.
#[derive(Serialize)]
struct CanonicalPayload<'a> {
    agent: &'a str,
    epoch: u64,
    pei: &'a str,
    prev_hash: &'a Digest,
    seq: u64,
    term: &'a str,
    verdict: Verdict,
}

impl WitnessedTest {
    /// Digest of the canonical payload, which includes `prev_hash`.
    pub fn compute_hash(&self) -> Digest {
        let canonical = CanonicalPayload {
            agent: &self.agent,
            epoch: self.epoch,
            pei: self.pei.as_str(),
            prev_hash: &self.prev_hash,
            seq: self.seq,
            term: &self.term,
            verdict: self.verdict,
        };
        let bytes = serde_json::to_vec(&canonical).expect("canonical payload always serializes");
        Digest(Sha256::digest(&bytes).into())
    }

    /// The exact JSON Lines record, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("ledger entry always serializes")
    }
}

/// Outcome of a chain check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ChainStatus {
    Valid,
    Invalid { invalid_at: u64 },
}

impl ChainStatus {
    pub fn is_valid(self) -> bool {
        matches!(self, Self::Valid)
    }
}

/// Checks seq continuity and both hash invariants for every entry.
pub fn verify_chain(entries: &[WitnessedTest]) -> ChainStatus {
    let mut prev = Digest::ZERO;
    for (index, entry) in entries.iter().enumerate() {
        let index = index as u64;
        if entry.seq != index || entry.prev_hash != prev || entry.compute_hash() != entry.entry_hash {
            return ChainStatus::Invalid { invalid_at: index };
        }
        prev = entry.entry_hash;
    }
    ChainStatus::Valid
}

/// Parses JSON Lines bytes into entries, or reports the first line that is
/// not a byte-exact encoding of a valid, correctly chained entry.
pub fn parse_bytes(bytes: &[u8]) -> Result<Vec<WitnessedTest>, ChainStatus> {
    let mut entries = Vec::new();
    let mut prev = Digest::ZERO;
    let mut rest = bytes;
    let mut index = 0u64;
    while !rest.is_empty() {
        let invalid = ChainStatus::Invalid { invalid_at: index };
        // Every record, including the last, is newline-terminated.
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            return Err(invalid);
        };
        let line = &rest[..end];
        rest = &rest[end + 1..];
        let entry: WitnessedTest = serde_json::from_slice(line).map_err(|_| invalid)?;
        if entry.to_line().as_bytes() != line
            || entry.seq != index
            || entry.prev_hash != prev
            || entry.compute_hash() != entry.entry_hash
        {
            return Err(invalid);
        }
        prev = entry.entry_hash;
        entries.push(entry);
        index += 1;
    }
    Ok(entries)
}

/// Chain status of a serialized ledger.
pub fn verify_bytes(bytes: &[u8]) -> ChainStatus {
    match parse_bytes(bytes) {
        Ok(_) => ChainStatus::Valid,
        Err(status) => status,
    }
}

/// Chain status of a ledger file. An unreadable file is an I/O error, never
/// an `Invalid` status.
pub fn verify_file(path: &Path) -> Result<ChainStatus, LedgerError> {
    let bytes = std::fs::read(path)?;
    Ok(verify_bytes(&bytes))
}

/// Filter for [`Ledger::query`]. Unset fields match everything.
#[derive(Debug, Clone, Default)]
pub struct LedgerQuery {
    pub term: Option<String>,
    pub agent: Option<String>,
    pub epochs: Option<RangeInclusive<u64>>,
}

impl LedgerQuery {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn term(mut self, term: impl Into<String>) -> Self {
        self.term = Some(term.into());
        self
    }

    pub fn agent(mut self, agent: impl Into<String>) -> Self {
        self.agent = Some(agent.into());
        self
    }

    pub fn epochs(mut self, epochs: RangeInclusive<u64>) -> Self {
        self.epochs = Some(epochs);
        self
    }

    pub fn matches(&self, entry: &WitnessedTest) -> bool {
        self.term.as_deref().map_or(true, |t| entry.term == t)
            && self.agent.as_deref().map_or(true, |a| entry.agent == a)
            && self.epochs.as_ref().map_or(true, |r| r.contains(&entry.epoch))
    }
}

struct FileSink {
    path: PathBuf,
    file: File,
    committed_len: u64,
}

/// The ledger. Appends take `&mut self` (single writer); reads borrow
/// immutably and can run concurrently against the same snapshot.
#[derive(Default)]
pub struct Ledger {
    entries: Vec<WitnessedTest>,
    sink: Option<FileSink>,
}

impl fmt::Debug for Ledger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ledger")
            .field("len", &self.entries.len())
            .field("path", &self.sink.as_ref().map(|s| &s.path))
            .finish()
    }
}

impl Ledger {
    /// In-memory ledger.
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds an in-memory ledger from already-verified entries.
    pub fn from_entries(entries: Vec<WitnessedTest>) -> Result<Self, LedgerError> {
        match verify_chain(&entries) {
            ChainStatus::Valid => Ok(Self { entries, sink: None }),
            ChainStatus::Invalid { invalid_at } => Err(LedgerError::Tampered { seq: invalid_at }),
        }
    }

    /// Opens a file-backed ledger, creating it if missing. An existing file
    /// must verify; appends are written through before they become visible.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LedgerError> {
        let path = path.as_ref().to_path_buf();
        let entries = match std::fs::read(&path) {
            Ok(bytes) => parse_bytes(&bytes).map_err(|status| match status {
                ChainStatus::Invalid { invalid_at } => LedgerError::Tampered { seq: invalid_at },
                ChainStatus::Valid => unreachable!("parse_bytes only fails with Invalid"),
            })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let committed_len = file.metadata()?.len();
        Ok(Self {
            entries,
            sink: Some(FileSink { path, file, committed_len }),
        })
    }

    /// Reads a ledger file without attaching a writer.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LedgerError> {
        let bytes = std::fs::read(path)?;
        match parse_bytes(&bytes) {
            Ok(entries) => Ok(Self { entries, sink: None }),
            Err(ChainStatus::Invalid { invalid_at }) => Err(LedgerError::Tampered { seq: invalid_at }),
            Err(ChainStatus::Valid) => unreachable!(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[WitnessedTest] {
        &self.entries
    }

    pub fn head_hash(&self) -> Digest {
        self.entries.last().map_or(Digest::ZERO, |e| e.entry_hash)
    }

    /// Highest epoch recorded so far.
    pub fn max_epoch(&self) -> Option<u64> {
        self.entries.iter().map(|e| e.epoch).max()
    }

    /// Appends one witnessed test and returns its sequence number. If the
    /// backing file cannot be written the append is rolled back and the
    /// ledger is left unchanged.
    pub fn append(&mut self, payload: TestPayload) -> Result<u64, LedgerError> {
        let seq = self.entries.len() as u64;
        let mut entry = WitnessedTest {
            seq,
            epoch: payload.epoch,
            agent: payload.agent,
            pei: payload.event,
            term: payload.term,
            verdict: payload.verdict,
            prev_hash: self.head_hash(),
            entry_hash: Digest::ZERO,
        };
        entry.entry_hash = entry.compute_hash();

        if let Some(sink) = self.sink.as_mut() {
            let mut line = entry.to_line();
            line.push('\n');
            if let Err(err) = sink.file.write_all(line.as_bytes()) {
                // Drop any partial record so the file stays chain-valid.
                let _ = sink.file.set_len(sink.committed_len);
                return Err(err.into());
            }
            sink.committed_len += line.len() as u64;
        }
        self.entries.push(entry);
        Ok(seq)
    }

    pub fn verify(&self) -> ChainStatus {
        verify_chain(&self.entries)
    }

    /// Entries matching every set filter, in seq order.
    pub fn query(&self, query: &LedgerQuery) -> Vec<&WitnessedTest> {
        self.entries.iter().filter(|e| query.matches(e)).collect()
    }

    /// The full JSON Lines encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.entries.len() * 260);
        for entry in &self.entries {
            out.extend_from_slice(entry.to_line().as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<(), LedgerError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Recomputes the certified core for `epoch` from ledger entries alone.
///
/// The chain is verified first. Each (term, event) at the epoch must carry
/// exactly two verdicts from two distinct agents; the order in which they
/// were recorded does not matter.
pub fn replay_certification(
    entries: &[WitnessedTest],
    params: &ProtocolParams,
    epoch: u64,
) -> Result<CertifiedCore, ReplayError> {
    if let ChainStatus::Invalid { invalid_at } = verify_chain(entries) {
        return Err(ReplayError::Tampered { seq: invalid_at });
    }
    params.validate()?;

    struct TermGroup<'a> {
        first_seq: u64,
        last_seq: u64,
        by_event: BTreeMap<&'a str, Vec<&'a WitnessedTest>>,
    }

    let mut groups: BTreeMap<&str, TermGroup<'_>> = BTreeMap::new();
    for entry in entries.iter().filter(|e| e.epoch == epoch) {
        let group = groups.entry(entry.term.as_str()).or_insert_with(|| TermGroup {
            first_seq: entry.seq,
            last_seq: entry.seq,
            by_event: BTreeMap::new(),
        });
        group.last_seq = entry.seq;
        let slot = group.by_event.entry(entry.pei.as_str()).or_default();
        if slot.len() == 2 || slot.iter().any(|other| other.agent == entry.agent) {
            return Err(ReplayError::ExtraVerdict {
                seq: entry.seq,
                pei: entry.pei.to_string(),
                term: entry.term.clone(),
                epoch,
            });
        }
        slot.push(entry);
    }

    let mut certificates = BTreeMap::new();
    for (term, group) in groups {
        let mut tally = TermTally::default();
        for pair in group.by_event.values() {
            match pair.as_slice() {
                [a, b] => tally.record(a.verdict, b.verdict),
                [lone] => {
                    return Err(ReplayError::OrphanedVerdict {
                        seq: lone.seq,
                        agent: lone.agent.clone(),
                        pei: lone.pei.to_string(),
                        term: lone.term.clone(),
                        epoch,
                    })
                }
                _ => unreachable!("slots hold one or two entries"),
            }
        }
        let cert = TermCertificate::from_tally(
            term.to_string(),
            tally,
            *params,
            epoch,
            Some((group.first_seq, group.last_seq)),
        )?;
        certificates.insert(term.to_string(), cert);
    }
    Ok(CertifiedCore::from_certificates(epoch, certificates))
}

/// [`replay_certification`] over a ledger file.
pub fn replay_file(path: &Path, params: &ProtocolParams, epoch: u64) -> Result<CertifiedCore, ReplayError> {
    let bytes = std::fs::read(path).map_err(LedgerError::from)?;
    match parse_bytes(&bytes) {
        Ok(entries) => replay_certification(&entries, params, epoch),
        Err(ChainStatus::Invalid { invalid_at }) => Err(ReplayError::Tampered { seq: invalid_at }),
        Err(ChainStatus::Valid) => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(agent: &str, pei: &str, term: &str, verdict: Verdict, epoch: u64) -> TestPayload {
        TestPayload {
            agent: agent.into(),
            event: EventId::new(pei).unwrap(),
            term: term.into(),
            verdict,
            epoch,
        }
    }

    fn filled(n: usize) -> Ledger {
        let mut ledger = Ledger::new();
        for i in 0..n {
            let agent = if i % 2 == 0 { "A1" } else { "A2" };
            let verdict = [Verdict::Assent, Verdict::Neutral, Verdict::Dissent][i % 3];
            ledger.append(payload(agent, &format!("e{}", i / 2), "T1", verdict, 0)).unwrap();
        }
        ledger
    }

    #[test]
    fn genesis_entry_uses_zero_prev_hash() {
        let mut ledger = Ledger::new();
        let seq = ledger.append(payload("A1", "e1", "T1", Verdict::Assent, 0)).unwrap();
        assert_eq!(seq, 0);
        assert_eq!(ledger.entries()[0].prev_hash, Digest::ZERO);
        assert_eq!(ledger.entries()[0].prev_hash.to_hex(), "0".repeat(64));
    }

    #[test]
    fn next_seq_is_length() {
        let mut ledger = filled(5);
        assert_eq!(ledger.append(payload("A1", "x", "T9", Verdict::Dissent, 3)).unwrap(), 5);
    }

    #[test]
    fn empty_and_untouched_ledgers_verify() {
        assert_eq!(Ledger::new().verify(), ChainStatus::Valid);
        assert_eq!(filled(100).verify(), ChainStatus::Valid);
    }

    #[test]
    fn canonical_payload_is_key_sorted_without_whitespace() {
        let ledger = filled(1);
        let e = &ledger.entries()[0];
        let canonical = serde_json::to_string(&CanonicalPayload {
            agent: &e.agent,
            epoch: e.epoch,
            pei: e.pei.as_str(),
            prev_hash: &e.prev_hash,
            seq: e.seq,
            term: &e.term,
            verdict: e.verdict,
        })
        .unwrap();
        assert_eq!(
            canonical,
            format!(
                "{{\"agent\":\"A1\",\"epoch\":0,\"pei\":\"e0\",\"prev_hash\":\"{}\",\"seq\":0,\"term\":\"T1\",\"verdict\":\"assent\"}}",
                "0".repeat(64)
            )
        );
        let expected: [u8; 32] = Sha256::digest(canonical.as_bytes()).into();
        assert_eq!(e.entry_hash, Digest(expected));
    }

    #[test]
    fn line_format_field_order() {
        let line = filled(1).entries()[0].to_line();
        assert!(line.starts_with("{\"seq\":0,\"epoch\":0,\"agent\":\"A1\",\"pei\":\"e0\",\"term\":\"T1\",\"verdict\":\"assent\",\"prev_hash\":\""));
        assert!(line.contains("\",\"entry_hash\":\""));
    }

    #[test]
    fn uppercase_hex_is_rejected() {
        let mut line = filled(1).entries()[0].to_line();
        let at = line.find("entry_hash\":\"").unwrap() + 13;
        let upper: String = line[at..at + 64].to_ascii_uppercase();
        line.replace_range(at..at + 64, &upper);
        if upper.chars().any(|c| c.is_ascii_uppercase()) {
            line.push('\n');
            assert_eq!(verify_bytes(line.as_bytes()), ChainStatus::Invalid { invalid_at: 0 });
        }
    }

    #[test]
    fn flipped_verdict_reports_its_seq() {
        let ledger = filled(100);
        let mut entries = ledger.entries().to_vec();
        entries[42].verdict = entries[42].verdict.inverted();
        if entries[42].verdict == ledger.entries()[42].verdict {
            entries[42].verdict = Verdict::Assent;
        }
        assert_eq!(verify_chain(&entries), ChainStatus::Invalid { invalid_at: 42 });
    }

    #[test]
    fn deletion_and_reorder_are_detected() {
        let ledger = filled(10);
        let mut deleted = ledger.entries().to_vec();
        deleted.remove(4);
        assert_eq!(verify_chain(&deleted), ChainStatus::Invalid { invalid_at: 4 });

        let mut swapped = ledger.entries().to_vec();
        swapped.swap(6, 7);
        assert_eq!(verify_chain(&swapped), ChainStatus::Invalid { invalid_at: 6 });
    }

    #[test]
    fn missing_trailing_newline_is_invalid() {
        let mut bytes = filled(3).to_bytes();
        bytes.pop();
        assert_eq!(verify_bytes(&bytes), ChainStatus::Invalid { invalid_at: 2 });
    }

    #[test]
    fn query_filters_compose() {
        let mut ledger = Ledger::new();
        for i in 0..10 {
            ledger.append(payload("A1", &format!("e{i}"), "T1", Verdict::Assent, 0)).unwrap();
            ledger.append(payload("A2", &format!("e{i}"), "T2", Verdict::Dissent, i % 3)).unwrap();
        }
        assert_eq!(ledger.query(&LedgerQuery::new().term("T1")).len(), 10);
        assert_eq!(ledger.query(&LedgerQuery::new()).len(), 20);
        let seqs: Vec<u64> = ledger.query(&LedgerQuery::new()).iter().map(|e| e.seq).collect();
        assert!(seqs.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(ledger.query(&LedgerQuery::new().agent("A2").epochs(1..=1)).len(), 3);
        assert!(ledger.query(&LedgerQuery::new().term("T3")).is_empty());
    }

    #[test]
    fn replay_hand_evaluated_tally() {
        // 80 agreeing pairs, 10 contrary pairs: c=0, k=80, n_aud=90.
        let mut ledger = Ledger::new();
        for i in 0..90 {
            let pei = format!("e{i}");
            let second = if i < 80 { Verdict::Assent } else { Verdict::Neutral };
            ledger.append(payload("A1", &pei, "T1", Verdict::Assent, 0)).unwrap();
            ledger.append(payload("A2", &pei, "T1", second, 0)).unwrap();
        }
        let core = replay_certification(ledger.entries(), &ProtocolParams::default(), 0).unwrap();
        let cert = &core.certificates["T1"];
        assert_eq!(cert.tally, TermTally { n_aud: 90, k: 80, c: 0 });
        assert!((cert.u - 0.0327).abs() < 1e-4, "u = {}", cert.u);
        assert!((cert.s - 0.889).abs() < 1e-3, "s = {}", cert.s);
        assert!(core.core.contains("T1"));
        assert_eq!(cert.ledger_span, Some((0, 179)));
    }

    #[test]
    fn replay_does_not_depend_on_agent_order() {
        let mut ab = Ledger::new();
        let mut ba = Ledger::new();
        for i in 0..60 {
            let pei = format!("e{i}");
            let v2 = if i % 7 == 0 { Verdict::Dissent } else { Verdict::Assent };
            ab.append(payload("A1", &pei, "T", Verdict::Assent, 0)).unwrap();
            ab.append(payload("A2", &pei, "T", v2, 0)).unwrap();
            ba.append(payload("A2", &pei, "T", v2, 0)).unwrap();
            ba.append(payload("A1", &pei, "T", Verdict::Assent, 0)).unwrap();
        }
        let p = ProtocolParams::default();
        let x = replay_certification(ab.entries(), &p, 0).unwrap();
        let y = replay_certification(ba.entries(), &p, 0).unwrap();
        assert_eq!(x.certificates["T"].tally, y.certificates["T"].tally);
        assert_eq!(x.core, y.core);
    }

    #[test]
    fn replay_rejects_orphans_and_duplicates() {
        let mut ledger = Ledger::new();
        ledger.append(payload("A1", "e1", "T", Verdict::Assent, 0)).unwrap();
        ledger.append(payload("A2", "e1", "T", Verdict::Assent, 0)).unwrap();
        ledger.append(payload("A1", "e2", "T", Verdict::Assent, 0)).unwrap();
        match replay_certification(ledger.entries(), &ProtocolParams::default(), 0) {
            Err(ReplayError::OrphanedVerdict { seq, .. }) => assert_eq!(seq, 2),
            other => panic!("expected orphan error, got {other:?}"),
        }

        ledger.append(payload("A1", "e2", "T", Verdict::Dissent, 0)).unwrap();
        assert!(matches!(
            replay_certification(ledger.entries(), &ProtocolParams::default(), 0),
            Err(ReplayError::ExtraVerdict { seq: 3, .. })
        ));
    }

    #[test]
    fn replay_refuses_tampered_ledger() {
        let mut entries = filled(20).entries().to_vec();
        entries[7].agent = "A9".into();
        assert!(matches!(
            replay_certification(&entries, &ProtocolParams::default(), 0),
            Err(ReplayError::Tampered { seq: 7 })
        ));
    }

    #[test]
    fn file_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        {
            let mut ledger = Ledger::open(&path).unwrap();
            ledger.append(payload("A1", "e1", "T", Verdict::Assent, 0)).unwrap();
            ledger.append(payload("A2", "e1", "T", Verdict::Neutral, 0)).unwrap();
        }
        let before = std::fs::read(&path).unwrap();
        {
            let mut ledger = Ledger::open(&path).unwrap();
            assert_eq!(ledger.len(), 2);
            ledger.append(payload("A1", "e2", "T", Verdict::Dissent, 1)).unwrap();
        }
        let after = std::fs::read(&path).unwrap();
        assert_eq!(&after[..before.len()], &before[..]);
        assert_eq!(verify_file(&path).unwrap(), ChainStatus::Valid);
        assert_eq!(Ledger::load(&path).unwrap().len(), 3);
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(verify_file(&dir.path().join("missing.jsonl")), Err(LedgerError::Io(_))));
    }

    #[test]
    fn verdict_parse_is_strict() {
        assert_eq!("assent".parse::<Verdict>().unwrap(), Verdict::Assent);
        assert!("Assent".parse::<Verdict>().is_err());
        assert!("maybe".parse::<Verdict>().is_err());
        assert!(" neutral".parse::<Verdict>().is_err());
    }

    #[test]
    fn empty_event_id_rejected() {
        assert!(EventId::new("").is_err());
        assert!(serde_json::from_str::<EventId>("\"\"").is_err());
    }
}
