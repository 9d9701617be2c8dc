//! Statistical certification of shared vocabulary between two agents.
//!
//! Agents are audited term by term on public events. Every verdict goes into
//! a hash-chained ledger, and a term enters the certified core only when a
//! Wilson upper bound on its contradiction rate clears a threshold.

pub mod adapter;
pub mod certification;
pub mod cli;
pub mod experiments;
pub mod guard;
pub mod ledger;
pub mod lifecycle;
pub mod rng;
pub mod simagents;
pub mod stats;

pub use certification::{certify, CertifiedCore, Event, ProviderError, TermCertificate, VerdictProvider};
pub use ledger::{ChainStatus, EventId, Ledger, Verdict, WitnessedTest};
pub use stats::{wilson_upper, ProtocolParams, TermTally};
