//! Synthetic agents over a circular hue space.
//!
//! Each agent holds, per colour term, an arc of hues on which it assents and
//! dissents elsewhere. A background noise process first neutralizes a
//! fraction of verdicts and then flips a fraction of the survivors. Noise
//! draws are keyed by (term, event, epoch), so the same query always gets
//! the same answer regardless of call order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certification::{Event, ProviderError, VerdictProvider};
use crate::ledger::{EventId, Verdict};
use crate::rng::{derive_seed, keyed_uniforms, seeded_rng};

/// The six colour terms, in audit order, with their canonical hue centres.
pub const COLOR_TERMS: [(&str, f64); 6] = [
    ("red", 0.0),
    ("yellow", 60.0),
    ("green", 120.0),
    ("cyan", 180.0),
    ("blue", 240.0),
    ("magenta", 300.0),
];

/// Half-width of each canonical arc: six 60°-wide arcs tile the circle.
pub const CANONICAL_HALF_WIDTH: f64 = 30.0;

pub fn color_vocabulary() -> Vec<String> {
    COLOR_TERMS.iter().map(|(t, _)| t.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("unknown term {0:?}")]
    UnknownTerm(String),
    #[error("event {0} carries no hue")]
    MissingHue(String),
    #[error("target disagreement {target} unreachable (achievable range {lo}..={hi})")]
    CalibrationOutOfRange { target: f64, lo: f64, hi: f64 },
    #[error("invalid simulation config: {0}")]
    Config(String),
}

/// Circular distance between two hues, in `[0, 180]`.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Arc of hues `[center - half_width, center + half_width]` modulo 360.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub center: f64,
    pub half_width: f64,
}

impl Interval {
    pub fn new(center: f64, half_width: f64) -> Self {
        Self { center: center.rem_euclid(360.0), half_width: half_width.clamp(0.0, 180.0) }
    }

    pub fn contains(&self, hue: f64) -> bool {
        hue_distance(hue, self.center) <= self.half_width
    }

    pub fn shifted(&self, degrees: f64) -> Self {
        Self::new(self.center + degrees, self.half_width)
    }

    /// Arc length in degrees.
    pub fn length(&self) -> f64 {
        2.0 * self.half_width
    }

    /// The arc as at most two half-open segments inside `[0, 360)`.
    fn segments(&self) -> Vec<(f64, f64)> {
        if self.half_width >= 180.0 {
            return vec![(0.0, 360.0)];
        }
        let start = (self.center - self.half_width).rem_euclid(360.0);
        let end = start + self.length();
        if end <= 360.0 {
            vec![(start, end)]
        } else {
            vec![(start, 360.0), (0.0, end - 360.0)]
        }
    }

    /// Degrees of hue covered by both arcs.
    pub fn overlap(&self, other: &Interval) -> f64 {
        let mut total = 0.0;
        for (a0, a1) in self.segments() {
            for (b0, b1) in other.segments() {
                total += (a1.min(b1) - a0.max(b0)).max(0.0);
            }
        }
        total
    }

    /// Fraction of the hue circle on which the two arcs give different
    /// noise-free verdicts: `|A xor B| / 360`.
    pub fn mismatch(&self, other: &Interval) -> f64 {
        ((self.length() + other.length() - 2.0 * self.overlap(other)) / 360.0).clamp(0.0, 1.0)
    }
}

/// Verdict noise: neutralize first, then flip a fraction of the survivors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub neutral_rate: f64,
    pub flip_rate: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self { neutral_rate: 0.05, flip_rate: 0.01 }
    }
}

impl NoiseParams {
    pub const NONE: NoiseParams = NoiseParams { neutral_rate: 0.0, flip_rate: 0.0 };

    /// Probability that two agents with these noise parameters contradict on
    /// an eligible comparison, given their noise-free verdicts disagree with
    /// probability `mismatch`.
    pub fn observed_contradiction(&self, mismatch: f64) -> f64 {
        let f = self.flip_rate;
        let one_flip = 2.0 * f * (1.0 - f);
        mismatch * (1.0 - one_flip) + (1.0 - mismatch) * one_flip
    }
}

/// A simulated agent: one arc per term plus its noise process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPolicy {
    pub agent: String,
    pub rules: BTreeMap<String, Interval>,
    pub noise: NoiseParams,
    pub seed: u64,
}

impl AgentPolicy {
    /// The canonical colour partition.
    pub fn canonical(agent: impl Into<String>, noise: NoiseParams, seed: u64) -> Self {
        let rules = COLOR_TERMS
            .iter()
            .map(|(term, center)| (term.to_string(), Interval::new(*center, CANONICAL_HALF_WIDTH)))
            .collect();
        Self { agent: agent.into(), rules, noise, seed }
    }

    pub fn rule(&self, term: &str) -> Result<&Interval, SimError> {
        self.rules.get(term).ok_or_else(|| SimError::UnknownTerm(term.to_string()))
    }

    /// Noise-free verdict.
    pub fn base_verdict(&self, term: &str, hue: f64) -> Result<Verdict, SimError> {
        Ok(if self.rule(term)?.contains(hue) { Verdict::Assent } else { Verdict::Dissent })
    }

    /// Verdict with noise drawn from the stream keyed by (term, pei, epoch).
    pub fn keyed_verdict(&self, term: &str, pei: &EventId, hue: f64, epoch: u64) -> Result<Verdict, SimError> {
        let draws = keyed_uniforms(self.seed, &[term.as_bytes(), pei.as_str().as_bytes(), &epoch.to_le_bytes()]);
        sim_verdict(self, term, hue, draws)
    }

    /// Same rules and noise under a different identity.
    pub fn rules_equal(&self, other: &AgentPolicy) -> bool {
        self.rules == other.rules && self.noise == other.noise
    }
}

/// Applies the policy to one event with explicit noise draws `(u1, u2)`:
/// neutral if `u1 < neutral_rate`, otherwise inverted if `u2 < flip_rate`.
pub fn sim_verdict(policy: &AgentPolicy, term: &str, hue: f64, draws: (f64, f64)) -> Result<Verdict, SimError> {
    let base = policy.base_verdict(term, hue)?;
    let (u_neutral, u_flip) = draws;
    if u_neutral < policy.noise.neutral_rate {
        return Ok(Verdict::Neutral);
    }
    if u_flip < policy.noise.flip_rate {
        return Ok(base.inverted());
    }
    Ok(base)
}

/// Returns a copy with `term`'s arc centre moved by `magnitude` degrees.
pub fn inject_drift(policy: &AgentPolicy, term: &str, magnitude: f64) -> Result<AgentPolicy, SimError> {
    let mut drifted = policy.clone();
    let rule = drifted.rules.get_mut(term).ok_or_else(|| SimError::UnknownTerm(term.to_string()))?;
    *rule = rule.shifted(magnitude);
    Ok(drifted)
}

/// A point in the hue space with its public identifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub pei: EventId,
    pub hue: f64,
}

impl SimEvent {
    pub fn to_event(&self) -> Event {
        Event { pei: self.pei.clone(), content: format!("hue={:.4}", self.hue), hue: Some(self.hue) }
    }
}

/// `n` events with i.i.d. uniform hues. The PEI encodes seed and index.
pub fn gen_events(n: usize, seed: u64) -> Vec<SimEvent> {
    let mut rng = seeded_rng(derive_seed(seed, &[b"events"]));
    (0..n)
        .map(|i| SimEvent {
            pei: EventId::new(format!("ev-{seed:016x}-{i:06}")).expect("non-empty"),
            hue: rng.gen_range(0.0..360.0),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    NoiseOnly,
    ModerateDrift,
    HighDivergence,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Self::NoiseOnly, Self::ModerateDrift, Self::HighDivergence];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoiseOnly => "noise-only",
            Self::ModerateDrift => "moderate",
            Self::HighDivergence => "high",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noise-only" | "noise_only" => Ok(Self::NoiseOnly),
            "moderate" | "moderate-drift" | "moderate_drift" => Ok(Self::ModerateDrift),
            "high" | "high-divergence" | "high_divergence" => Ok(Self::HighDivergence),
            other => Err(SimError::Config(format!("unknown condition {other:?}"))),
        }
    }
}

/// Knobs for the three divergence conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub noise: NoiseParams,
    /// Terms the second agent reinterprets under Moderate Drift.
    pub moderate_drifted_terms: usize,
    /// Mean unguarded disagreement the Moderate Drift shift is calibrated to.
    pub moderate_target_unguarded: f64,
    /// Explicit shift in degrees; overrides the calibration when set.
    pub moderate_shift: Option<f64>,
    /// High Divergence draws arc centres from a grid with this spacing...
    pub high_center_step: f64,
    /// ...and half-widths uniformly from this set.
    pub high_half_widths: Vec<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            noise: NoiseParams::default(),
            moderate_drifted_terms: 2,
            moderate_target_unguarded: 0.074,
            moderate_shift: None,
            high_center_step: 20.0,
            high_half_widths: vec![20.0, 35.0, 50.0, 65.0, 80.0],
        }
    }
}

impl SimConfig {
    /// Shift applied to each drifted term under Moderate Drift.
    pub fn moderate_shift_degrees(&self) -> Result<f64, SimError> {
        match self.moderate_shift {
            Some(shift) => Ok(shift),
            None => calibrate_moderate_shift(
                self.moderate_target_unguarded,
                COLOR_TERMS.len(),
                self.moderate_drifted_terms,
                &self.noise,
            ),
        }
    }
}

/// Expected pooled unguarded disagreement when `n_drifted` of `n_terms`
/// canonical arcs are shifted by `shift` degrees in one agent.
///
/// Every term has the same chance of an eligible comparison, so the pooled
/// rate is the mean of the per-term observed contradiction probabilities.
pub fn expected_unguarded(shift: f64, n_terms: usize, n_drifted: usize, noise: &NoiseParams) -> f64 {
    let base = Interval::new(0.0, CANONICAL_HALF_WIDTH);
    let drifted = noise.observed_contradiction(base.mismatch(&base.shifted(shift)));
    let aligned = noise.observed_contradiction(0.0);
    (n_drifted as f64 * drifted + (n_terms - n_drifted) as f64 * aligned) / n_terms as f64
}

/// Solves [`expected_unguarded`] `= target` for the shift, by bisection over
/// `[0, 2 * half_width]` where the mismatch grows monotonically.
pub fn calibrate_moderate_shift(
    target: f64,
    n_terms: usize,
    n_drifted: usize,
    noise: &NoiseParams,
) -> Result<f64, SimError> {
    if n_drifted > n_terms || n_terms == 0 {
        return Err(SimError::Config(format!("{n_drifted} drifted terms of {n_terms}")));
    }
    let max_shift = 2.0 * CANONICAL_HALF_WIDTH;
    let lo = expected_unguarded(0.0, n_terms, n_drifted, noise);
    let hi = expected_unguarded(max_shift, n_terms, n_drifted, noise);
    if !(lo..=hi).contains(&target) {
        return Err(SimError::CalibrationOutOfRange { target, lo, hi });
    }
    let (mut a, mut b) = (0.0, max_shift);
    for _ in 0..100 {
        let mid = 0.5 * (a + b);
        if expected_unguarded(mid, n_terms, n_drifted, noise) < target {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Draws the two agents' policies for a condition.
///
/// - Noise-Only: both agents use the canonical partition.
/// - Moderate Drift: agent 2 shifts `moderate_drifted_terms` randomly chosen
///   arcs by the calibrated shift (random direction).
/// - High Divergence: each agent independently draws every arc centre
///   uniformly from the centre grid and its half-width uniformly from the
///   half-width set.
pub fn gen_policies(
    condition: Condition,
    seed: u64,
    config: &SimConfig,
) -> Result<(AgentPolicy, AgentPolicy), SimError> {
    let noise_seed = |agent: &str| derive_seed(seed, &[b"noise", agent.as_bytes()]);
    let mut a1 = AgentPolicy::canonical("A1", config.noise, noise_seed("A1"));
    let mut a2 = AgentPolicy::canonical("A2", config.noise, noise_seed("A2"));
    let mut rng = seeded_rng(derive_seed(seed, &[b"policies", condition.as_str().as_bytes()]));
    match condition {
        Condition::NoiseOnly => {}
        Condition::ModerateDrift => {
            let shift = config.moderate_shift_degrees()?;
            if config.moderate_drifted_terms > COLOR_TERMS.len() {
                return Err(SimError::Config("more drifted terms than vocabulary".into()));
            }
            for index in sample(&mut rng, COLOR_TERMS.len(), config.moderate_drifted_terms).into_vec() {
                let direction = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let term = COLOR_TERMS[index].0;
                a2 = inject_drift(&a2, term, direction * shift)?;
            }
        }
        Condition::HighDivergence => {
            if config.high_half_widths.is_empty() || config.high_center_step <= 0.0 {
                return Err(SimError::Config("high divergence needs widths and a positive centre step".into()));
            }
            let positions = (360.0 / config.high_center_step).round().max(1.0) as u32;
            for policy in [&mut a1, &mut a2] {
                for (term, _) in COLOR_TERMS {
                    let center = f64::from(rng.gen_range(0..positions)) * config.high_center_step;
                    let width = config.high_half_widths[rng.gen_range(0..config.high_half_widths.len())];
                    policy.rules.insert(term.to_string(), Interval::new(center, width));
                }
            }
        }
    }
    Ok((a1, a2))
}

/// [`VerdictProvider`] backed by an [`AgentPolicy`]. Supports adoption.
#[derive(Debug, Clone)]
pub struct SimProvider {
    pub policy: AgentPolicy,
}

impl SimProvider {
    pub fn new(policy: AgentPolicy) -> Self {
        Self { policy }
    }
}

impl VerdictProvider for SimProvider {
    fn agent_id(&self) -> &str {
        &self.policy.agent
    }

    fn verdict(&self, term: &str, event: &Event, epoch: u64) -> Result<Verdict, ProviderError> {
        let domain = |e: SimError| ProviderError::Domain { agent: self.policy.agent.clone(), detail: e.to_string() };
        let hue = event.hue.ok_or_else(|| domain(SimError::MissingHue(event.pei.to_string())))?;
        self.policy.keyed_verdict(term, &event.pei, hue, epoch).map_err(domain)
    }

    fn term_rule(&self, term: &str) -> Option<Interval> {
        self.policy.rules.get(term).copied()
    }

    /// Copies the rule; this agent's own noise process is kept.
    fn adopt_rule(&mut self, term: &str, rule: &Interval) -> Result<(), ProviderError> {
        match self.policy.rules.get_mut(term) {
            Some(slot) => {
                *slot = *rule;
                Ok(())
            }
            None => Err(ProviderError::Domain {
                agent: self.policy.agent.clone(),
                detail: SimError::UnknownTerm(term.to_string()).to_string(),
            }),
        }
    }
}
