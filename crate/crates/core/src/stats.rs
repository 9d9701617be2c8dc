//! Statistical kernels behind certification: the one-sided Wilson score
//! upper bound, the standard normal quantile, and term coverage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::Verdict;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("probability {0} outside the open interval (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("contradictions c={c} exceed eligible comparisons k={k}")]
    CountsInconsistent { c: u64, k: u64 },
    #[error("invalid tally: need c <= k <= n_aud, got c={c} k={k} n_aud={n_aud}")]
    InvalidTally { n_aud: u64, k: u64, c: u64 },
    #[error("invalid protocol parameter {name} = {value}")]
    InvalidParam { name: &'static str, value: f64 },
}

/// Threshold `tau`, confidence `delta` and coverage floor `rho_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub tau: f64,
    pub delta: f64,
    pub rho_min: f64,
}

impl ProtocolParams {
    pub fn new(tau: f64, delta: f64, rho_min: f64) -> Result<Self, StatsError> {
        let params = Self { tau, delta, rho_min };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(StatsError::InvalidParam { name: "tau", value: self.tau });
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(StatsError::InvalidParam { name: "delta", value: self.delta });
        }
        if !(0.0..=1.0).contains(&self.rho_min) {
            return Err(StatsError::InvalidParam { name: "rho_min", value: self.rho_min });
        }
        Ok(())
    }
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self { tau: 0.05, delta: 0.05, rho_min: 0.10 }
    }
}

/// Per-term audit counters.
///
/// `n_aud` counts events where at least one agent was decided, `k` the
/// eligible comparisons (both decided) and `c` the contradictions among them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TermTally {
    pub n_aud: u64,
    pub k: u64,
    pub c: u64,
}

impl TermTally {
    pub fn new(n_aud: u64, k: u64, c: u64) -> Result<Self, StatsError> {
        if c > k || k > n_aud {
            return Err(StatsError::InvalidTally { n_aud, k, c });
        }
        Ok(Self { n_aud, k, c })
    }

    /// Folds one event's pair of verdicts into the tally.
    pub fn record(&mut self, v1: Verdict, v2: Verdict) {
        let d1 = v1.is_decided();
        let d2 = v2.is_decided();
        if d1 || d2 {
            self.n_aud += 1;
        }
        if d1 && d2 {
            self.k += 1;
            if v1 != v2 {
                self.c += 1;
            }
        }
    }

    /// Observed contradiction rate `c / k`, zero when nothing was comparable.
    pub fn contradiction_rate(&self) -> f64 {
        if self.k == 0 {
            0.0
        } else {
            self.c as f64 / self.k as f64
        }
    }
}

/// Inverse of the standard normal CDF.
///
/// Wichura's AS 241 (PPND16) rational approximation, accurate to about
/// 1e-16 relative over the whole open interval.
#[allow(clippy::excessive_precision)]
pub fn normal_quantile(p: f64) -> Result<f64, StatsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(StatsError::ProbabilityOutOfRange(p));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2509.0809287301226727 * r + 33430.575583588128105) * r
            + 67265.770927008700853)
            * r
            + 45921.953931549871457)
            * r
            + 13731.693765509461125)
            * r
            + 1971.5909503065514427)
            * r
            + 133.14166789178437745)
            * r
            + 3.387132872796366608;
        let den = ((((((5226.495278852545925 * r + 28729.085735721942674) * r
            + 39307.89580009271061)
            * r
            + 21213.794301586595867)
            * r
            + 5394.1960214247511077)
            * r
            + 687.1870074920579083)
            * r
            + 42.313330701600911252)
            * r
            + 1.0;
        return Ok(q * num / den);
    }

    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let value = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
            + 0.24178072517745061177)
            * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734;
        let den = ((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
            + 0.0151986665636164571966)
            * r
            + 0.14810397642748007459)
            * r
            + 0.68976733498510000455)
            * r
            + 1.6763848301838038494)
            * r
            + 2.05319162663775882187)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772;
        let den = ((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
            + 1.8463183175100546818e-5)
            * r
            + 7.868691311456132591e-4)
            * r
            + 0.0148753612908506148525)
            * r
            + 0.13692988092273580531)
            * r
            + 0.59983220655588793769)
            * r
            + 1.0;
        num / den
    };
    Ok(if q < 0.0 { -value } else { value })
}

/// One-sided Wilson score upper bound on the contradiction rate.
///
/// Uses `z = normal_quantile(1 - delta)` with no continuity correction.
/// `k = 0` yields 1.0 so that a term with no eligible comparisons can never
/// certify.
pub fn wilson_upper(c: u64, k: u64, delta: f64) -> Result<f64, StatsError> {
    if c > k {
        return Err(StatsError::CountsInconsistent { c, k });
    }
    let z = normal_quantile(1.0 - delta)?;
    Ok(wilson_upper_with_z(c, k, z))
}

/// [`wilson_upper`] with a precomputed quantile, for hot loops.
pub fn wilson_upper_with_z(c: u64, k: u64, z: f64) -> f64 {
    debug_assert!(c <= k);
    if k == 0 || c == k {
        // At p_hat = 1 the numerator and denominator coincide exactly.
        return 1.0;
    }
    let n = k as f64;
    let p_hat = c as f64 / n;
    let z2 = z * z;
    let centre = p_hat + z2 / (2.0 * n);
    let spread = z * (p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre + spread) / (1.0 + z2 / n)).clamp(0.0, 1.0)
}

/// Coverage `k / max(n_aud, 1)`.
pub fn coverage(tally: &TermTally) -> f64 {
    tally.k as f64 / tally.n_aud.max(1) as f64
}

/// Largest contradiction count that still passes `u <= tau` at `k`
/// eligible comparisons, or `None` when even `c = 0` fails.
pub fn max_passing_contradictions(k: u64, tau: f64, z: f64) -> Option<u64> {
    // wilson_upper is nondecreasing in c, so scan upward until it fails.
    let mut best = None;
    for c in 0..=k {
        if wilson_upper_with_z(c, k, z) <= tau {
            best = Some(c);
        } else {
            break;
        }
    }
    best
}
