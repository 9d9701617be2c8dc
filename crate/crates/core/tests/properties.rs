use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use semcert::certification::CertificateStatus;
use semcert::ledger::{verify_bytes, verify_chain, ChainStatus, EventId, Ledger, TestPayload, Verdict};
use semcert::stats::{max_passing_contradictions, normal_quantile, wilson_upper, wilson_upper_with_z, ProtocolParams};

/// Upper root of n (p - p_hat)^2 = z^2 p (1 - p), found by bisection.
fn wilson_oracle(c: u64, k: u64, delta: f64) -> f64 {
    if k == 0 || c == k {
        return 1.0;
    }
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - delta);
    let n = k as f64;
    let p_hat = c as f64 / n;
    let f = |p: f64| n * (p - p_hat).powi(2) - z * z * p * (1.0 - p);
    let (mut lo, mut hi) = (p_hat, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn verdict() -> impl Strategy<Value = Verdict> {
    prop_oneof![Just(Verdict::Assent), Just(Verdict::Neutral), Just(Verdict::Dissent)]
}

fn ledger_from(rows: &[(u8, u8, Verdict, u64)]) -> Ledger {
    let mut ledger = Ledger::new();
    for (i, (agent, term, v, epoch)) in rows.iter().enumerate() {
        ledger
            .append(TestPayload {
                agent: format!("A{agent}"),
                event: EventId::new(format!("ev-{i}")).unwrap(),
                term: ["red", "green", "blue"][*term as usize % 3].to_string(),
                verdict: *v,
                epoch: *epoch,
            })
            .unwrap();
    }
    ledger
}

proptest! {
    #[test]
    fn wilson_agrees_with_root_finding(k in 0u64..2000, frac in 0.0f64..=1.0, delta in 0.001f64..0.5) {
        let c = (frac * k as f64).floor() as u64;
        let u = wilson_upper(c, k, delta).unwrap();
        prop_assert!((u - wilson_oracle(c, k, delta)).abs() < 1e-9);
    }

    #[test]
    fn wilson_bounds_and_monotonicity(k in 1u64..2000, frac in 0.0f64..1.0, delta in 0.001f64..0.5) {
        let c = ((frac * k as f64).floor() as u64).min(k - 1);
        let u = wilson_upper(c, k, delta).unwrap();
        prop_assert!(u >= c as f64 / k as f64);
        prop_assert!(u <= 1.0);
        prop_assert!(wilson_upper(c + 1, k, delta).unwrap() >= u);
        prop_assert!(wilson_upper(c, k + 1, delta).unwrap() <= u);
        prop_assert!(wilson_upper(c, k, delta / 2.0).unwrap() >= u);
    }

    #[test]
    fn quantile_inverts_normal_cdf(p in 1e-6f64..(1.0 - 1e-6)) {
        let z = normal_quantile(p).unwrap();
        let back = Normal::new(0.0, 1.0).unwrap().cdf(z);
        prop_assert!((back - p).abs() < 1e-9 * p.min(1.0 - p).max(1e-3));
    }

    #[test]
    fn certification_predicate(
        u in 0.0f64..=1.0,
        s in 0.0f64..=1.0,
        tau in 0.0f64..=1.0,
        rho in 0.0f64..=1.0,
    ) {
        let params = ProtocolParams::new(tau, 0.05, rho).unwrap();
        let status = CertificateStatus::evaluate(u, s, &params);
        prop_assert_eq!(status.is_certified(), u <= tau && s >= rho);
    }

    #[test]
    fn max_passing_is_the_threshold(k in 1u64..600, tau in 0.005f64..0.3, delta in 0.01f64..0.2) {
        let z = normal_quantile(1.0 - delta).unwrap();
        match max_passing_contradictions(k, tau, z) {
            Some(m) => {
                prop_assert!(wilson_upper_with_z(m, k, z) <= tau);
                if m < k {
                    prop_assert!(wilson_upper_with_z(m + 1, k, z) > tau);
                }
            }
            None => prop_assert!(wilson_upper_with_z(0, k, z) > tau),
        }
    }

    #[test]
    fn any_bit_flip_is_caught_at_its_line(
        rows in prop::collection::vec((1u8..=2, 0u8..3, verdict(), 0u64..3), 1..40),
        pick in any::<prop::sample::Index>(),
        bit in 0u32..8,
    ) {
        let ledger = ledger_from(&rows);
        prop_assert_eq!(verify_chain(ledger.entries()), ChainStatus::Valid);
        let mut bytes = ledger.to_bytes();
        let pos = pick.index(bytes.len());
        bytes[pos] ^= 1 << bit;
        let line = bytes[..pos].iter().filter(|b| **b == b'\n').count() as u64;
        prop_assert_eq!(verify_bytes(&bytes), ChainStatus::Invalid { invalid_at: line });
    }

    #[test]
    fn serialization_round_trips(rows in prop::collection::vec((1u8..=2, 0u8..3, verdict(), 0u64..3), 0..40)) {
        let ledger = ledger_from(&rows);
        let bytes = ledger.to_bytes();
        prop_assert_eq!(verify_bytes(&bytes), ChainStatus::Valid);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        ledger.write_to(&path).unwrap();
        let loaded = Ledger::load(&path).unwrap();
        prop_assert_eq!(loaded.entries(), ledger.entries());
    }
}
