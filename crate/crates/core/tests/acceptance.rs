//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fail.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use semcert::adapter::{ExternalProvider, PolicyFile, VerdictTable};
use semcert::certification::{certify, sample_audit_plan, Event};
use semcert::experiments::{
    run_timeseries, run_tradeoff, static_run, summarize_static, Scenario, StaticConfig, TimeseriesConfig,
    TimeseriesRecord, TradeoffConfig,
};
use semcert::guard::measure_disagreement;
use semcert::ledger::{replay_certification, verify_bytes, ChainStatus, EventId, Ledger, Verdict};
use semcert::rng::seeded_rng;
use semcert::simagents::Condition;
use semcert::stats::{wilson_upper, ProtocolParams};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

/// Upper root of k (p - p_hat)^2 = z^2 p (1 - p), by bisection to machine precision.
fn wilson_oracle(c: u64, k: u64, delta: f64) -> f64 {
    if k == 0 || c == k {
        return 1.0;
    }
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - delta);
    let n = k as f64;
    let p_hat = c as f64 / n;
    let (mut lo, mut hi) = (p_hat, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if n * (mid - p_hat).powi(2) < z * z * mid * (1.0 - mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// ------------------------------------------------------------ 1, 2, 6

struct StaticOutcome {
    table: Outcome,
    empty_core: Outcome,
    fixtures: Vec<Vec<u8>>,
    replay_mismatches: Vec<String>,
    replayed: usize,
}

fn static_criteria() -> StaticOutcome {
    let config = StaticConfig::default();
    let targets = [
        (Condition::NoiseOnly, 0.021, 0.021, 3.8),
        (Condition::ModerateDrift, 0.074, 0.021, 2.6),
        (Condition::HighDivergence, 0.407, 0.018, 0.2),
    ];
    let started = Instant::now();
    let mut pass = true;
    let mut details = Vec::new();
    let mut empty_core = Outcome::new(false, "not run");
    let mut fixtures = Vec::new();
    let mut replay_mismatches = Vec::new();
    let mut replayed = 0;
    for (condition, unguarded, guarded, core) in targets {
        let results: Vec<_> = (0..config.n_runs)
            .into_par_iter()
            .map(|run| {
                let art = static_run(condition, run, &config).expect("static run");
                let params = config.params;
                let replay = replay_certification(art.ledger.entries(), &params, 0).expect("replay");
                let same = serde_json::to_string(&replay).unwrap() == serde_json::to_string(&art.core).unwrap();
                let fixture = (run < 4).then(|| art.ledger.to_bytes());
                (art.record, same, fixture)
            })
            .collect();
        let records: Vec<_> = results.iter().map(|r| r.0.clone()).collect();
        for (record, same, fixture) in results {
            replayed += 1;
            if !same {
                replay_mismatches.push(format!("{} run {}", condition.as_str(), record.run));
            }
            fixtures.extend(fixture);
        }
        let s = summarize_static(condition, &records);
        let ok = within(s.mean_unguarded, unguarded, 0.01)
            && within(s.mean_guarded, guarded, 0.01)
            && within(s.mean_core, core, 0.6);
        pass &= ok;
        details.push(format!(
            "{}: unguarded {} guarded {} core {:.2}",
            condition.as_str(),
            pct(s.mean_unguarded),
            pct(s.mean_guarded),
            s.mean_core
        ));
        if condition == Condition::HighDivergence {
            empty_core = Outcome::new(s.empty_cores >= 90, format!("{}/{} empty cores", s.empty_cores, s.n_runs));
        }
    }
    let elapsed = started.elapsed();
    details.push(format!("{:.1}s", elapsed.as_secs_f64()));
    StaticOutcome {
        table: Outcome::new(pass && elapsed < Duration::from_secs(120), details.join("; ")),
        empty_core,
        fixtures,
        replay_mismatches,
        replayed,
    }
}

// ------------------------------------------------------------------ 3

fn mean_over(records: &[TimeseriesRecord], epochs: std::ops::RangeInclusive<u64>, f: impl Fn(&TimeseriesRecord) -> f64) -> f64 {
    let xs: Vec<f64> = records.iter().filter(|r| epochs.contains(&r.epoch)).map(f).collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn timeseries_criterion() -> Outcome {
    let config = TimeseriesConfig::default();
    let run = |s| run_timeseries(s, &config).expect("timeseries");
    let (baseline, frozen, recert, reneg) =
        (run(Scenario::Baseline), run(Scenario::Frozen), run(Scenario::Recert), run(Scenario::Renegotiate));
    let last = config.epochs - 1;
    let base_guarded = mean_over(&baseline, 0..=last, |r| r.guarded_rate);
    let base_unguarded = mean_over(&baseline, 0..=last, |r| r.unguarded_rate);
    let frozen_guarded = mean_over(&frozen, 11..=last, |r| r.guarded_rate);
    let recert_guarded = mean_over(&recert, 15..=last, |r| r.guarded_rate);
    let shrink = mean_over(&recert, 0..=config.drift_epoch - 1, |r| r.core_size) - mean_over(&recert, 15..=last, |r| r.core_size);
    let final_core = reneg.iter().find(|r| r.epoch == last).unwrap().core_size;
    let reneg_unguarded = mean_over(&reneg, 15..=last, |r| r.unguarded_rate);

    let frozen_ok = frozen_guarded >= base_guarded + 0.015 && within(frozen_guarded, 0.046, 0.015);
    let recert_ok = within(recert_guarded, base_guarded, 0.01) && within(shrink, 1.0, 0.5);
    let reneg_ok = within(final_core, 4.0, 0.6) && within(reneg_unguarded, base_unguarded, 0.015);
    Outcome::new(
        frozen_ok && recert_ok && reneg_ok,
        format!(
            "baseline guarded {}; frozen 11-{last} {}; recert 15-{last} {} shrink {:.2}; renegotiate final core {:.2} unguarded {} vs {}",
            pct(base_guarded),
            pct(frozen_guarded),
            pct(recert_guarded),
            shrink,
            final_core,
            pct(reneg_unguarded),
            pct(base_unguarded)
        ),
    )
}

// ------------------------------------------------------------------ 4

fn soundness_criterion() -> Outcome {
    let delta = 0.05;
    let trials = 10_000;
    let mut worst = (0.0, 0.0, 0);
    for (i, p) in [0.01, 0.05, 0.1, 0.3].into_iter().enumerate() {
        for (j, k) in [20u64, 50, 120, 400].into_iter().enumerate() {
            let mut rng = seeded_rng(1000 + (i * 4 + j) as u64);
            let dist = Binomial::new(k, p).unwrap();
            let below = (0..trials)
                .filter(|_| wilson_upper(dist.sample(&mut rng), k, delta).unwrap() < p)
                .count();
            let frac = below as f64 / trials as f64;
            if frac > worst.0 {
                worst = (frac, p, k);
            }
        }
    }
    let exact = exact_miss_probability(worst.1, worst.2, delta);
    Outcome::new(
        worst.0 <= delta + 0.01,
        format!(
            "worst miss rate {} at p={} k={} (exact {}, limit {})",
            pct(worst.0),
            worst.1,
            worst.2,
            pct(exact),
            pct(delta + 0.01)
        ),
    )
}

/// P(wilson_upper(C, k) < p) for C ~ Binomial(k, p), summed in log space.
fn exact_miss_probability(p: f64, k: u64, delta: f64) -> f64 {
    let ln_fact = |n: u64| (1..=n).map(|i| (i as f64).ln()).sum::<f64>();
    (0..=k)
        .filter(|&c| wilson_oracle(c, k, delta) < p)
        .map(|c| {
            let ln = ln_fact(k) - ln_fact(c) - ln_fact(k - c) + c as f64 * p.ln() + (k - c) as f64 * (1.0 - p).ln();
            ln.exp()
        })
        .sum()
}

// ------------------------------------------------------------------ 5

fn wilson_criterion() -> Outcome {
    let mut failures = Vec::new();
    for (c, k, expected) in [(0u64, 100u64, 0.02634), (2, 100, 0.05865)] {
        let u = wilson_upper(c, k, 0.05).unwrap();
        let oracle = wilson_oracle(c, k, 0.05);
        if (u - oracle).abs() > 1e-4 || (u - expected).abs() > 1e-4 {
            failures.push(format!("u({c},{k})={u} oracle {oracle}"));
        }
    }
    for delta in [0.01, 0.05, 0.1, 0.25] {
        for k in 1..=300u64 {
            let mut prev = -1.0;
            for c in 0..=k {
                let u = wilson_upper(c, k, delta).unwrap();
                let p_hat = c as f64 / k as f64;
                if !(0.0..=1.0).contains(&u) || u < p_hat || u < prev || (c == k && u != 1.0) {
                    failures.push(format!("delta={delta} c={c} k={k} u={u}"));
                }
                if (u - wilson_oracle(c, k, delta)).abs() > 1e-9 {
                    failures.push(format!("oracle mismatch delta={delta} c={c} k={k}"));
                }
                prev = u;
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("u(0,100)={:.5} u(2,100)={:.5}", wilson_upper(0, 100, 0.05).unwrap(), wilson_upper(2, 100, 0.05).unwrap())
    } else {
        failures.iter().take(3).cloned().collect::<Vec<_>>().join("; ")
    };
    Outcome::new(failures.is_empty(), detail)
}

// ------------------------------------------------------------------ 6

fn ledger_criterion(fixtures: &[Vec<u8>], replay_mismatches: &[String], replayed: usize) -> Outcome {
    let mut rng = seeded_rng(6);
    let mut missed = Vec::new();
    let flips = 1000;
    for i in 0..flips {
        let original = &fixtures[i % fixtures.len()];
        assert_eq!(verify_bytes(original), ChainStatus::Valid);
        let mut bytes = original.clone();
        let pos = rng.gen_range(0..bytes.len());
        bytes[pos] ^= 1 << rng.gen_range(0..8);
        let line = bytes[..pos].iter().filter(|b| **b == b'\n').count() as u64;
        let status = verify_bytes(&bytes);
        if status != (ChainStatus::Invalid { invalid_at: line }) {
            missed.push(format!("flip at byte {pos}: {status:?}, expected seq {line}"));
        }
    }
    Outcome::new(
        missed.is_empty() && replay_mismatches.is_empty() && replayed > 0,
        format!(
            "{}/{} flips detected at the right seq over {} ledgers; replay identical on {}/{} runs{}",
            flips - missed.len(),
            flips,
            fixtures.len(),
            replayed - replay_mismatches.len(),
            replayed,
            missed.first().map(|m| format!("; first miss: {m}")).unwrap_or_default()
        ),
    )
}

// ------------------------------------------------------------------ 7

fn tradeoff_criterion() -> Outcome {
    let pis = [0.3, 0.5, 0.7, 0.9];
    let taus: Vec<f64> = (1..=20).map(|i| i as f64 / 100.0).collect();
    let points = run_tradeoff(&pis, &taus, &TradeoffConfig::default()).expect("tradeoff");
    let mut problems = Vec::new();
    let mut worst_gap: f64 = 0.0;
    for pi in pis {
        let mut series: Vec<_> = points.iter().filter(|p| p.pi == pi).collect();
        series.sort_by(|a, b| a.tau.total_cmp(&b.tau));
        for w in series.windows(2) {
            if w[1].coverage < w[0].coverage - 1e-12 {
                problems.push(format!("coverage drops at pi={pi} tau={}", w[1].tau));
            }
            if w[1].guarded_disagreement < w[0].guarded_disagreement - 1e-12 {
                problems.push(format!("guarded drops at pi={pi} tau={}", w[1].tau));
            }
        }
        for p in &series {
            if p.guarded_disagreement > p.unguarded_baseline + 1e-12 {
                problems.push(format!("guarded above baseline at pi={pi} tau={}", p.tau));
            }
            worst_gap = worst_gap
                .max((p.coverage - p.mc_coverage).abs())
                .max((p.guarded_disagreement - p.mc_guarded_disagreement).abs());
        }
    }
    if worst_gap > 0.005 {
        problems.push(format!("exact vs Monte Carlo gap {}", pct(worst_gap)));
    }
    Outcome::new(
        problems.is_empty() && points.len() == pis.len() * taus.len(),
        if problems.is_empty() {
            format!("{} grid points monotone; max exact/MC gap {}", points.len(), pct(worst_gap))
        } else {
            problems.iter().take(3).cloned().collect::<Vec<_>>().join("; ")
        },
    )
}

// ------------------------------------------------------------------ 8

const MODERATION_TERMS: [&str; 6] = ["harmful", "misleading", "sensitive", "spam", "benign", "escalate"];

/// Per-term scripted behaviour: (events, A1-neutral count, A2-neutral count, contradictions).
fn script(term: &str, held_out: bool) -> (usize, usize, usize) {
    match (term, held_out) {
        ("benign", false) => (0, 0, 0),
        ("sensitive", false) => (0, 20, 2),
        ("harmful", false) => (0, 0, 14),
        ("misleading", false) => (4, 0, 10),
        ("spam", false) => (0, 6, 9),
        ("escalate", false) => (10, 0, 12),
        ("benign", true) => (10, 0, 1),
        ("sensitive", true) => (0, 13, 1),
        ("escalate", true) => (4, 0, 3),
        (_, true) => (3, 0, 3),
        _ => unreachable!(),
    }
}

fn scripted_tables(audit: &[Event], held_out: &[Event]) -> (VerdictTable, VerdictTable) {
    let mut t1 = VerdictTable::constant("A1", Verdict::Neutral);
    let mut t2 = VerdictTable::constant("A2", Verdict::Neutral);
    for (events, is_held_out) in [(audit, false), (held_out, true)] {
        for term in MODERATION_TERMS {
            let (n1, n2, c) = script(term, is_held_out);
            for (i, ev) in events.iter().enumerate() {
                let pei = ev.pei.as_str();
                let base = if (i * 7 + term.len()) % 3 == 0 { Verdict::Assent } else { Verdict::Dissent };
                let v1 = if i < n1 { Verdict::Neutral } else { base };
                let v2 = if i >= n1 && i < n1 + n2 {
                    Verdict::Neutral
                } else if i >= n1 + n2 && i < n1 + n2 + c {
                    base.inverted()
                } else {
                    base
                };
                t1.set(term, pei, v1);
                t2.set(term, pei, v2);
            }
        }
    }
    (t1, t2)
}

fn adapter_criterion(dir: &Path) -> Outcome {
    let audit: Vec<Event> =
        (0..120).map(|i| Event::new(EventId::new(format!("audit-{i:03}")).unwrap(), format!("scenario {i}"))).collect();
    let held_out: Vec<Event> =
        (0..50).map(|i| Event::new(EventId::new(format!("held-{i:03}")).unwrap(), format!("held-out {i}"))).collect();
    let (t1, t2) = scripted_tables(&audit, &held_out);
    let spawn = |table: VerdictTable| {
        let path = dir.join(format!("{}.table.json", table.agent));
        let agent = table.agent.clone();
        fs::write(&path, serde_json::to_vec(&PolicyFile::Table(table)).unwrap()).unwrap();
        let argv = [env!("CARGO_BIN_EXE_semcert").to_string(), "mock-agent".into(), "--table".into(), path.display().to_string()];
        ExternalProvider::spawn(&agent, &argv, Duration::from_secs(30)).expect("spawn mock agent")
    };
    let (a1, a2) = (spawn(t1), spawn(t2));

    let vocab: Vec<String> = MODERATION_TERMS.iter().map(|t| t.to_string()).collect();
    let params = ProtocolParams::new(0.06, 0.05, 0.10).unwrap();
    let plan = sample_audit_plan(&audit, &vocab, audit.len(), 53).unwrap();
    let mut ledger = Ledger::new();
    let core = certify(&a1, &a2, &plan, &params, &mut ledger, 0).expect("certify");
    let all: BTreeSet<String> = vocab.iter().cloned().collect();
    let unguarded = measure_disagreement(&a1, &a2, &all, &held_out, 0);
    let guarded = unguarded.restricted_to(&core.core);
    let reduction = 1.0 - guarded.rate / unguarded.rate;
    let expected: BTreeSet<String> = ["benign", "sensitive"].iter().map(|s| s.to_string()).collect();
    let ok = core.core == expected
        && core.failed.is_empty()
        && !unguarded.incomplete
        && within(guarded.rate, 0.026, 0.005)
        && within(unguarded.rate, 0.053, 0.005)
        && reduction >= 0.45;
    Outcome::new(
        ok,
        format!(
            "core {:?}; guarded {} ({}/{}) unguarded {} ({}/{}) reduction {:.0}%",
            core.core,
            pct(guarded.rate),
            guarded.contradictions,
            guarded.eligible,
            pct(unguarded.rate),
            unguarded.contradictions,
            unguarded.eligible,
            100.0 * reduction
        ),
    )
}

// ------------------------------------------------------------------ 9

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for (name, bytes) in dir_files(from) {
        fs::write(to.join(name), bytes).unwrap();
    }
}

fn determinism_criterion(dir: &Path) -> Outcome {
    let exe = env!("CARGO_BIN_EXE_semcert");
    let p = |path: &Path| path.display().to_string();
    let data = dir.join("data");
    let cert = dir.join("cert");
    let recert = dir.join("recert");
    let a1 = format!("sim:{}", p(&data.join("A1.json")));
    let a2 = format!("sim:{}", p(&data.join("A2.json")));
    let table = dir.join("A1.table.json");
    let mut t = VerdictTable::constant("T1", Verdict::Assent);
    t.set("red", "x", Verdict::Dissent);
    fs::write(&table, serde_json::to_vec(&PolicyFile::Table(t)).unwrap()).unwrap();
    let cmd_agent = format!("cmd:{exe} mock-agent --table {}", p(&table));

    let s = |x: &str| x.to_string();
    let commands: Vec<(&str, Vec<String>, Option<&Path>)> = vec![
        ("sim gen-events", vec![s("sim"), s("gen-events"), s("--n"), s("1000"), s("--seed"), s("5")], Some(&data)),
        ("sim gen-agents", vec![s("sim"), s("gen-agents"), s("--condition"), s("moderate"), s("--seed"), s("5")], Some(&data)),
        (
            "certify",
            vec![s("certify"), s("--events"), p(&data.join("audit.jsonl")), s("--agents"), a1.clone(), s("--agents"), a2.clone(), s("--seed"), s("2")],
            Some(&cert),
        ),
        (
            "certify via cmd agent",
            vec![s("certify"), s("--events"), p(&data.join("audit.jsonl")), s("--per-term"), s("60"), s("--agents"), cmd_agent, s("--agents"), a2.clone()],
            None,
        ),
        (
            "guard measure",
            vec![s("guard"), s("measure"), s("--core"), p(&cert.join("core.json")), s("--events"), p(&data.join("held_out.jsonl")), s("--agents"), a1.clone(), s("--agents"), a2.clone()],
            None,
        ),
        (
            "recertify",
            vec![
                s("recertify"), s("--ledger"), p(&cert.join("ledger.jsonl")), s("--core"), p(&cert.join("core.json")),
                s("--events"), p(&data.join("held_out.jsonl")), s("--epoch"), s("1"), s("--per-term"), s("150"),
                s("--agents"), a1.clone(), s("--agents"), a2.clone(),
            ],
            Some(&recert),
        ),
        (
            "renegotiate",
            vec![
                s("renegotiate"), s("--term"), s("green"), s("--ledger"), p(&recert.join("ledger.jsonl")),
                s("--core"), p(&recert.join("core.json")), s("--events"), p(&data.join("held_out.jsonl")),
                s("--epoch"), s("2"), s("--per-term"), s("150"), s("--agents"), a1.clone(), s("--agents"), a2.clone(),
            ],
            None,
        ),
        ("ledger verify", vec![s("ledger"), s("verify"), p(&cert.join("ledger.jsonl"))], None),
        ("ledger replay", vec![s("ledger"), s("replay"), p(&cert.join("ledger.jsonl"))], None),
        ("exp static", vec![s("exp"), s("static"), s("--runs"), s("4")], None),
        ("exp timeseries", vec![s("exp"), s("timeseries"), s("--runs"), s("2"), s("--epochs"), s("16")], None),
        ("exp tradeoff", vec![s("exp"), s("tradeoff"), s("--mc"), s("5000")], None),
        ("stats wilson", vec![s("stats"), s("wilson"), s("--c"), s("3"), s("--k"), s("150")], None),
    ];

    let mut differing = Vec::new();
    for (i, (name, args, keep)) in commands.iter().enumerate() {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            // Same relative output path for both runs, so echoed paths match too.
            let cwd = dir.join(format!("run-{i}-{rep}"));
            fs::create_dir_all(&cwd).unwrap();
            let mut argv = args.clone();
            if !(name.starts_with("ledger verify") || name.starts_with("stats")) {
                argv.extend([s("--out"), s("out")]);
            }
            let output =
                Command::new(exe).args(&argv).current_dir(&cwd).env_remove("SEMCERT_OUT").output().unwrap();
            if !output.status.success() {
                differing.push(format!("{name} failed: {}", String::from_utf8_lossy(&output.stderr).trim()));
                break;
            }
            let out_dir = cwd.join("out");
            let files = if out_dir.exists() { dir_files(&out_dir) } else { Vec::new() };
            outputs.push((output.stdout, files));
            if let (0, Some(keep)) = (rep, keep) {
                copy_dir(&out_dir, keep);
            }
        }
        if outputs.len() == 2 && outputs[0] != outputs[1] {
            differing.push(name.to_string());
        }
    }
    Outcome::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} commands rerun with identical outputs", commands.len())
        } else {
            format!("differs: {}", differing.join(", "))
        },
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let statics = static_criteria();
    let results = [
        ("1 static table", statics.table),
        ("2 empty core signal", statics.empty_core),
        ("3 timeseries shape", timeseries_criterion()),
        ("4 soundness Monte Carlo", soundness_criterion()),
        ("5 wilson kernel", wilson_criterion()),
        ("6 ledger verifiability", ledger_criterion(&statics.fixtures, &statics.replay_mismatches, statics.replayed)),
        ("7 trade-off monotonicity", tradeoff_criterion()),
        ("8 adapter replay", adapter_criterion(dir.path())),
        ("9 determinism", determinism_criterion(dir.path())),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        println!("{} criterion {name}: {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
        failed += usize::from(!outcome.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
