//! Acceptance suite. Prints one PASS/FAIL line per criterion; run with
//! `cargo test -p dcutr-sim --test acceptance -- --nocapture`.

mod common;

use std::time::Instant;

use dcutr_sim::analysis;
use dcutr_sim::campaign::{self, FilterPolicy, NatMix, PairFixture};
use dcutr_sim::dcutr::{DcutrConfig, OutcomeAttempt, OutcomeResult};
use dcutr_sim::nat::{FilteringBehavior as F, MappingBehavior as M, NatConfig};
use dcutr_sim::record;
use dcutr_sim::strategy::{self, BirthdayPlan, Scenario};
use dcutr_sim::{CampaignConfig, Transport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn prob(m: u32, k: u32, sc: Scenario) -> f64 {
    strategy::birthday_probability(&BirthdayPlan::new(m, k, 65_536, sc).unwrap()).unwrap()
}

fn c1_oracle() -> Outcome {
    let a = prob(256, 256, Scenario::EdmVsEim);
    let b = prob(256, 2048, Scenario::EdmVsEim);
    let c = prob(256, 2048, Scenario::EdmVsEdm);
    let msg = format!("mixed(256,256)={a:.4} mixed(256,2048)={b:.5} both(256,2048)={c:.3e}");
    if (0.62..=0.65).contains(&a) && b >= 0.999 && (1.0e-4..=1.4e-4).contains(&c) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c2_monte_carlo() -> Outcome {
    let plan = BirthdayPlan::new(256, 256, 65_536, Scenario::EdmVsEim).unwrap();
    let est = strategy::birthday_monte_carlo(&plan, 20_000, 2024).map_err(|e| e.to_string())?;
    let diff = (est.rate - est.oracle).abs();
    let msg = format!("{} / 20000 = {:.4}, oracle {:.4}, |diff| {:.2} pp", est.successes, est.rate, est.oracle, diff * 100.0);
    if diff <= 0.02 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c3_expected_gain() -> Outcome {
    let g = strategy::expected_gain(0.11, 0.64).map_err(|e| e.to_string())?;
    let (mixed, both) = strategy::edm_pair_shares(0.11).map_err(|e| e.to_string())?;
    let pct = |x: f64| (x * 1000.0).round() / 10.0;
    let msg = format!("gain {g:.6}, shares {:.1}% / {:.1}%", pct(mixed), pct(both));
    if (0.124..=0.126).contains(&g) && pct(mixed) == 19.6 && pct(both) == 1.2 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c4_first_attempt() -> Outcome {
    let mut cfg = CampaignConfig { seed: 4, trials: 10_000, ..CampaignConfig::default() };
    cfg.population.nat_mix = NatMix::ONLY_CONE;
    cfg.population.remote_nat_mix = NatMix::ONLY_CONE;
    // jitter_ratio is the per-hop ratio; 2.5 puts the realized via-relay
    // stddev/mean median at about 0.5
    cfg.latency.jitter_ratio = 2.5;
    let out = campaign::execute(&cfg).map_err(|e| e.to_string())?;
    let m = &out.report.metrics;
    let acc = analysis::rtt_accuracy(&out.results.records);
    let realized = acc.via_relay.quantile(0.5).unwrap_or(f64::NAN);
    let share = m.first_attempt_share.unwrap_or(0.0);
    let msg = format!(
        "first-attempt share {:.4} of {} successes, realized via-relay stddev/mean median {:.3}",
        share, m.success.successes, realized
    );
    if share >= 0.95 && realized >= 0.5 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c5_transport() -> Outcome {
    let run = |t| {
        let mut cfg = CampaignConfig { seed: 5, trials: 10_000, ..CampaignConfig::default() };
        cfg.policy.transport_filter = t;
        campaign::execute(&cfg).map(|o| o.report.metrics.success.rate.unwrap_or(0.0))
    };
    let tcp = run(FilterPolicy::Tcp).map_err(|e| e.to_string())?;
    let quic = run(FilterPolicy::Quic).map_err(|e| e.to_string())?;
    let msg = format!("TCP {tcp:.4} vs QUIC {quic:.4}, gap {:.2} pp", (tcp - quic).abs() * 100.0);
    if (tcp - quic).abs() <= 0.02 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c6_sync_margin() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for rst in [false, true] {
        let fx = PairFixture::new(common::port_restricted(rst), common::port_restricted(rst));
        let d = fx.nat_to_nat_ms();
        for factor in [0.0, 0.5, 0.9, 1.1, 1.5] {
            for sign in [1.0, -1.0] {
                let cfg = DcutrConfig { wait_bias_ms: sign * factor * d, max_attempts: 1, ..DcutrConfig::default() };
                let r = fx.run(1, Some(Transport::Tcp), &cfg).map_err(|e| e.to_string())?;
                let success = r.outcome == OutcomeResult::Success;
                let expected = if factor < 1.0 { Some(true) } else if rst { Some(false) } else { None };
                if expected.is_some_and(|e| e != success) {
                    ok = false;
                    lines.push(format!("rst={rst} factor={}: {}", sign * factor, r.outcome));
                }
            }
        }
    }
    if ok {
        Ok("errors of +-0, 0.5, 0.9 x NAT-to-NAT succeed; +-1.1, 1.5 x fail with RST".into())
    } else {
        Err(lines.join("; "))
    }
}

fn c7_refined_wait() -> Outcome {
    // listener NAT RTT 40 ms, initiator NAT RTT 10 ms, NAT-to-NAT margin 10 ms
    let fx = common::asymmetric_fixture(20.0, 5.0, 5.0, 5.0);
    let margin = fx.nat_to_nat_ms();
    let (base, _) = common::run_traced(&fx, &common::single_attempt(false));
    let (refined, _) = common::run_traced(&fx, &common::single_attempt(true));
    let fixture_ok = margin < 15.0 && base.outcome == OutcomeResult::Failed && refined.outcome == OutcomeResult::Success;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..1000 {
        let fx = common::asymmetric_fixture(
            rng.random_range(0.2..30.0),
            rng.random_range(0.2..30.0),
            rng.random_range(0.5..40.0),
            rng.random_range(0.5..40.0),
        );
        let (r, skew) = common::run_traced(&fx, &common::single_attempt(true));
        match skew {
            Some(s) if r.outcome == OutcomeResult::Success => {
                let m = s.at_listener_nat.min(s.at_initiator_nat);
                worst = worst.min(m);
                if m < -1e-9 {
                    violations += 1;
                }
            }
            _ => violations += 1,
        }
    }
    let msg = format!(
        "fixture margin {margin} ms: baseline {} / refined {}; 1000 random topologies: {violations} skew violations, min skew {worst:.3} ms",
        base.outcome, refined.outcome
    );
    if fixture_ok && violations == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c8_reversal() -> Outcome {
    let mut cfg = CampaignConfig { seed: 8, trials: 10_000, ..CampaignConfig::default() };
    cfg.population.port_mapping_prevalence = 0.3;
    let out = campaign::execute(&cfg).map_err(|e| e.to_string())?;
    let m = &out.report.metrics;
    let mapped = m.reversed_mapped.rate.unwrap_or(0.0);
    let unmapped = m.reversed_unmapped.rate.unwrap_or(0.0);
    let with_attempts = out
        .results
        .records
        .iter()
        .filter(|r| r.outcome == OutcomeResult::ConnectionReversed && !r.attempts.is_empty())
        .count();
    let msg = format!(
        "reversed share mapped {mapped:.4} (n={}) vs unmapped {unmapped:.4} (n={}), {with_attempts} reversed results with attempts",
        m.reversed_mapped.n, m.reversed_unmapped.n
    );
    if mapped >= 10.0 * unmapped && mapped > 0.0 && with_attempts == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c9_alternation() -> Outcome {
    let fx = PairFixture::new(NatConfig::with_behavior(M::EIM, F::ADF), NatConfig::with_behavior(M::APDM, F::APDF));
    let run = |alt| {
        let mut cfg = DcutrConfig::default();
        cfg.strategies.role_alternation = alt;
        fx.run(1, Some(Transport::Quic), &cfg).map(|r| r.attempts.iter().map(|a| a.outcome).collect::<Vec<_>>())
    };
    let on = run(true).map_err(|e| e.to_string())?;
    let off = run(false).map_err(|e| e.to_string())?;
    let msg = format!("alternation on {on:?}, off {off:?}");
    if on == [OutcomeAttempt::Failed, OutcomeAttempt::Success] && off == [OutcomeAttempt::Failed; 3] {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c10_analysis() -> Outcome {
    for (name, check) in common::ANALYSIS_CHECKS {
        check().map_err(|e| format!("{name}: {e}"))?;
    }
    let cfg = CampaignConfig { seed: 10, trials: 400, ..CampaignConfig::default() };
    let out = campaign::execute(&cfg).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for ext in ["json", "csv"] {
        let path = dir.path().join(format!("results.{ext}"));
        campaign::export_results(&out.results, &path).map_err(|e| e.to_string())?;
        let back = analysis::ingest(&path).map_err(|e| e.to_string())?;
        let opts = analysis::AnalyzeOptions { min_per_client: cfg.policy.min_per_client, ..Default::default() };
        let report = analysis::analyze(&back, &opts).map_err(|e| e.to_string())?;
        let a = serde_json::to_string(&report.aggregates).unwrap();
        let b = serde_json::to_string(&out.report.metrics).unwrap();
        if back != out.results || a != b {
            return Err(format!("{ext} round trip differs"));
        }
    }
    Ok("5 hand fixtures exact; export -> analyze identical via JSON and CSV".into())
}

fn c11_determinism() -> Outcome {
    let bytes = |parallel: bool| -> Result<(Vec<u8>, Vec<u8>), String> {
        let mut cfg = CampaignConfig { seed: 11, trials: 2_000, ..CampaignConfig::default() };
        cfg.policy.parallel = parallel;
        cfg.policy.transport_filter = FilterPolicy::Random;
        let out = campaign::execute(&cfg).map_err(|e| e.to_string())?;
        let (mut j, mut c) = (Vec::new(), Vec::new());
        record::write_json(&out.results, &mut j).map_err(|e| e.to_string())?;
        record::write_csv(&out.results, &mut c).map_err(|e| e.to_string())?;
        Ok((j, c))
    };
    let a = bytes(true)?;
    let b = bytes(true)?;
    let c = bytes(false)?;
    if a == b && a == c {
        Ok(format!("3 runs of 2000 trials byte-identical ({} JSON bytes), serial and parallel", a.0.len()))
    } else {
        Err("results differ between runs".into())
    }
}

fn c12_disclaimers() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md");
    let text = std::fs::read_to_string(path).map_err(|e| format!("README: {e}"))?;
    let missing: Vec<&str> =
        ["70%", "97.6%", "80%", "90%", "not reproducible"].into_iter().filter(|s| !text.contains(s)).collect();
    if missing.is_empty() {
        Ok("README states the field figures are not reproducible".into())
    } else {
        Err(format!("README lacks {missing:?}"))
    }
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 12] = [
        ("birthday oracle", c1_oracle),
        ("monte carlo vs oracle", c2_monte_carlo),
        ("expected gain", c3_expected_gain),
        ("first-attempt dominance", c4_first_attempt),
        ("transport agnosticism", c5_transport),
        ("sync margin", c6_sync_margin),
        ("refined wait", c7_refined_wait),
        ("connection reversal", c8_reversal),
        ("role alternation", c9_alternation),
        ("analysis fixtures", c10_analysis),
        ("determinism", c11_determinism),
        ("field-scale disclaimers", c12_disclaimers),
    ];
    let results: Vec<(Outcome, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|(_, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    let r = f();
                    (r, t.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| (Err("panicked".into()), 0.0))).collect()
    });
    let mut failed = Vec::new();
    for (i, ((name, _), (r, secs))) in criteria.iter().zip(&results).enumerate() {
        let (tag, msg) = match r {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed.push(i + 1);
                ("FAIL", m)
            }
        };
        println!("[{tag}] criterion {:>2} {name}: {msg} ({secs:.1} s)", i + 1);
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
