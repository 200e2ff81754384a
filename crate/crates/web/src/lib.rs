//! Browser bindings for the demo page. Every function returns a JSON string;
//! errors come back as `{"error": "..."}`.

use dcutr_sim::campaign::{self, FilterPolicy, PairFixture};
use dcutr_sim::dcutr::DcutrConfig;
use dcutr_sim::nat::{Archetype, NatConfig};
use dcutr_sim::strategy::{self, BirthdayPlan, Scenario};
use dcutr_sim::{CampaignConfig, Latency, Transport};
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn respond<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| json!({ "error": e.to_string() }).to_string()),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

#[derive(Serialize)]
struct CurvePoint {
    k: u32,
    mixed: f64,
    both_edm: f64,
}

/// Success probability against the number of probes `k`, for `m` open ports.
#[wasm_bindgen]
pub fn birthday_curve(m: u32, k_max: u32, steps: u32, port_space: u32) -> String {
    respond((|| {
        if steps == 0 || k_max == 0 {
            return Err("k_max and steps must be positive".to_owned());
        }
        let mut ks: Vec<u32> = (1..=steps).map(|i| ((u64::from(k_max) * u64::from(i)) / u64::from(steps)).max(1) as u32).collect();
        ks.dedup();
        ks.into_iter()
            .map(|k| {
                let p = |sc| {
                    BirthdayPlan::new(m, k, port_space, sc)
                        .and_then(|plan| strategy::birthday_probability(&plan))
                        .map_err(|e| e.to_string())
                };
                Ok(CurvePoint { k, mixed: p(Scenario::EdmVsEim)?, both_edm: p(Scenario::EdmVsEdm)? })
            })
            .collect::<Result<Vec<_>, String>>()
    })())
}

#[derive(Serialize)]
struct MarginPoint {
    factor: f64,
    wait_error_ms: f64,
    outcome: String,
}

#[derive(Serialize)]
struct MarginSweep {
    nat_to_nat_ms: f64,
    points: Vec<MarginPoint>,
}

/// Single TCP punch between two port-restricted NATs on a jitter-free
/// topology, with the initiator's wait off by `factor` times the NAT-to-NAT
/// latency for each factor in `[-max_factor, max_factor]`.
#[wasm_bindgen]
pub fn sync_margin_sweep(access_ms: f64, nat_offset_ms: f64, max_factor: f64, steps: u32, rst: bool) -> String {
    respond((|| {
        if !(access_ms > nat_offset_ms && nat_offset_ms > 0.0) {
            return Err("need access_ms > nat_offset_ms > 0".to_owned());
        }
        if steps == 0 || !(max_factor > 0.0) {
            return Err("need steps > 0 and max_factor > 0".to_owned());
        }
        let nat = NatConfig { rst_on_unsolicited_tcp: rst, ..NatConfig::for_archetype(Archetype::PortRestrictedCone) };
        let mut fx = PairFixture::new(nat.clone(), nat);
        fx.client_access = Latency::fixed(access_ms);
        fx.remote_access = Latency::fixed(access_ms);
        fx.client_nat_offset_ms = nat_offset_ms;
        fx.remote_nat_offset_ms = nat_offset_ms;
        let d = fx.nat_to_nat_ms();
        let mut points = Vec::new();
        for i in 0..=2 * steps {
            let factor = -max_factor + max_factor * f64::from(i) / f64::from(steps);
            let cfg = DcutrConfig { wait_bias_ms: factor * d, max_attempts: 1, ..DcutrConfig::default() };
            let r = fx.run(1, Some(Transport::Tcp), &cfg).map_err(|e| e.to_string())?;
            points.push(MarginPoint { factor, wait_error_ms: factor * d, outcome: r.outcome.to_string() });
        }
        Ok(MarginSweep { nat_to_nat_ms: d, points })
    })())
}

/// Small campaign over the default population. `filter` is one of
/// `none`, `random`, `tcp`, `quic`.
#[wasm_bindgen]
pub fn mini_campaign(trials: u32, seed: u64, edm_share: f64, filter: &str, refined_wait: bool, role_alternation: bool) -> String {
    respond((|| {
        let filter = match filter {
            "none" => FilterPolicy::None,
            "random" => FilterPolicy::Random,
            "tcp" => FilterPolicy::Tcp,
            "quic" => FilterPolicy::Quic,
            other => return Err(format!("unknown filter {other:?}")),
        };
        let mut cfg = CampaignConfig { seed, trials: u64::from(trials.clamp(1, 5000)), ..CampaignConfig::default() };
        cfg.population.n_clients = 60;
        cfg.population.n_remotes = 60;
        cfg.population.edm_share = Some(edm_share);
        cfg.policy.transport_filter = filter;
        cfg.policy.parallel = false;
        cfg.dcutr.strategies.refined_wait = refined_wait;
        cfg.dcutr.strategies.role_alternation = role_alternation;
        cfg.validate().map_err(|e| e.to_string())?;
        let out = campaign::execute(&cfg).map_err(|e| e.to_string())?;
        let m = out.report.metrics;
        Ok(json!({
            "trials": m.n_results,
            "success_rate": m.success.rate,
            "outcomes": m.outcomes,
            "attempt_histogram": m.attempt_histogram,
            "first_attempt_share": m.first_attempt_share,
            "transport_used": m.transport_used,
            "rtt_ratio_median": m.rtt_ratio_median,
        }))
    })())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: String) -> Value {
        serde_json::from_str(&s).unwrap()
    }

    #[test]
    fn curve_is_monotone_and_matches_oracle() {
        let v = parse(birthday_curve(256, 2048, 8, 65_536));
        let pts = v.as_array().unwrap();
        assert_eq!(pts.len(), 8);
        let mixed: Vec<f64> = pts.iter().map(|p| p["mixed"].as_f64().unwrap()).collect();
        assert!(mixed.windows(2).all(|w| w[0] <= w[1]));
        assert!((mixed[0] - 0.6335585234659708).abs() < 1e-12);
        assert!(pts[7]["both_edm"].as_f64().unwrap() < 1.4e-4);
        assert!(parse(birthday_curve(0, 10, 2, 16))["error"].is_string());
    }

    #[test]
    fn sweep_splits_at_one() {
        let v = parse(sync_margin_sweep(20.0, 2.0, 1.5, 3, true));
        assert_eq!(v["nat_to_nat_ms"], 36.0);
        for p in v["points"].as_array().unwrap() {
            let f = p["factor"].as_f64().unwrap();
            let ok = p["outcome"] == "SUCCESS";
            assert_eq!(ok, f.abs() < 1.0, "{p}");
        }
        assert!(parse(sync_margin_sweep(1.0, 2.0, 1.0, 2, true))["error"].is_string());
    }

    #[test]
    fn campaign_summary() {
        let v = parse(mini_campaign(100, 3, 0.11, "random", false, false));
        assert_eq!(v["trials"], 100);
        let rate = v["success_rate"].as_f64().unwrap();
        assert!((0.5..=1.0).contains(&rate));
        assert!(parse(mini_campaign(10, 1, 0.11, "udp", false, false))["error"].is_string());
        assert!(parse(mini_campaign(10, 1, 1.5, "none", false, false))["error"].is_string());
    }
}
