//! Hand-computed analysis fixtures, shared by the acceptance suite and the
//! analysis tests. Each check returns a short description or the first mismatch.

#![allow(dead_code)]

use chrono::{DateTime, Utc};
use dcutr_sim::analysis::{self, NetworkKey, NetworkLabel, SeriesOptions};
use dcutr_sim::dcutr::OutcomeResult;
use dcutr_sim::record::RawRecord;
use dcutr_sim::transport::RttStats;

const DAY: i64 = 86_400;

pub fn ts(secs: i64) -> DateTime<Utc> {
    DateTime::from_timestamp(1_669_852_800 + secs, 0).unwrap()
}

pub fn rec(client: &str, secs: i64, ips: &[&str], private: &[&str], asn: u32, outcome: OutcomeResult) -> RawRecord {
    RawRecord {
        trial: 0,
        client_id: client.to_owned(),
        remote_id: "R".to_owned(),
        timestamp: ts(secs),
        public_addrs: ips.iter().map(|ip| format!("/ip4/{ip}/tcp/4001")).collect(),
        private_addrs: private.iter().map(|a| format!("/ip4/{a}/tcp/4001")).collect(),
        asn,
        client_nat: "port-restricted".to_owned(),
        remote_nat: "port-restricted".to_owned(),
        outcome,
        attempts: Vec::new(),
        protocol_filter: None,
        transport_used: None,
        port_mapping_active: false,
        relay_addrs: Vec::new(),
        direct_addrs: Vec::new(),
        rtt_to_relay: None,
        rtt_relayed: None,
        rtt_direct: None,
        duration_ms: 0.0,
    }
}

fn stats(mean: f64, sd: f64) -> Option<RttStats> {
    Some(RttStats { mean_ms: mean, stddev_ms: sd, samples: 10 })
}

fn expect<T: PartialEq + std::fmt::Debug>(what: &str, got: T, want: T) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{what}: got {got:?}, want {want:?}"))
    }
}

fn net(client: &str, index: u32) -> NetworkLabel {
    NetworkLabel::Network(NetworkKey { client_id: client.to_owned(), index })
}

use OutcomeResult::{Failed as F, NoStream, Success as S};

pub fn check_identify_networks() -> Result<String, String> {
    let records = vec![
        rec("A", 2, &["3.3.3.3"], &["10.0.0.5"], 2, S),
        rec("A", 0, &["1.1.1.1"], &["192.168.1.2"], 1, S),
        rec("A", 1, &["2.2.2.2"], &["192.168.1.2"], 1, S),
        rec("A", 3, &["3.3.3.3", "1.1.1.1"], &[], 1, S),
        rec("A", 4, &[], &["192.168.1.2"], 1, S),
        rec("A", 5, &["4.4.4.4"], &[], 1, S),
        rec("B", 0, &["1.1.1.1"], &["192.168.1.2"], 1, S),
        rec("A", 6, &["5.5.5.5"], &["192.168.1.2"], 3, S),
        rec("A", 7, &["2.2.2.2"], &[], 1, F),
        rec("A", 8, &["4.4.4.4", "4.4.4.4"], &[], 9, F),
    ];
    let want = vec![
        net("A", 1),
        net("A", 0),
        net("A", 0),
        NetworkLabel::MultiNetwork,
        NetworkLabel::ZeroPublic,
        net("A", 2),
        net("B", 0),
        net("A", 3),
        net("A", 0),
        net("A", 2),
    ];
    expect("labels", analysis::identify_networks(&records), want)?;
    Ok("10 records, 5 networks, multi-network and zero-public labelled".into())
}

fn close(what: &str, got: f64, want: f64) -> Result<(), String> {
    if (got - want).abs() <= 1e-12 {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, want {want}"))
    }
}

pub fn check_success_rate_series() -> Result<String, String> {
    // constant 0.7 over two days
    let mut a = Vec::new();
    for day in 0..2 {
        for i in 0..10 {
            a.push(rec("C", day * DAY + i * 60, &["7.7.7.7"], &[], 1, if i < 7 { S } else { F }));
        }
    }
    let labels = analysis::identify_networks(&a);
    let opts = SeriesOptions { window_secs: DAY, min_per_client: 10, weighted: false };
    let s = analysis::success_rate_series(&a, &labels, &opts).map_err(|e| e.to_string())?;
    expect("constant points", s.points.iter().map(|p| (p.x, p.n, p.successes)).collect::<Vec<_>>(), vec![(0.0, 10, 7), (1.0, 10, 7)])?;
    close("constant slope", s.slope_per_window, 0.0)?;
    close("constant intercept", s.intercept, 0.7)?;
    close("constant mean", s.mean_rate, 0.7)?;
    close("constant sd", s.stddev_points, 0.0)?;

    // client D has 5 counted records, under the threshold of 10
    let mut b: Vec<RawRecord> = a[..15].to_vec();
    for i in 0..5 {
        b.push(rec("D", i * 60, &["8.8.8.8"], &[], 1, F));
    }
    let labels = analysis::identify_networks(&b);
    let s = analysis::success_rate_series(&b, &labels, &opts).map_err(|e| e.to_string())?;
    expect("threshold networks", s.n_networks, 1)?;
    expect("threshold records", s.n_records, 15)?;
    expect("threshold rates", s.points.iter().map(|p| (p.n, p.successes)).collect::<Vec<_>>(), vec![(10, 7), (5, 5)])?;

    // three networks on three days, rates 1, 0.5, 0
    let mut mapped = rec("E", 2 * DAY + 9, &["9.0.0.3"], &[], 1, S);
    mapped.port_mapping_active = true;
    let c = vec![
        rec("E", 10, &["9.0.0.1"], &[], 1, S),
        rec("E", 20, &["9.0.0.1"], &[], 1, S),
        rec("E", DAY + 10, &["9.0.0.2"], &[], 1, S),
        rec("E", DAY + 20, &["9.0.0.2"], &[], 1, F),
        rec("E", DAY + 30, &["9.0.0.1", "9.0.0.2"], &[], 1, S),
        rec("E", 2 * DAY + 10, &["9.0.0.3"], &[], 1, F),
        rec("E", 2 * DAY + 20, &["9.0.0.3"], &[], 1, F),
        rec("E", 2 * DAY + 30, &["9.0.0.3"], &[], 1, NoStream),
        mapped,
    ];
    let labels = analysis::identify_networks(&c);
    let opts = SeriesOptions { min_per_client: 0, ..opts };
    let s = analysis::success_rate_series(&c, &labels, &opts).map_err(|e| e.to_string())?;
    expect("three networks", s.n_networks, 3)?;
    expect("three records", s.n_records, 6)?;
    expect("three rates", s.points.iter().map(|p| (p.x, p.rate)).collect::<Vec<_>>(), vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.0)])?;
    close("three slope", s.slope_per_window, -0.5)?;
    close("three intercept", s.intercept, 1.0)?;
    close("three sd", s.stddev_points, 0.5)?;
    close("three residual sd", s.stddev_residuals, 0.0)?;
    Ok("constant 0.7, threshold exclusion and 3-network trend (slope -0.5)".into())
}

fn with_rtt(outcome: OutcomeResult, to_relay: Option<f64>, relayed: Option<f64>) -> RawRecord {
    let mut r = rec("P", 0, &["6.6.6.6"], &[], 1, outcome);
    r.rtt_to_relay = to_relay.and_then(|m| stats(m, 1.0));
    r.rtt_relayed = relayed.and_then(|m| stats(m, 1.0));
    r
}

pub fn check_relay_path_location() -> Result<String, String> {
    let mut mapped = with_rtt(S, Some(100.0), Some(1000.0));
    mapped.port_mapping_active = true;
    let records = vec![
        with_rtt(S, Some(700.0), Some(1000.0)),
        with_rtt(F, Some(680.0), Some(1000.0)),
        with_rtt(S, Some(700.0001), Some(1000.0)),
        with_rtt(S, Some(50.0), Some(1000.0)),
        with_rtt(F, Some(0.0), Some(1000.0)),
        with_rtt(S, Some(1200.0), Some(1000.0)),
        with_rtt(S, Some(10.0), Some(0.0)),
        with_rtt(S, None, Some(10.0)),
        with_rtt(NoStream, Some(700.0), Some(1000.0)),
        mapped,
    ];
    let rep = analysis::relay_path_location(&records, 0.05).map_err(|e| e.to_string())?;
    expect("bins", rep.bins.len(), 20)?;
    expect("bin 13 edges", (rep.bins[13].lo, rep.bins[13].hi), (0.65, 0.7))?;
    let filled: Vec<(usize, u64, u64)> =
        rep.bins.iter().enumerate().filter(|(_, b)| b.n > 0).map(|(i, b)| (i, b.n, b.successes)).collect();
    expect("filled bins", filled, vec![(0, 2, 1), (13, 2, 1), (14, 1, 1), (19, 1, 1)])?;
    expect("bin 13 rate", rep.bins[13].rate, Some(0.5))?;
    expect("skipped", (rep.skipped_zero_relayed, rep.skipped_missing_rtt), (1, 1))?;
    Ok("700/1000 lands in bin 13 (0.65, 0.70], clipping and skips exact".into())
}

pub fn check_rtt_accuracy() -> Result<String, String> {
    let mut records = Vec::new();
    for (to, via, direct) in [
        (RttStats::from_samples(&[10.0, 20.0, 30.0]), RttStats::from_samples(&[100.0, 100.0]), None),
        (RttStats::from_samples(&[4.0, 8.0]), RttStats::from_samples(&[0.0, 0.0]), RttStats::from_samples(&[50.0, 60.0, 70.0])),
        (None, RttStats::from_samples(&[1.0, 3.0]), RttStats::from_samples(&[5.0])),
    ] {
        let mut r = rec("Q", 0, &["6.6.6.6"], &[], 1, S);
        r.rtt_to_relay = to;
        r.rtt_relayed = via;
        r.rtt_direct = direct;
        records.push(r);
    }
    let acc = analysis::rtt_accuracy(&records);
    let sqrt8 = 8f64.sqrt();
    expect("to_relay", acc.to_relay.values.clone(), vec![sqrt8 / 6.0, 0.5])?;
    expect("via_relay", (acc.via_relay.values.clone(), acc.via_relay.skipped), (vec![0.0, 2f64.sqrt() / 2.0], 1))?;
    expect("direct_after", acc.direct_after.values.clone(), vec![0.0, 10.0 / 60.0])?;
    expect("cdf at 0.5", acc.to_relay.at(0.5), Some(1.0))?;
    expect("cdf at 0.48", acc.to_relay.at(0.48), Some(0.5))?;
    Ok("stddev/mean per RTT class, zero means skipped".into())
}

pub fn check_latency_ratio_cdf() -> Result<String, String> {
    let mut records = Vec::new();
    for (outcome, direct, relayed) in [
        (S, Some(50.0), 100.0),
        (S, Some(120.0), 100.0),
        (S, Some(30.0), 100.0),
        (S, Some(80.0), 100.0),
        (F, Some(10.0), 100.0),
        (S, None, 100.0),
        (S, Some(10.0), 0.0),
    ] {
        let mut r = rec("L", 0, &["6.6.6.6"], &[], 1, outcome);
        r.rtt_direct = direct.and_then(|m| stats(m, 0.0));
        r.rtt_relayed = stats(relayed, 0.0);
        records.push(r);
    }
    let rep = analysis::latency_ratio_cdf(&records);
    expect("values", rep.cdf.values.clone(), vec![0.3, 0.5, 0.8, 1.2])?;
    expect("median", rep.median, Some(0.5))?;
    expect("above one", rep.frac_above_one, Some(0.25))?;
    expect("cdf at 0.8", rep.cdf.at(0.8), Some(0.75))?;
    expect("points", rep.cdf.points(), vec![(0.3, 0.25), (0.5, 0.5), (0.8, 0.75), (1.2, 1.0)])?;
    Ok("ratios 0.3/0.5/0.8/1.2, median 0.5, 25% above one".into())
}

pub type Check = fn() -> Result<String, String>;

pub const ANALYSIS_CHECKS: [(&str, Check); 5] = [
    ("identify_networks", check_identify_networks),
    ("success_rate_series", check_success_rate_series),
    ("relay_path_location", check_relay_path_location),
    ("rtt_accuracy", check_rtt_accuracy),
    ("latency_ratio_cdf", check_latency_ratio_cdf),
];

use dcutr_sim::campaign::PairFixture;
use dcutr_sim::dcutr::{DcutrConfig, HolePunchResult};
use dcutr_sim::nat::{Archetype, NatConfig};
use dcutr_sim::transport::PacketKind;
use dcutr_sim::world::TraceEvent;
use dcutr_sim::{Latency, Transport};

pub fn port_restricted(rst: bool) -> NatConfig {
    NatConfig { rst_on_unsolicited_tcp: rst, ..NatConfig::for_archetype(Archetype::PortRestrictedCone) }
}

/// Jitter-free asymmetric pair. Offsets are one-way host-to-NAT latencies,
/// `legs` the NAT-to-core latencies beyond them.
pub fn asymmetric_fixture(listener_offset: f64, initiator_offset: f64, listener_leg: f64, initiator_leg: f64) -> PairFixture {
    let mut fx = PairFixture::new(port_restricted(true), port_restricted(true));
    fx.client_nat_offset_ms = listener_offset;
    fx.remote_nat_offset_ms = initiator_offset;
    fx.client_access = Latency::fixed(listener_offset + listener_leg);
    fx.remote_access = Latency::fixed(initiator_offset + initiator_leg);
    fx
}

pub fn single_attempt(refined: bool) -> DcutrConfig {
    let mut cfg = DcutrConfig { max_attempts: 1, ..DcutrConfig::default() };
    cfg.strategies.refined_wait = refined;
    cfg
}

/// Arrival skew of the first punch SYNs: how long after each NAT
/// translated its own SYN the peer's SYN reached it. Both must be >= 0
/// for the crossing SYNs to be admitted.
#[derive(Debug, Clone, Copy)]
pub struct Skew {
    pub at_listener_nat: f64,
    pub at_initiator_nat: f64,
}

pub fn run_traced(fx: &PairFixture, cfg: &DcutrConfig) -> (HolePunchResult, Option<Skew>) {
    let (mut w, relays) = fx.build(7).expect("fixture builds");
    w.enable_trace();
    let r = w
        .run_hole_punch(PairFixture::CLIENT, PairFixture::REMOTE_ID, &relays, Some(Transport::Tcp), cfg)
        .expect("hole punch runs");
    let (l_nat, i_nat) = (PairFixture::CLIENT_NAT, PairFixture::REMOTE_NAT);
    let translated = |nat, peer| {
        w.trace().iter().find_map(|e| match &e.event {
            TraceEvent::Translated { nat: n, dst, kind: PacketKind::TcpSyn, .. } if *n == nat && dst.host == peer => Some(e.at.as_ms()),
            _ => None,
        })
    };
    let arrived = |nat, peer| {
        w.trace().iter().find_map(|e| match &e.event {
            TraceEvent::ArrivedAtNat { nat: n, src, kind: PacketKind::TcpSyn, .. } if *n == nat && src.host == peer => Some(e.at.as_ms()),
            _ => None,
        })
    };
    let skew = (|| {
        Some(Skew {
            at_listener_nat: arrived(l_nat, i_nat)? - translated(l_nat, i_nat)?,
            at_initiator_nat: arrived(i_nat, l_nat)? - translated(i_nat, l_nat)?,
        })
    })();
    (r, skew)
}
