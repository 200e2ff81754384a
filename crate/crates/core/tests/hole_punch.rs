mod common;

use dcutr_sim::campaign::PairFixture;
use dcutr_sim::dcutr::{DcutrConfig, OutcomeAttempt, OutcomeResult};
use dcutr_sim::nat::{FilteringBehavior as F, MappingBehavior as M, NatConfig};
use dcutr_sim::strategy::QuicRoles;
use dcutr_sim::{Latency, Transport};
use proptest::prelude::*;

fn cone() -> NatConfig {
    common::port_restricted(false)
}

#[test]
fn public_client_is_reversed_without_attempts() {
    let mut fx = PairFixture::new(cone(), cone());
    fx.client_nat = None;
    let r = fx.run(1, None, &DcutrConfig::default()).unwrap();
    assert_eq!(r.outcome, OutcomeResult::ConnectionReversed);
    assert!(r.attempts.is_empty());
    assert!(r.rtt_direct_after.is_some());
}

#[test]
fn port_mapped_client_is_reversed() {
    let mut fx = PairFixture::new(cone(), cone());
    fx.client_port_mapping = true;
    let r = fx.run(1, Some(Transport::Tcp), &DcutrConfig::default()).unwrap();
    assert_eq!(r.outcome, OutcomeResult::ConnectionReversed);
    assert!(r.port_mapping_active);
}

#[test]
fn no_relay_gives_no_connection() {
    let mut fx = PairFixture::new(cone(), cone());
    fx.relays = 0;
    let r = fx.run(1, None, &DcutrConfig::default()).unwrap();
    assert_eq!(r.outcome, OutcomeResult::NoConnection);
    assert!(r.attempts.is_empty());
}

#[test]
fn cancellation_before_and_between_attempts() {
    let fx = PairFixture::new(cone(), cone());
    let cfg = DcutrConfig { cancel_before_attempt: Some(0), ..DcutrConfig::default() };
    let r = fx.run(1, None, &cfg).unwrap();
    assert_eq!(r.outcome, OutcomeResult::Cancelled);
    assert!(r.attempts.is_empty());

    let sym = NatConfig::with_behavior(M::APDM, F::APDF);
    let fx = PairFixture::new(sym.clone(), sym);
    let cfg = DcutrConfig { cancel_before_attempt: Some(2), ..DcutrConfig::default() };
    let r = fx.run(1, None, &cfg).unwrap();
    let outcomes: Vec<_> = r.attempts.iter().map(|a| a.outcome).collect();
    assert_eq!(outcomes, [OutcomeAttempt::Failed, OutcomeAttempt::Cancelled]);
}

#[test]
fn tight_stream_timeout_gives_no_stream() {
    let fx = PairFixture::new(cone(), cone());
    let cfg = DcutrConfig { stream_timeout_ms: 1.0, ..DcutrConfig::default() };
    let r = fx.run(1, None, &cfg).unwrap();
    assert_eq!(r.outcome, OutcomeResult::NoStream);
}

#[test]
fn attempt_bounds_are_enforced() {
    let fx = PairFixture::new(cone(), cone());
    for n in [0, 4] {
        let cfg = DcutrConfig { max_attempts: n, ..DcutrConfig::default() };
        assert!(fx.run(1, None, &cfg).is_err());
    }
}

#[test]
fn wait_is_half_the_relayed_rtt() {
    let fx = PairFixture::new(cone(), cone());
    let r = fx.run(1, Some(Transport::Tcp), &DcutrConfig::default()).unwrap();
    let a = &r.attempts[0];
    let rtt = a.rtt_relayed.as_ref().unwrap().mean_ms;
    assert_eq!(a.wait_ms, Some(rtt / 2.0));
    // host 20 + relay 10 each way, twice
    assert!((rtt - 120.0).abs() < 1e-9, "{rtt}");
}

fn behaviors() -> impl Strategy<Value = NatConfig> {
    (
        prop::sample::select(vec![M::EIM, M::ADM, M::APDM]),
        prop::sample::select(vec![F::EIF, F::ADF, F::APDF]),
    )
        .prop_map(|(m, f)| NatConfig::with_behavior(m, f))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn sync_margin(
        access_l in 5.0f64..60.0,
        access_i in 5.0f64..60.0,
        offset in 0.2f64..3.0,
        factor in prop_oneof![0.0f64..0.95, 1.05f64..2.0],
        early in any::<bool>(),
    ) {
        let mut fx = PairFixture::new(common::port_restricted(true), common::port_restricted(true));
        fx.client_access = Latency::fixed(access_l);
        fx.remote_access = Latency::fixed(access_i);
        fx.client_nat_offset_ms = offset;
        fx.remote_nat_offset_ms = offset;
        let d = fx.nat_to_nat_ms();
        let sign = if early { -1.0 } else { 1.0 };
        let cfg = DcutrConfig { wait_bias_ms: sign * factor * d, max_attempts: 1, ..DcutrConfig::default() };
        let r = fx.run(3, Some(Transport::Tcp), &cfg).unwrap();
        prop_assert_eq!(r.outcome == OutcomeResult::Success, factor < 1.0, "factor {} d {}", sign * factor, d);
    }

    #[test]
    fn refined_wait_skew(lo in 0.2f64..30.0, io in 0.2f64..30.0, ll in 0.5f64..40.0, il in 0.5f64..40.0) {
        let fx = common::asymmetric_fixture(lo, io, ll, il);
        let (r, skew) = common::run_traced(&fx, &common::single_attempt(true));
        prop_assert_eq!(r.outcome, OutcomeResult::Success);
        let s = skew.expect("both SYNs traced");
        prop_assert!(s.at_listener_nat >= -1e-9 && s.at_initiator_nat >= -1e-9, "{:?}", s);
    }

    #[test]
    fn alternation_covers_both_role_assignments(client in behaviors(), remote in behaviors()) {
        let fx = PairFixture::new(client, remote);
        let run = |alt: bool, roles: QuicRoles, attempts: u8| {
            let mut cfg = DcutrConfig { max_attempts: attempts, ..DcutrConfig::default() };
            cfg.strategies.role_alternation = alt;
            cfg.strategies.quic_roles = roles;
            fx.run(5, Some(Transport::Quic), &cfg).unwrap().outcome == OutcomeResult::Success
        };
        let base = run(false, QuicRoles::Base, 1);
        let swapped = run(false, QuicRoles::Swapped, 1);
        let alt = run(true, QuicRoles::Base, 2);
        prop_assert_eq!(alt, base || swapped, "base {} swapped {}", base, swapped);
    }
}
