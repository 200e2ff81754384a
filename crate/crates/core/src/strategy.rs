//! Optional hole-punching strategies: birthday-paradox port probing against
//! endpoint-dependent NATs, the asymmetric wait time, role alternation across
//! attempts, and low-TTL NAT priming.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dcutr::Role;
use crate::nat::Endpoint;
use crate::sim::{HostId, SimTime};
use crate::transport::{self, ConnEvent, ConnEventKind, Packet, PacketKind, Tag, Transport};
use crate::world::{Ctx, PeerStack, Timer, World, WorldError};

pub const PORT_SPACE: u32 = 65_536;
pub const PROBE_SPREAD_MS: f64 = 500.0;
pub const PRIME_INTERVAL_MS: f64 = 10.0;
pub const SAFE_PRIMING_TTL: u8 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("priming ttl {ttl} would reach the remote NAT ({hops} hops away)")]
    TtlTooHigh { ttl: u8, hops: u8 },
    #[error("priming ttl must be >= 1")]
    ZeroTtl,
    #[error("invalid birthday plan: {0}")]
    InvalidPlan(String),
    #[error("probability inputs must lie in [0, 1]")]
    ProbabilityRange,
    #[error("wait-time inputs must be finite and non-negative")]
    NegativeInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "EDM_vs_EIM")]
    EdmVsEim,
    #[serde(rename = "EDM_vs_EDM")]
    EdmVsEdm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BirthdayPlan {
    pub m_open: u32,
    pub k_probe: u32,
    pub port_space: u32,
    pub scenario: Scenario,
}

impl BirthdayPlan {
    pub fn new(m_open: u32, k_probe: u32, port_space: u32, scenario: Scenario) -> Result<Self, StrategyError> {
        let plan = BirthdayPlan { m_open, k_probe, port_space, scenario };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.port_space == 0 || self.port_space > PORT_SPACE {
            return Err(StrategyError::InvalidPlan(format!("port space {} outside 1..=65536", self.port_space)));
        }
        if self.m_open == 0 || self.m_open > self.port_space || self.k_probe == 0 || self.k_probe > self.port_space {
            return Err(StrategyError::InvalidPlan(format!(
                "need 1 <= m_open, k_probe <= {}, got m={} k={}",
                self.port_space, self.m_open, self.k_probe
            )));
        }
        Ok(())
    }
}

/// Campaign-level birthday settings; the scenario is decided per attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BirthdayParams {
    pub m_open: u32,
    pub k_probe: u32,
    pub port_space: u32,
}

impl Default for BirthdayParams {
    fn default() -> Self {
        BirthdayParams { m_open: 256, k_probe: 256, port_space: PORT_SPACE }
    }
}

impl BirthdayParams {
    pub fn plan(&self, scenario: Scenario) -> BirthdayPlan {
        BirthdayPlan { m_open: self.m_open, k_probe: self.k_probe, port_space: self.port_space, scenario }
    }
}

/// Probability that a birthday punch finds a usable port pair.
///
/// Mixed case: 1 - C(S-m, k) / C(S, k). Both sides endpoint-dependent:
/// 1 - (1 - 1/S^2)^(k m). Both evaluated in log space.
pub fn birthday_probability(plan: &BirthdayPlan) -> Result<f64, StrategyError> {
    plan.validate()?;
    let s = f64::from(plan.port_space);
    let m = f64::from(plan.m_open);
    let k = plan.k_probe;
    let log_miss = match plan.scenario {
        Scenario::EdmVsEim => {
            if u64::from(k) > u64::from(plan.port_space - plan.m_open) {
                return Ok(1.0);
            }
            (0..k).map(|i| (-m / (s - f64::from(i))).ln_1p()).sum::<f64>()
        }
        Scenario::EdmVsEdm => f64::from(k) * m * (-1.0 / (s * s)).ln_1p(),
    };
    Ok(-log_miss.exp_m1())
}

/// Shares of peer pairs with exactly one and with two EDM peers.
pub fn edm_pair_shares(edm_share: f64) -> Result<(f64, f64), StrategyError> {
    if !(0.0..=1.0).contains(&edm_share) {
        return Err(StrategyError::ProbabilityRange);
    }
    Ok((2.0 * edm_share * (1.0 - edm_share), edm_share * edm_share))
}

/// Success-rate gain from rescuing mixed EDM/EIM pairs at `mixed_success`.
pub fn expected_gain(edm_share: f64, mixed_success: f64) -> Result<f64, StrategyError> {
    if !(0.0..=1.0).contains(&mixed_success) {
        return Err(StrategyError::ProbabilityRange);
    }
    let (mixed, _) = edm_pair_shares(edm_share)?;
    Ok(mixed * mixed_success)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaitTimeInputs {
    pub rtt_listener_initiator: f64,
    pub rtt_listener_nat: f64,
    pub rtt_initiator_nat: f64,
}

impl WaitTimeInputs {
    pub fn validate(&self) -> Result<(), StrategyError> {
        let ok = [self.rtt_listener_initiator, self.rtt_listener_nat, self.rtt_initiator_nat]
            .iter()
            .all(|x| x.is_finite() && *x >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(StrategyError::NegativeInput)
        }
    }
}

/// 1/2 (RTT_listener-initiator + RTT_listener-NAT - RTT_initiator-NAT), never negative.
pub fn refined_wait_time(inputs: WaitTimeInputs) -> f64 {
    (0.5 * (inputs.rtt_listener_initiator + inputs.rtt_listener_nat - inputs.rtt_initiator_nat)).max(0.0)
}

/// Which side acts as QUIC client on odd attempts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuicRoles {
    /// The listener is the client, the initiator primes.
    #[default]
    Base,
    Swapped,
}

/// The QUIC client for `attempt` (1-based).
pub fn assign_roles(attempt: u8, alternation: bool, base: QuicRoles) -> Role {
    let swapped = matches!(base, QuicRoles::Swapped) ^ (alternation && attempt.is_multiple_of(2));
    if swapped {
        Role::Initiator
    } else {
        Role::Listener
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimingMode {
    #[default]
    Off,
    /// Packets that expire before reaching the remote NAT.
    LowTtl(u8),
    /// Full-TTL priming, for comparison.
    Naive,
}

impl PrimingMode {
    pub fn ttl(self) -> Option<u8> {
        match self {
            PrimingMode::Off => None,
            PrimingMode::LowTtl(t) => Some(t),
            PrimingMode::Naive => Some(transport::DEFAULT_TTL),
        }
    }

    /// The ttl that must stay below the hop distance, if any.
    pub fn checked_ttl(self) -> Option<u8> {
        match self {
            PrimingMode::LowTtl(t) => Some(t),
            _ => None,
        }
    }
}

/// When each side primes during an attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PrimingSchedule {
    pub ttl: u8,
    /// The listener sends a burst right after its CONNECT reply.
    pub listener_burst: bool,
    /// The initiator primes from CONNECT receipt until its wait expires.
    pub initiator_until_dial: bool,
}

pub fn ttl_priming_schedule(ttl: u8, hop_distance: u8) -> Result<PrimingSchedule, StrategyError> {
    if ttl == 0 {
        return Err(StrategyError::ZeroTtl);
    }
    if ttl >= hop_distance {
        return Err(StrategyError::TtlTooHigh { ttl, hops: hop_distance });
    }
    Ok(PrimingSchedule { ttl, listener_burst: true, initiator_until_dial: true })
}

/// Per-peer state of a running birthday punch.
#[derive(Clone, Debug, Default)]
pub struct BirthdayState {
    pub active: bool,
    pub opened: BTreeSet<u16>,
    pub probes_sent: u32,
    /// `(local port, remote endpoint)` of the pair that met.
    pub connected: Option<(u16, Endpoint)>,
}

/// EDM side: sends one packet from each of `m_open` fresh sockets.
pub fn open_ports(stack: &mut PeerStack, ctx: &mut Ctx, plan: &BirthdayPlan, toward: Endpoint) {
    use rand::seq::index;
    let mut state = BirthdayState { active: true, ..BirthdayState::default() };
    let targets: Vec<Endpoint> = match plan.scenario {
        Scenario::EdmVsEim => vec![toward; plan.m_open as usize],
        Scenario::EdmVsEdm => index::sample(&mut stack.rng, plan.port_space as usize, plan.m_open as usize)
            .into_iter()
            .map(|p| Endpoint::new(toward.host, p as u16))
            .collect(),
    };
    for target in targets {
        let local = stack.ephemeral_port();
        state.opened.insert(local);
        let pkt = Packet::new(Endpoint::new(ctx.host, local), target, PacketKind::UdpDatagram, transport::DUMMY_PACKET_BYTES)
            .with_tag(Tag::Dummy);
        ctx.send(pkt);
    }
    stack.birthday = Some(state);
}

/// Other side: probes `k_probe` distinct random ports of `host`, paced over 500 ms.
pub fn start_probing(stack: &mut PeerStack, ctx: &mut Ctx, plan: &BirthdayPlan, host: HostId) {
    use rand::seq::index;
    stack.birthday = Some(BirthdayState { active: true, ..BirthdayState::default() });
    let ports = index::sample(&mut stack.rng, plan.port_space as usize, plan.k_probe as usize);
    let spacing = PROBE_SPREAD_MS / f64::from(plan.k_probe);
    let local = stack.quic_port;
    let epoch = stack.epoch;
    for (i, p) in ports.into_iter().enumerate() {
        let target = Endpoint::new(host, p as u16);
        ctx.timer(i as f64 * spacing, Timer::Probe { local, target, ttl: transport::DEFAULT_TTL, epoch });
    }
}

pub(crate) fn on_probe_timer(stack: &mut PeerStack, ctx: &mut Ctx, timer: Timer) {
    let Timer::Probe { local, target, ttl, epoch } = timer else { return };
    if epoch != stack.epoch {
        return;
    }
    let Some(state) = stack.birthday.as_mut() else { return };
    if !state.active || state.connected.is_some() {
        return;
    }
    state.probes_sent += 1;
    let pkt = Packet::new(Endpoint::new(ctx.host, local), target, PacketKind::UdpDatagram, transport::DUMMY_PACKET_BYTES)
        .with_ttl(ttl)
        .with_tag(Tag::Probe(u32::from(target.port)));
    ctx.send(pkt);
}

pub(crate) fn on_probe_packet(stack: &mut PeerStack, ctx: &mut Ctx, pkt: Packet) {
    let Some(state) = stack.birthday.as_mut() else { return };
    if !state.active {
        return;
    }
    match pkt.tag {
        Tag::Probe(n) if state.opened.contains(&pkt.dst.port) => {
            let ack = Packet::new(pkt.dst, pkt.src, PacketKind::UdpDatagram, transport::DUMMY_PACKET_BYTES).with_tag(Tag::ProbeAck(n));
            ctx.send(ack);
            if state.connected.is_none() {
                state.connected = Some((pkt.dst.port, pkt.src));
                ctx.conn(ConnEvent {
                    at: ctx.now,
                    host: ctx.host,
                    local: pkt.dst,
                    remote: pkt.src,
                    transport: Transport::Quic,
                    kind: ConnEventKind::Established,
                });
            }
        }
        Tag::ProbeAck(_) if state.connected.is_none() => {
            state.connected = Some((pkt.dst.port, pkt.src));
            ctx.conn(ConnEvent {
                at: ctx.now,
                host: ctx.host,
                local: pkt.dst,
                remote: pkt.src,
                transport: Transport::Quic,
                kind: ConnEventKind::Ready,
            });
        }
        _ => {}
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BirthdayOutcome {
    Success { at: SimTime },
    Failed,
}

impl World {
    /// Runs a standalone birthday punch: `opener` (behind the EDM NAT) opens
    /// ports toward `prober_ep`, `prober` probes the opener's public address.
    pub fn birthday_punch(
        &mut self,
        opener: HostId,
        prober: HostId,
        prober_ep: Endpoint,
        plan: &BirthdayPlan,
        deadline_ms: f64,
    ) -> Result<BirthdayOutcome, WorldError> {
        plan.validate().map_err(|e| WorldError::Sim(crate::sim::SimError::InvalidTopology(e.to_string())))?;
        let opener_public = self.nat_public(opener).unwrap_or(opener);
        let since = self.connections().len();
        self.with_peer(opener, |s, c| open_ports(s, c, plan, prober_ep))?;
        self.with_peer(prober, |s, c| start_probing(s, c, plan, opener_public))?;
        let deadline = self.now() + deadline_ms;
        let hit = |w: &World| {
            w.connections()[since..].iter().any(|e| e.host == prober && e.kind == ConnEventKind::Ready)
        };
        self.run_until(deadline, hit);
        let at = self.connections()[since..].iter().find(|e| e.host == prober && e.kind == ConnEventKind::Ready).map(|e| e.at);
        Ok(match at {
            Some(at) => BirthdayOutcome::Success { at },
            None => BirthdayOutcome::Failed,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub trials: u32,
    pub successes: u32,
    pub rate: f64,
    /// Closed-form probability for the same plan.
    pub oracle: f64,
}

/// Runs `trials` independent birthday punches over freshly built worlds.
///
/// The opener sits behind an APDM NAT allocating uniformly at random from
/// `port_space` ports. The prober sits behind an EIM NAT for
/// [`Scenario::EdmVsEim`], or an APDM NAT of the same size for
/// [`Scenario::EdmVsEdm`].
pub fn birthday_monte_carlo(plan: &BirthdayPlan, trials: u32, seed: u64) -> Result<MonteCarloEstimate, StrategyError> {
    use crate::nat::{FilteringBehavior, MappingBehavior, NatConfig, PortAllocation, PortRange};
    use crate::sim::{mix_seed, Latency};
    use crate::world::PeerId;

    let oracle = birthday_probability(plan)?;
    let last = (plan.port_space - 1) as u16;
    let small = PortRange { first: 0, last };
    let opener_nat = NatConfig {
        port_alloc: PortAllocation::Random,
        port_range: small,
        ..NatConfig::with_behavior(MappingBehavior::APDM, FilteringBehavior::APDF)
    };
    let prober_nat = match plan.scenario {
        Scenario::EdmVsEim => NatConfig {
            port_alloc: PortAllocation::PreserveBestEffort,
            ..NatConfig::with_behavior(MappingBehavior::EIM, FilteringBehavior::APDF)
        },
        Scenario::EdmVsEdm => opener_nat.clone(),
    };
    let (a, a_nat, b, b_nat) = (HostId(0xc0a8_0001), HostId(0x5000_0001), HostId(0xc0a8_0101), HostId(0x5000_0002));
    let mut successes = 0;
    for i in 0..trials {
        let mut w = World::new(mix_seed(seed, u64::from(i)));
        let build = |w: &mut World| -> Result<BirthdayOutcome, WorldError> {
            w.add_private_peer(a, PeerId(1), Latency::fixed(20.0), a_nat, opener_nat.clone(), 1.0)?;
            w.add_private_peer(b, PeerId(2), Latency::fixed(20.0), b_nat, prober_nat.clone(), 1.0)?;
            let prober_ep = Endpoint::new(b_nat, w.peer(b)?.quic_port);
            w.birthday_punch(a, b, prober_ep, plan, 2.0 * PROBE_SPREAD_MS + 500.0)
        };
        match build(&mut w) {
            Ok(BirthdayOutcome::Success { .. }) => successes += 1,
            Ok(BirthdayOutcome::Failed) => {}
            Err(e) => return Err(StrategyError::InvalidPlan(e.to_string())),
        }
    }
    Ok(MonteCarloEstimate { trials, successes, rate: f64::from(successes) / f64::from(trials.max(1)), oracle })
}
