//! Direct Connection Upgrade through Relay: connection reversal, the
//! CONNECT / CONNECT / SYNC exchange, the synchronized dial and up to three
//! attempts, with outcomes recorded in the result-record vocabulary.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nat::Endpoint;
use crate::relay::{CircuitId, CircuitMsg, ListenAddr, PeerAddressInfo, Reachability, RelayError, RelayedConn};
use crate::sim::{HostId, SimTime};
use crate::strategy::{self, BirthdayParams, PrimingMode, QuicRoles, StrategyError};
use crate::transport::{self, ConnEvent, ConnEventKind, PingPath, QuicRole, QuicState, RttStats, TcpState, Transport};
use crate::world::{Ctx, PeerId, PeerStack, Timer, World, WorldError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeResult {
    Unknown,
    NoConnection,
    NoStream,
    ConnectionReversed,
    Cancelled,
    Failed,
    Success,
}

impl OutcomeResult {
    pub const ALL: [OutcomeResult; 7] = [
        OutcomeResult::Unknown,
        OutcomeResult::NoConnection,
        OutcomeResult::NoStream,
        OutcomeResult::ConnectionReversed,
        OutcomeResult::Cancelled,
        OutcomeResult::Failed,
        OutcomeResult::Success,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeResult::Unknown => "UNKNOWN",
            OutcomeResult::NoConnection => "NO_CONNECTION",
            OutcomeResult::NoStream => "NO_STREAM",
            OutcomeResult::ConnectionReversed => "CONNECTION_REVERSED",
            OutcomeResult::Cancelled => "CANCELLED",
            OutcomeResult::Failed => "FAILED",
            OutcomeResult::Success => "SUCCESS",
        }
    }
}

impl fmt::Display for OutcomeResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OutcomeResult {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OutcomeResult::ALL.into_iter().find(|o| o.as_str() == s).ok_or_else(|| format!("unknown outcome {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeAttempt {
    Unknown,
    /// Kept for record fidelity; never produced by the simulator.
    DirectDial,
    ProtocolError,
    Cancelled,
    Timeout,
    Failed,
    Success,
}

impl OutcomeAttempt {
    pub const ALL: [OutcomeAttempt; 7] = [
        OutcomeAttempt::Unknown,
        OutcomeAttempt::DirectDial,
        OutcomeAttempt::ProtocolError,
        OutcomeAttempt::Cancelled,
        OutcomeAttempt::Timeout,
        OutcomeAttempt::Failed,
        OutcomeAttempt::Success,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeAttempt::Unknown => "UNKNOWN",
            OutcomeAttempt::DirectDial => "DIRECT_DIAL",
            OutcomeAttempt::ProtocolError => "PROTOCOL_ERROR",
            OutcomeAttempt::Cancelled => "CANCELLED",
            OutcomeAttempt::Timeout => "TIMEOUT",
            OutcomeAttempt::Failed => "FAILED",
            OutcomeAttempt::Success => "SUCCESS",
        }
    }
}

impl fmt::Display for OutcomeAttempt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OutcomeAttempt {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OutcomeAttempt::ALL.into_iter().find(|o| o.as_str() == s).ok_or_else(|| format!("unknown attempt outcome {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Initiator,
    Listener,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolePunchAttempt {
    pub index: u8,
    pub outcome: OutcomeAttempt,
    /// RTT the initiator measured over the CONNECT exchange.
    pub rtt_relayed: Option<RttStats>,
    pub transport_used: Option<Transport>,
    pub wait_ms: Option<f64>,
    pub started: SimTime,
    pub ended: SimTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolePunchResult {
    pub client: PeerId,
    pub remote: PeerId,
    pub relay_addrs: Vec<String>,
    pub attempts: Vec<HolePunchAttempt>,
    pub outcome: OutcomeResult,
    pub protocol_filter: Option<Transport>,
    pub port_mapping_active: bool,
    pub listen_endpoints: Vec<ListenAddr>,
    pub direct_endpoints_used: Vec<Endpoint>,
    pub transport_used: Option<Transport>,
    pub rtt_direct_after: Option<RttStats>,
    pub rtt_to_relay: Option<RttStats>,
    pub rtt_relayed: Option<RttStats>,
    pub started: SimTime,
    pub ended: SimTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Strategies {
    pub refined_wait: bool,
    pub role_alternation: bool,
    pub quic_roles: QuicRoles,
    pub priming: PrimingMode,
    pub birthday: Option<BirthdayParams>,
}

impl Default for Strategies {
    fn default() -> Self {
        Strategies {
            refined_wait: false,
            role_alternation: false,
            quic_roles: QuicRoles::Base,
            priming: PrimingMode::Off,
            birthday: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcutrConfig {
    pub max_attempts: u8,
    pub attempt_deadline_ms: f64,
    pub stream_timeout_ms: f64,
    pub reversal_timeout_ms: f64,
    pub rtt_samples: u32,
    pub dummy_packets: u32,
    /// Added to the initiator's wait. Only for experiments on synchronization error.
    pub wait_bias_ms: f64,
    /// Attempt index at which the run is aborted with CANCELLED.
    pub cancel_before_attempt: Option<u8>,
    pub strategies: Strategies,
}

impl Default for DcutrConfig {
    fn default() -> Self {
        DcutrConfig {
            max_attempts: 3,
            attempt_deadline_ms: 15_000.0,
            stream_timeout_ms: 15_000.0,
            reversal_timeout_ms: 5_000.0,
            rtt_samples: 10,
            dummy_packets: 3,
            wait_bias_ms: 0.0,
            cancel_before_attempt: None,
            strategies: Strategies::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum DcutrError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("max_attempts must be in 1..=3, got {0}")]
    Attempts(u8),
}

/// Per-peer DCUtR state for one hole punch.
#[derive(Clone, Debug)]
pub struct DcutrSession {
    pub role: Role,
    pub circuit: CircuitId,
    pub filter: Option<Transport>,
    pub config: DcutrConfig,
    pub attempt: u8,
    pub stream_opened_at: Option<SimTime>,
    pub connect_sent_at: Option<SimTime>,
    pub connect_received: bool,
    pub sync_received: bool,
    pub connect_rtt_ms: Option<f64>,
    pub wait_ms: Option<f64>,
    pub remote_addrs: Vec<ListenAddr>,
    pub remote_nat_rtt_ms: Option<f64>,
    pub dialed_at: Option<SimTime>,
    /// DCUtR message bytes this peer put on the relay.
    pub bytes_sent: u32,
}

impl DcutrSession {
    pub fn new(role: Role, circuit: CircuitId, filter: Option<Transport>, config: DcutrConfig) -> Self {
        DcutrSession {
            role,
            circuit,
            filter,
            config,
            attempt: 0,
            stream_opened_at: None,
            connect_sent_at: None,
            connect_received: false,
            sync_received: false,
            connect_rtt_ms: None,
            wait_ms: None,
            remote_addrs: Vec::new(),
            remote_nat_rtt_ms: None,
            dialed_at: None,
            bytes_sent: 0,
        }
    }

    fn allows(&self, t: Transport) -> bool {
        self.filter.is_none_or(|f| f == t)
    }

    fn reset_attempt(&mut self, attempt: u8) {
        self.attempt = attempt;
        self.connect_sent_at = None;
        self.connect_received = false;
        self.sync_received = false;
        self.connect_rtt_ms = None;
        self.wait_ms = None;
        self.remote_addrs.clear();
        self.remote_nat_rtt_ms = None;
        self.dialed_at = None;
    }
}

fn own_addrs(stack: &PeerStack, filter: Option<Transport>) -> Vec<ListenAddr> {
    stack
        .info
        .observed_public
        .iter()
        .filter(|a| filter.is_none_or(|f| f == a.transport) && stack.supports(a.transport))
        .copied()
        .collect()
}

fn send_dcutr(stack: &mut PeerStack, ctx: &mut Ctx, msg: CircuitMsg) -> bool {
    let Some(session) = stack.dcutr.as_ref() else { return false };
    let circuit = session.circuit;
    let size = msg.size_bytes();
    let sent = crate::relay::circuit_send(stack, ctx, circuit, msg);
    if sent {
        if let Some(s) = stack.dcutr.as_mut() {
            s.bytes_sent += size;
        }
    }
    sent
}

/// Initiator side: opens the hole-punch stream.
pub fn open_stream(stack: &mut PeerStack, ctx: &mut Ctx) -> bool {
    send_dcutr(stack, ctx, CircuitMsg::Open)
}

/// Initiator side: starts attempt `attempt` by sending CONNECT.
pub fn start_attempt(stack: &mut PeerStack, ctx: &mut Ctx, attempt: u8) -> bool {
    stack.epoch += 1;
    let Some(s) = stack.dcutr.as_mut() else { return false };
    debug_assert_eq!(s.role, Role::Initiator);
    s.reset_attempt(attempt);
    s.connect_sent_at = Some(ctx.now);
    let addrs = own_addrs(stack, stack.dcutr.as_ref().and_then(|s| s.filter));
    send_dcutr(stack, ctx, CircuitMsg::Connect { attempt, addrs, nat_rtt_ms: None })
}

pub(crate) fn on_circuit_msg(stack: &mut PeerStack, ctx: &mut Ctx, circuit: CircuitId, msg: CircuitMsg) {
    let Some(s) = stack.dcutr.as_mut() else { return };
    if s.circuit != circuit {
        return;
    }
    match (s.role, msg) {
        (Role::Listener, CircuitMsg::Open) => {
            s.stream_opened_at.get_or_insert(ctx.now);
        }
        (Role::Listener, CircuitMsg::Connect { attempt, addrs, .. }) => {
            s.reset_attempt(attempt);
            s.connect_received = true;
            s.remote_addrs = addrs;
            let refined = s.config.strategies.refined_wait;
            let filter = s.filter;
            stack.epoch += 1;
            let own = own_addrs(stack, filter);
            let nat_rtt_ms = refined.then_some(ctx.nat_rtt);
            send_dcutr(stack, ctx, CircuitMsg::Connect { attempt, addrs: own, nat_rtt_ms });
            start_priming(stack, ctx, None);
        }
        (Role::Initiator, CircuitMsg::Connect { attempt, addrs, nat_rtt_ms }) => {
            if attempt != s.attempt || s.connect_received {
                return;
            }
            let Some(sent) = s.connect_sent_at else { return };
            s.connect_received = true;
            let rtt = ctx.now - sent;
            s.connect_rtt_ms = Some(rtt);
            s.remote_addrs = addrs;
            s.remote_nat_rtt_ms = nat_rtt_ms;
            let base = if s.config.strategies.refined_wait {
                strategy::refined_wait_time(strategy::WaitTimeInputs {
                    rtt_listener_initiator: rtt,
                    rtt_listener_nat: nat_rtt_ms.unwrap_or(0.0),
                    rtt_initiator_nat: ctx.nat_rtt,
                })
            } else {
                rtt / 2.0
            };
            let wait = (base + s.config.wait_bias_ms).max(0.0);
            s.wait_ms = Some(wait);
            send_dcutr(stack, ctx, CircuitMsg::Sync { attempt });
            let epoch = stack.epoch;
            ctx.timer(wait, Timer::DcutrDial { epoch });
            start_priming(stack, ctx, Some(ctx.now + wait));
        }
        (Role::Listener, CircuitMsg::Sync { attempt }) => {
            if attempt != s.attempt || s.sync_received {
                return;
            }
            s.sync_received = true;
            dial(stack, ctx);
        }
        _ => {}
    }
}

/// Low-TTL (or naive) priming toward the remote's UDP addresses.
fn start_priming(stack: &mut PeerStack, ctx: &mut Ctx, until: Option<SimTime>) {
    let Some(s) = stack.dcutr.as_ref() else { return };
    let Some(ttl) = s.config.strategies.priming.ttl() else { return };
    if !s.allows(Transport::Quic) {
        return;
    }
    let targets: Vec<Endpoint> = s.remote_addrs.iter().filter(|a| a.transport == Transport::Quic).map(|a| a.endpoint).collect();
    let local = stack.quic_port;
    // The listener primes a burst; the initiator keeps priming until it dials.
    let (count, interval) = match until {
        Some(_) => (u32::MAX, strategy::PRIME_INTERVAL_MS),
        None => (s.config.dummy_packets.max(1), strategy::PRIME_INTERVAL_MS),
    };
    for t in targets {
        transport::quic_prime(stack, ctx, local, t, count, ttl, interval, until);
    }
}

pub(crate) fn on_dial_timer(stack: &mut PeerStack, ctx: &mut Ctx, epoch: u32) {
    if epoch != stack.epoch {
        return;
    }
    dial(stack, ctx);
}

fn first_addr(addrs: &[ListenAddr], t: Transport) -> Option<Endpoint> {
    addrs.iter().find(|a| a.transport == t).map(|a| a.endpoint)
}

/// Whether a peer looks endpoint-dependent: different observers saw different ports.
pub fn looks_edm(addrs: &[ListenAddr], t: Transport) -> bool {
    let mut ports = addrs.iter().filter(|a| a.transport == t).map(|a| a.endpoint.port);
    let Some(first) = ports.next() else { return false };
    ports.any(|p| p != first)
}

fn dial(stack: &mut PeerStack, ctx: &mut Ctx) {
    let Some(s) = stack.dcutr.as_mut() else { return };
    if s.dialed_at.is_some() {
        return;
    }
    s.dialed_at = Some(ctx.now);
    let s = s.clone();
    let deadline = s.config.attempt_deadline_ms;
    let remote = &s.remote_addrs;
    if s.allows(Transport::Tcp) && stack.supports(Transport::Tcp) {
        if let Some(ep) = first_addr(remote, Transport::Tcp) {
            let local = stack.tcp_port;
            transport::tcp_dial(stack, ctx, local, ep, deadline, transport::DEFAULT_TTL);
        }
    }
    if !(s.allows(Transport::Quic) && stack.supports(Transport::Quic)) {
        return;
    }
    let Some(ep) = first_addr(remote, Transport::Quic) else { return };
    let own = own_addrs(stack, s.filter);
    if let Some(params) = s.config.strategies.birthday {
        let me_edm = looks_edm(&own, Transport::Quic);
        let they_edm = looks_edm(remote, Transport::Quic);
        if me_edm || they_edm {
            let opener = if me_edm && they_edm { s.role == Role::Listener } else { me_edm };
            let scenario = if me_edm && they_edm {
                strategy::Scenario::EdmVsEdm
            } else {
                strategy::Scenario::EdmVsEim
            };
            let plan = params.plan(scenario);
            if opener {
                strategy::open_ports(stack, ctx, &plan, ep);
            } else {
                strategy::start_probing(stack, ctx, &plan, ep.host);
            }
            return;
        }
    }
    let client = strategy::assign_roles(s.attempt, s.config.strategies.role_alternation, s.config.strategies.quic_roles);
    let i_am_client = match s.role {
        Role::Listener => client == Role::Listener,
        Role::Initiator => client == Role::Initiator,
    };
    let local = stack.quic_port;
    if i_am_client {
        transport::quic_dial(stack, ctx, local, ep, deadline);
    } else {
        transport::quic_prime(stack, ctx, local, ep, s.config.dummy_packets, transport::DEFAULT_TTL, strategy::PRIME_INTERVAL_MS, None);
    }
}

/// Marks every in-flight dial of `stack` as aborted and invalidates its timers.
pub fn abort_dials(stack: &mut PeerStack) {
    stack.epoch += 1;
    for c in stack.tcp.values_mut() {
        if matches!(c.state, TcpState::SynSent | TcpState::SynReceived) {
            c.state = TcpState::Failed(transport::FailReason::Aborted);
        }
    }
    for ((_, _, role), c) in stack.quic.iter_mut() {
        if *role == QuicRole::Client && c.state == QuicState::InitialSent {
            c.state = QuicState::Failed(transport::FailReason::Aborted);
        }
    }
    if let Some(b) = stack.birthday.as_mut() {
        b.active = false;
    }
}

/// Result outcome from the fast-path events and attempt outcomes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FastPath {
    None,
    NoConnection,
    NoStream,
    Reversed,
    Cancelled,
}

pub fn derive_outcome(fast: FastPath, attempts: &[HolePunchAttempt]) -> OutcomeResult {
    match fast {
        FastPath::NoConnection => return OutcomeResult::NoConnection,
        FastPath::NoStream => return OutcomeResult::NoStream,
        FastPath::Reversed => return OutcomeResult::ConnectionReversed,
        FastPath::Cancelled => return OutcomeResult::Cancelled,
        FastPath::None => {}
    }
    if attempts.iter().any(|a| a.outcome == OutcomeAttempt::Success) {
        OutcomeResult::Success
    } else if attempts.iter().any(|a| a.outcome == OutcomeAttempt::Cancelled) {
        OutcomeResult::Cancelled
    } else if attempts.is_empty() {
        OutcomeResult::Unknown
    } else {
        OutcomeResult::Failed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReversalOutcome {
    NotApplicable,
    Connected(ConnEvent),
    Failed,
}

fn public_of(w: &World, h: HostId) -> HostId {
    w.nat_public(h).unwrap_or(h)
}

/// First `Ready` event after index `since` on a direct connection between `a` and `b`.
pub fn direct_ready(w: &World, since: usize, a: HostId, b: HostId) -> Option<ConnEvent> {
    let (pa, pb) = (public_of(w, a), public_of(w, b));
    w.connections()[since..]
        .iter()
        .find(|e| e.kind == ConnEventKind::Ready && ((e.host == a && e.remote.host == pb) || (e.host == b && e.remote.host == pa)))
        .cloned()
}

impl World {
    /// The initiator dials the listener's advertised addresses directly.
    pub fn try_connection_reversal(
        &mut self,
        initiator: HostId,
        listener: HostId,
        listener_info: &PeerAddressInfo,
        filter: Option<Transport>,
        timeout_ms: f64,
    ) -> Result<ReversalOutcome, WorldError> {
        if !(listener_info.reachability == Reachability::Public || listener_info.port_mapping_active) {
            return Ok(ReversalOutcome::NotApplicable);
        }
        let targets: Vec<ListenAddr> = listener_info
            .observed_public
            .iter()
            .filter(|a| filter.is_none_or(|f| f == a.transport))
            .copied()
            .collect();
        if targets.is_empty() {
            return Ok(ReversalOutcome::NotApplicable);
        }
        let since = self.connections().len();
        self.with_peer(initiator, |s, c| {
            for t in &targets {
                if !s.supports(t.transport) {
                    continue;
                }
                match t.transport {
                    Transport::Tcp => {
                        let local = s.tcp_port;
                        transport::tcp_dial(s, c, local, t.endpoint, timeout_ms, transport::DEFAULT_TTL)
                    }
                    Transport::Quic => {
                        let local = s.quic_port;
                        transport::quic_dial(s, c, local, t.endpoint, timeout_ms)
                    }
                }
            }
        })?;
        let deadline = self.now() + timeout_ms;
        let ok = self.run_until(deadline, |w| direct_ready(w, since, initiator, listener).is_some());
        abort_dials(self.peer_mut(initiator)?);
        Ok(match direct_ready(self, since, initiator, listener) {
            Some(ev) if ok => ReversalOutcome::Connected(ev),
            _ => ReversalOutcome::Failed,
        })
    }

    /// Finds `host`'s end of an established direct connection to `other`.
    pub fn direct_path(&self, host: HostId, other: HostId, prefer: Option<Transport>) -> Option<PingPath> {
        let target = public_of(self, other);
        let stack = self.peer(host).ok()?;
        let tcp = stack
            .tcp
            .iter()
            .find(|((_, r), c)| r.host == target && c.state == TcpState::Established)
            .map(|((l, r), _)| PingPath::Direct { local_port: *l, remote: *r, transport: Transport::Tcp });
        let quic = stack
            .quic
            .iter()
            .find(|((_, r, _), c)| r.host == target && c.state == QuicState::Established)
            .map(|((l, r, _), _)| PingPath::Direct { local_port: *l, remote: *r, transport: Transport::Quic });
        let birthday = stack.birthday.as_ref().and_then(|b| b.connected).map(|(l, r)| PingPath::Direct {
            local_port: l,
            remote: r,
            transport: Transport::Quic,
        });
        match prefer {
            Some(Transport::Tcp) => tcp.or(quic).or(birthday),
            _ => quic.or(birthday).or(tcp),
        }
    }

    /// Runs one attempt on an installed pair of sessions.
    pub fn run_attempt(
        &mut self,
        initiator: HostId,
        listener: HostId,
        conn: &RelayedConn,
        index: u8,
        config: &DcutrConfig,
    ) -> Result<HolePunchAttempt, WorldError> {
        let started = self.now();
        if !self.circuit_open(conn) {
            return Ok(HolePunchAttempt {
                index,
                outcome: OutcomeAttempt::ProtocolError,
                rtt_relayed: None,
                transport_used: None,
                wait_ms: None,
                started,
                ended: started,
            });
        }
        let since = self.connections().len();
        self.with_peer(initiator, |s, c| start_attempt(s, c, index))?;
        let deadline = started + config.attempt_deadline_ms;
        self.run_until(deadline, |w| direct_ready(w, since, initiator, listener).is_some() || !w.circuit_open(conn));
        let ready = direct_ready(self, since, initiator, listener);
        let ini = self.peer(initiator)?.dcutr.clone().expect("session installed");
        let lis = self.peer(listener)?.dcutr.clone().expect("session installed");
        let outcome = if ready.is_some() {
            OutcomeAttempt::Success
        } else if !self.circuit_open(conn) {
            OutcomeAttempt::ProtocolError
        } else if !(ini.connect_received && lis.sync_received) {
            OutcomeAttempt::Timeout
        } else {
            OutcomeAttempt::Failed
        };
        debug_assert_ne!(outcome, OutcomeAttempt::DirectDial);
        if ready.is_none() {
            abort_dials(self.peer_mut(initiator)?);
            abort_dials(self.peer_mut(listener)?);
        }
        Ok(HolePunchAttempt {
            index,
            outcome,
            rtt_relayed: ini.connect_rtt_ms.and_then(|r| RttStats::from_samples(&[r])),
            transport_used: ready.as_ref().map(|e| e.transport),
            wait_ms: ini.wait_ms,
            started,
            ended: self.now(),
        })
    }

    /// Full client-side flow: relay connection, measurements, reversal,
    /// stream open and up to `max_attempts` hole-punch attempts.
    pub fn run_hole_punch(
        &mut self,
        client: HostId,
        remote: PeerId,
        relays: &[HostId],
        filter: Option<Transport>,
        config: &DcutrConfig,
    ) -> Result<HolePunchResult, DcutrError> {
        if !(1..=3).contains(&config.max_attempts) {
            return Err(DcutrError::Attempts(config.max_attempts));
        }
        let remote_host = self.peer_host(remote).ok_or(WorldError::NotAPeer(HostId(0)))?;
        if let Some(ttl) = config.strategies.priming.checked_ttl() {
            let hops = self.topology().hop_distance(client, remote_host).map_err(WorldError::from)?;
            strategy::ttl_priming_schedule(ttl, hops)?;
        }
        let started = self.now();
        let client_stack = self.peer(client)?;
        let mut result = HolePunchResult {
            client: client_stack.peer_id,
            remote,
            relay_addrs: Vec::new(),
            attempts: Vec::new(),
            outcome: OutcomeResult::Unknown,
            protocol_filter: filter,
            port_mapping_active: client_stack.info.port_mapping_active,
            listen_endpoints: client_stack.info.observed_public.clone(),
            direct_endpoints_used: Vec::new(),
            transport_used: None,
            rtt_direct_after: None,
            rtt_to_relay: None,
            rtt_relayed: None,
            started,
            ended: started,
        };
        for r in relays {
            let relay_id = self.peer(*r)?.peer_id;
            result.relay_addrs.push(format!("/ip4/{}/udp/{}/quic-v1/p2p/{}/p2p-circuit/p2p/{}", r, crate::world::QUIC_LISTEN_PORT, relay_id, remote));
        }
        let finish = |w: &World, mut r: HolePunchResult, fast: FastPath| {
            r.outcome = derive_outcome(fast, &r.attempts);
            r.ended = w.now();
            r
        };

        let conn = match self.relay_connect(client, remote, relays) {
            Ok(c) => c,
            Err(RelayError::NoConnection) => return Ok(finish(self, result, FastPath::NoConnection)),
            Err(RelayError::World(e)) => return Err(WorldError::Sim(crate::sim::SimError::InvalidTopology(e.0)).into()),
            Err(_) => return Ok(finish(self, result, FastPath::NoConnection)),
        };
        let relay_ep = self.peer(conn.relay)?.listen_endpoint(Transport::Quic);
        let client_quic = self.peer(client)?.quic_port;
        result.rtt_to_relay = self.measure_rtt(
            client,
            PingPath::Direct { local_port: client_quic, remote: relay_ep, transport: Transport::Quic },
            config.rtt_samples,
        )?;
        result.rtt_relayed = self.measure_rtt(client, PingPath::Relayed { circuit: conn.circuit }, config.rtt_samples)?;
        let (_, client_info) = self.identify_exchange(&conn)?;
        let client_info = client_info.unwrap_or_default();

        if config.cancel_before_attempt == Some(0) {
            return Ok(finish(self, result, FastPath::Cancelled));
        }

        if let ReversalOutcome::Connected(ev) =
            self.try_connection_reversal(remote_host, client, &client_info, filter, config.reversal_timeout_ms)?
        {
            self.close_circuit(client, &conn)?;
            result.transport_used = Some(ev.transport);
            self.record_direct(&mut result, client, remote_host, Some(ev.transport), config)?;
            return Ok(finish(self, result, FastPath::Reversed));
        }

        self.peer_mut(client)?.dcutr = Some(DcutrSession::new(Role::Listener, conn.circuit, filter, config.clone()));
        self.peer_mut(remote_host)?.dcutr = Some(DcutrSession::new(Role::Initiator, conn.circuit, filter, config.clone()));
        self.with_peer(remote_host, open_stream)?;
        let stream_deadline = conn.established_at + config.stream_timeout_ms;
        let opened = self.run_until(stream_deadline.max(self.now()), |w| {
            w.peer(client).ok().and_then(|p| p.dcutr.as_ref()).is_some_and(|s| s.stream_opened_at.is_some())
        });
        if !opened {
            self.close_circuit(client, &conn)?;
            return Ok(finish(self, result, FastPath::NoStream));
        }

        for index in 1..=config.max_attempts {
            if config.cancel_before_attempt == Some(index) {
                result.attempts.push(HolePunchAttempt {
                    index,
                    outcome: OutcomeAttempt::Cancelled,
                    rtt_relayed: None,
                    transport_used: None,
                    wait_ms: None,
                    started: self.now(),
                    ended: self.now(),
                });
                break;
            }
            let attempt = self.run_attempt(remote_host, client, &conn, index, config)?;
            let outcome = attempt.outcome;
            result.attempts.push(attempt);
            match outcome {
                OutcomeAttempt::Success => {
                    self.close_circuit(client, &conn)?;
                    let t = result.attempts.last().and_then(|a| a.transport_used);
                    result.transport_used = t;
                    self.record_direct(&mut result, client, remote_host, t, config)?;
                    break;
                }
                OutcomeAttempt::ProtocolError => break,
                _ => {}
            }
        }
        if self.circuit_open(&conn) {
            self.close_circuit(client, &conn)?;
        }
        Ok(finish(self, result, FastPath::None))
    }

    fn record_direct(
        &mut self,
        result: &mut HolePunchResult,
        client: HostId,
        remote: HostId,
        transport: Option<Transport>,
        config: &DcutrConfig,
    ) -> Result<(), WorldError> {
        let Some(path) = self.direct_path(client, remote, transport) else { return Ok(()) };
        if let PingPath::Direct { local_port, remote: r, .. } = path {
            let local_ext = self
                .nat_of(client)
                .and_then(|n| n.mappings().find(|m| m.internal.port == local_port && m.contacted.contains(&r)).map(|m| m.external))
                .unwrap_or(Endpoint::new(client, local_port));
            result.direct_endpoints_used = vec![local_ext, r];
        }
        result.rtt_direct_after = self.measure_rtt(client, path, config.rtt_samples)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attempt(outcome: OutcomeAttempt) -> HolePunchAttempt {
        HolePunchAttempt {
            index: 1,
            outcome,
            rtt_relayed: None,
            transport_used: None,
            wait_ms: None,
            started: SimTime::ZERO,
            ended: SimTime::ZERO,
        }
    }

    #[test]
    fn outcome_table() {
        use OutcomeAttempt as A;
        assert_eq!(derive_outcome(FastPath::NoConnection, &[]), OutcomeResult::NoConnection);
        assert_eq!(derive_outcome(FastPath::NoStream, &[]), OutcomeResult::NoStream);
        assert_eq!(derive_outcome(FastPath::Reversed, &[]), OutcomeResult::ConnectionReversed);
        assert_eq!(derive_outcome(FastPath::None, &[]), OutcomeResult::Unknown);
        assert_eq!(derive_outcome(FastPath::None, &[attempt(A::Failed), attempt(A::Success)]), OutcomeResult::Success);
        assert_eq!(derive_outcome(FastPath::None, &vec![attempt(A::Failed); 3]), OutcomeResult::Failed);
        assert_eq!(derive_outcome(FastPath::None, &[attempt(A::ProtocolError)]), OutcomeResult::Failed);
        assert_eq!(derive_outcome(FastPath::None, &[attempt(A::Timeout), attempt(A::Cancelled)]), OutcomeResult::Cancelled);
    }

    #[test]
    fn outcome_spellings_round_trip() {
        for o in OutcomeResult::ALL {
            assert_eq!(o.as_str().parse::<OutcomeResult>().unwrap(), o);
            assert_eq!(serde_json::to_string(&o).unwrap(), format!("\"{}\"", o.as_str()));
        }
        for o in OutcomeAttempt::ALL {
            assert_eq!(o.as_str().parse::<OutcomeAttempt>().unwrap(), o);
            assert_eq!(serde_json::to_string(&o).unwrap(), format!("\"{}\"", o.as_str()));
        }
    }

    #[test]
    fn edm_detection() {
        let a = |port| ListenAddr { endpoint: Endpoint::new(HostId(1), port), transport: Transport::Quic };
        assert!(!looks_edm(&[a(1)], Transport::Quic));
        assert!(!looks_edm(&[a(1), a(1)], Transport::Quic));
        assert!(looks_edm(&[a(1), a(2)], Transport::Quic));
        assert!(!looks_edm(&[a(1), a(2)], Transport::Tcp));
    }
}
