//! Packets and the TCP / QUIC handshakes, at the granularity that matters for
//! hole punching: who sends the first packet, and when.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::nat::{Endpoint, Proto};
use crate::relay::{CircuitId, CircuitMsg, RelayFrame};
use crate::sim::{HostId, SimTime};
use crate::world::{Ctx, PeerStack, Timer, World, WorldError};

pub const DEFAULT_TTL: u8 = 64;
/// First retransmission of an opening packet; later ones back off by doubling.
pub const RETRANSMIT_BASE_MS: f64 = 1_000.0;
pub const MAX_RETRANSMITS: u32 = 4;
pub const DUMMY_PACKET_BYTES: u32 = 30;
pub const PING_BYTES: u32 = 32;
pub const QUIC_INITIAL_BYTES: u32 = 1_200;
pub const PING_TIMEOUT_MS: f64 = 5_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Quic,
}

impl Transport {
    pub fn proto(self) -> Proto {
        match self {
            Transport::Tcp => Proto::Tcp,
            Transport::Quic => Proto::Udp,
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::Tcp => "tcp",
            Transport::Quic => "quic",
        })
    }
}

impl std::str::FromStr for Transport {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tcp" => Ok(Transport::Tcp),
            "quic" => Ok(Transport::Quic),
            other => Err(format!("unknown transport {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PacketKind {
    TcpSyn,
    TcpSynAck,
    TcpAck,
    TcpRst,
    QuicInitial,
    QuicReply,
    UdpDatagram,
}

impl PacketKind {
    pub fn proto(self) -> Proto {
        match self {
            PacketKind::TcpSyn | PacketKind::TcpSynAck | PacketKind::TcpAck | PacketKind::TcpRst => Proto::Tcp,
            PacketKind::QuicInitial | PacketKind::QuicReply | PacketKind::UdpDatagram => Proto::Udp,
        }
    }
}

/// Payload marker carried by a packet.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub enum Tag {
    #[default]
    None,
    Dummy,
    Keepalive,
    Ping(u32),
    Pong(u32),
    Probe(u32),
    ProbeAck(u32),
    /// Security handshake on a fresh TCP connection.
    Secure,
    SecureAck,
    Relay(RelayFrame),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Packet {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub kind: PacketKind,
    pub ttl: u8,
    pub size_bytes: u32,
    pub tag: Tag,
}

impl Packet {
    pub fn new(src: Endpoint, dst: Endpoint, kind: PacketKind, size_bytes: u32) -> Self {
        Packet { src, dst, kind, ttl: DEFAULT_TTL, size_bytes, tag: Tag::None }
    }

    pub fn with_ttl(mut self, ttl: u8) -> Self {
        self.ttl = ttl;
        self
    }

    pub fn with_tag(mut self, tag: Tag) -> Self {
        self.tag = tag;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailReason {
    Reset,
    Timeout,
    Aborted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TcpState {
    SynSent,
    SynReceived,
    Established,
    Failed(FailReason),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TcpConn {
    pub state: TcpState,
    pub dialed: bool,
    pub started: SimTime,
    pub deadline: SimTime,
    pub ttl: u8,
    pub established_at: Option<SimTime>,
    pub ready_at: Option<SimTime>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QuicRole {
    Client,
    Server,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum QuicState {
    InitialSent,
    Established,
    Failed(FailReason),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuicConn {
    pub state: QuicState,
    pub started: SimTime,
    pub deadline: SimTime,
    pub established_at: Option<SimTime>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ConnEventKind {
    Established,
    /// Usable for application data (after the security handshake on TCP).
    Ready,
    Failed(FailReason),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConnEvent {
    pub at: SimTime,
    pub host: HostId,
    pub local: Endpoint,
    pub remote: Endpoint,
    pub transport: Transport,
    pub kind: ConnEventKind,
}

fn event(ctx: &Ctx, local_port: u16, remote: Endpoint, transport: Transport, kind: ConnEventKind) -> ConnEvent {
    ConnEvent { at: ctx.now, host: ctx.host, local: Endpoint::new(ctx.host, local_port), remote, transport, kind }
}

fn tcp_send(ctx: &mut Ctx, local: u16, remote: Endpoint, kind: PacketKind, tag: Tag) {
    let pkt = Packet::new(Endpoint::new(ctx.host, local), remote, kind, 40).with_tag(tag);
    ctx.send(pkt);
}

/// Opens (or re-opens) a TCP connection from `local` to `remote` by sending a SYN.
pub fn tcp_dial(stack: &mut PeerStack, ctx: &mut Ctx, local: u16, remote: Endpoint, deadline_ms: f64, ttl: u8) {
    if let Some(c) = stack.tcp.get(&(local, remote)) {
        if !matches!(c.state, TcpState::Failed(_)) {
            return;
        }
    }
    stack.tcp.insert(
        (local, remote),
        TcpConn {
            state: TcpState::SynSent,
            dialed: true,
            started: ctx.now,
            deadline: ctx.now + deadline_ms,
            ttl,
            established_at: None,
            ready_at: None,
        },
    );
    let syn = Packet::new(Endpoint::new(ctx.host, local), remote, PacketKind::TcpSyn, 40).with_ttl(ttl);
    ctx.send(syn);
    ctx.timer(RETRANSMIT_BASE_MS, Timer::TcpRetransmit { local, remote, tries: 1 });
}

fn tcp_established(conn: &mut TcpConn, ctx: &mut Ctx, local: u16, remote: Endpoint, start_secure: bool) {
    conn.state = TcpState::Established;
    conn.established_at = Some(ctx.now);
    ctx.conn(event(ctx, local, remote, Transport::Tcp, ConnEventKind::Established));
    if start_secure {
        tcp_send(ctx, local, remote, PacketKind::TcpAck, Tag::Secure);
    }
}

pub(crate) fn tcp_receive(stack: &mut PeerStack, ctx: &mut Ctx, pkt: Packet) {
    if pkt.kind == PacketKind::TcpAck && crate::relay::on_tcp_frame(stack, ctx, &pkt) {
        return;
    }
    let local = pkt.dst.port;
    let remote = pkt.src;
    let listening = local == stack.tcp_port;
    let entry = stack.tcp.get_mut(&(local, remote));
    match pkt.kind {
        PacketKind::TcpSyn => match entry {
            None if listening => {
                stack.tcp.insert(
                    (local, remote),
                    TcpConn {
                        state: TcpState::SynReceived,
                        dialed: false,
                        started: ctx.now,
                        deadline: ctx.now + 15_000.0,
                        ttl: DEFAULT_TTL,
                        established_at: None,
                        ready_at: None,
                    },
                );
                tcp_send(ctx, local, remote, PacketKind::TcpSynAck, Tag::None);
            }
            None => tcp_send(ctx, local, remote, PacketKind::TcpRst, Tag::None),
            Some(c) => match c.state {
                TcpState::SynSent => {
                    c.state = TcpState::SynReceived;
                    tcp_send(ctx, local, remote, PacketKind::TcpSynAck, Tag::None);
                }
                TcpState::SynReceived => tcp_send(ctx, local, remote, PacketKind::TcpSynAck, Tag::None),
                TcpState::Established => tcp_send(ctx, local, remote, PacketKind::TcpAck, Tag::None),
                TcpState::Failed(_) => tcp_send(ctx, local, remote, PacketKind::TcpRst, Tag::None),
            },
        },
        PacketKind::TcpSynAck => match entry {
            Some(c) if matches!(c.state, TcpState::SynSent | TcpState::SynReceived) => {
                tcp_send(ctx, local, remote, PacketKind::TcpAck, Tag::None);
                tcp_established(c, ctx, local, remote, true);
            }
            Some(c) if c.state == TcpState::Established => tcp_send(ctx, local, remote, PacketKind::TcpAck, Tag::None),
            _ => tcp_send(ctx, local, remote, PacketKind::TcpRst, Tag::None),
        },
        PacketKind::TcpAck => {
            let Some(c) = entry else { return };
            if c.state == TcpState::SynReceived {
                tcp_established(c, ctx, local, remote, false);
            }
            if c.state != TcpState::Established {
                return;
            }
            match pkt.tag {
                Tag::Secure => tcp_send(ctx, local, remote, PacketKind::TcpAck, Tag::SecureAck),
                Tag::SecureAck if c.ready_at.is_none() => {
                    c.ready_at = Some(ctx.now);
                    ctx.conn(event(ctx, local, remote, Transport::Tcp, ConnEventKind::Ready));
                }
                Tag::Ping(seq) => tcp_send(ctx, local, remote, PacketKind::TcpAck, Tag::Pong(seq)),
                Tag::Pong(seq) => stack.pings.record(seq, ctx.now),
                _ => {}
            }
        }
        PacketKind::TcpRst => {
            if let Some(c) = entry {
                if !matches!(c.state, TcpState::Failed(_)) {
                    c.state = TcpState::Failed(FailReason::Reset);
                    ctx.conn(event(ctx, local, remote, Transport::Tcp, ConnEventKind::Failed(FailReason::Reset)));
                }
            }
        }
        _ => unreachable!("non-TCP packet routed to TCP"),
    }
}

/// Starts a QUIC client handshake from `local` toward `remote`.
pub fn quic_dial(stack: &mut PeerStack, ctx: &mut Ctx, local: u16, remote: Endpoint, deadline_ms: f64) {
    let key = (local, remote, QuicRole::Client);
    if let Some(c) = stack.quic.get(&key) {
        if !matches!(c.state, QuicState::Failed(_)) {
            return;
        }
    }
    stack.quic.insert(
        key,
        QuicConn { state: QuicState::InitialSent, started: ctx.now, deadline: ctx.now + deadline_ms, established_at: None },
    );
    ctx.send(Packet::new(Endpoint::new(ctx.host, local), remote, PacketKind::QuicInitial, QUIC_INITIAL_BYTES));
    ctx.timer(RETRANSMIT_BASE_MS, Timer::QuicRetransmit { local, remote, tries: 1 });
}

pub(crate) fn quic_receive(stack: &mut PeerStack, ctx: &mut Ctx, pkt: Packet) {
    let local = pkt.dst.port;
    let remote = pkt.src;
    match pkt.kind {
        PacketKind::QuicInitial => {
            if local != stack.quic_port {
                return;
            }
            let key = (local, remote, QuicRole::Server);
            if let std::collections::btree_map::Entry::Vacant(e) = stack.quic.entry(key) {
                e.insert(QuicConn {
                    state: QuicState::Established,
                    started: ctx.now,
                    deadline: ctx.now,
                    established_at: Some(ctx.now),
                });
                ctx.conn(event(ctx, local, remote, Transport::Quic, ConnEventKind::Established));
            }
            ctx.send(Packet::new(pkt.dst, remote, PacketKind::QuicReply, QUIC_INITIAL_BYTES));
        }
        PacketKind::QuicReply => {
            if let Some(c) = stack.quic.get_mut(&(local, remote, QuicRole::Client)) {
                if c.state == QuicState::InitialSent {
                    c.state = QuicState::Established;
                    c.established_at = Some(ctx.now);
                    ctx.conn(event(ctx, local, remote, Transport::Quic, ConnEventKind::Established));
                    ctx.conn(event(ctx, local, remote, Transport::Quic, ConnEventKind::Ready));
                }
            }
        }
        _ => unreachable!("non-QUIC packet routed to QUIC"),
    }
}

pub(crate) fn udp_receive(stack: &mut PeerStack, ctx: &mut Ctx, pkt: Packet) {
    match pkt.tag {
        Tag::Ping(seq) => {
            ctx.send(Packet::new(pkt.dst, pkt.src, PacketKind::UdpDatagram, PING_BYTES).with_tag(Tag::Pong(seq)))
        }
        Tag::Pong(seq) => stack.pings.record(seq, ctx.now),
        Tag::Probe(_) | Tag::ProbeAck(_) => crate::strategy::on_probe_packet(stack, ctx, pkt),
        Tag::Relay(_) => crate::relay::on_frame(stack, ctx, pkt),
        _ => {}
    }
}

pub(crate) fn on_retransmit(stack: &mut PeerStack, ctx: &mut Ctx, timer: Timer) {
    match timer {
        Timer::TcpRetransmit { local, remote, tries } => {
            let Some(c) = stack.tcp.get_mut(&(local, remote)) else { return };
            if c.state != TcpState::SynSent {
                return;
            }
            if ctx.now >= c.deadline || tries > MAX_RETRANSMITS {
                c.state = TcpState::Failed(FailReason::Timeout);
                ctx.conn(event(ctx, local, remote, Transport::Tcp, ConnEventKind::Failed(FailReason::Timeout)));
                return;
            }
            let syn = Packet::new(Endpoint::new(ctx.host, local), remote, PacketKind::TcpSyn, 40).with_ttl(c.ttl);
            ctx.send(syn);
            ctx.timer(RETRANSMIT_BASE_MS * f64::from(1u32 << tries), Timer::TcpRetransmit { local, remote, tries: tries + 1 });
        }
        Timer::QuicRetransmit { local, remote, tries } => {
            let Some(c) = stack.quic.get_mut(&(local, remote, QuicRole::Client)) else { return };
            if c.state != QuicState::InitialSent {
                return;
            }
            if ctx.now >= c.deadline || tries > MAX_RETRANSMITS {
                c.state = QuicState::Failed(FailReason::Timeout);
                ctx.conn(event(ctx, local, remote, Transport::Quic, ConnEventKind::Failed(FailReason::Timeout)));
                return;
            }
            ctx.send(Packet::new(Endpoint::new(ctx.host, local), remote, PacketKind::QuicInitial, QUIC_INITIAL_BYTES));
            ctx.timer(
                RETRANSMIT_BASE_MS * f64::from(1u32 << tries),
                Timer::QuicRetransmit { local, remote, tries: tries + 1 },
            );
        }
        _ => {}
    }
}

/// Sends `count` dummy datagrams from `local` toward `toward`, `interval_ms` apart,
/// stopping early at `until`.
pub fn quic_prime(
    stack: &mut PeerStack,
    ctx: &mut Ctx,
    local: u16,
    toward: Endpoint,
    count: u32,
    ttl: u8,
    interval_ms: f64,
    until: Option<SimTime>,
) {
    assert!(count >= 1, "priming needs at least one packet");
    let timer = Timer::Prime { local, toward, ttl, remaining: count, interval_ms, until, epoch: stack.epoch };
    on_prime(stack, ctx, timer);
}

pub(crate) fn on_prime(stack: &mut PeerStack, ctx: &mut Ctx, timer: Timer) {
    let Timer::Prime { local, toward, ttl, remaining, interval_ms, until, epoch } = timer else { return };
    if epoch != stack.epoch || remaining == 0 || until.is_some_and(|u| ctx.now >= u) {
        return;
    }
    let pkt = Packet::new(Endpoint::new(ctx.host, local), toward, PacketKind::UdpDatagram, DUMMY_PACKET_BYTES)
        .with_ttl(ttl)
        .with_tag(Tag::Dummy);
    ctx.send(pkt);
    if remaining > 1 {
        ctx.timer(interval_ms, Timer::Prime { local, toward, ttl, remaining: remaining - 1, interval_ms, until, epoch });
    }
}

/// Outstanding and answered pings of one host.
#[derive(Clone, Debug, Default)]
pub struct PingTracker {
    next_seq: u32,
    outstanding: BTreeMap<u32, SimTime>,
    answered: BTreeMap<u32, f64>,
}

impl PingTracker {
    pub fn issue(&mut self, now: SimTime) -> u32 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.outstanding.insert(seq, now);
        seq
    }

    pub fn record(&mut self, seq: u32, now: SimTime) {
        if let Some(sent) = self.outstanding.remove(&seq) {
            self.answered.insert(seq, now - sent);
        }
    }

    pub fn rtt(&self, seq: u32) -> Option<f64> {
        self.answered.get(&seq).copied()
    }
}

/// Summary of a batch of RTT samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RttStats {
    pub mean_ms: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub stddev_ms: f64,
    pub samples: u32,
}

impl RttStats {
    pub fn from_samples(xs: &[f64]) -> Option<RttStats> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Some(RttStats { mean_ms: mean, stddev_ms: var.sqrt(), samples: xs.len() as u32 })
    }

    /// Coefficient of variation, `None` for a zero mean.
    pub fn ratio(&self) -> Option<f64> {
        (self.mean_ms > 0.0).then(|| self.stddev_ms / self.mean_ms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PingPath {
    /// Plain datagrams (QUIC) or segments on an established TCP connection.
    Direct { local_port: u16, remote: Endpoint, transport: Transport },
    /// Through an open relayed circuit.
    Relayed { circuit: CircuitId },
}

/// Outcome of a single dial driven to completion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DialOutcome {
    Ready { at: SimTime },
    Failed(FailReason),
}

impl World {
    /// Measures up to `samples` sequential round trips from `from` along `path`.
    pub fn measure_rtt(&mut self, from: HostId, path: PingPath, samples: u32) -> Result<Option<RttStats>, WorldError> {
        assert!(samples <= 10, "at most 10 samples per measurement");
        let mut rtts = Vec::new();
        for _ in 0..samples {
            let seq = self.with_peer(from, |stack, ctx| {
                let seq = stack.pings.issue(ctx.now);
                match path {
                    PingPath::Direct { local_port, remote, transport } => {
                        let kind = match transport {
                            Transport::Tcp => PacketKind::TcpAck,
                            Transport::Quic => PacketKind::UdpDatagram,
                        };
                        let pkt = Packet::new(Endpoint::new(ctx.host, local_port), remote, kind, PING_BYTES)
                            .with_tag(Tag::Ping(seq));
                        ctx.send(pkt);
                    }
                    PingPath::Relayed { circuit } => {
                        crate::relay::circuit_send(stack, ctx, circuit, CircuitMsg::Ping(seq));
                    }
                }
                seq
            })?;
            let deadline = self.now() + PING_TIMEOUT_MS;
            if self.run_until(deadline, |w| w.peer(from).map(|p| p.pings.rtt(seq).is_some()).unwrap_or(true)) {
                if let Some(r) = self.peer(from)?.pings.rtt(seq) {
                    rtts.push(r);
                }
            }
        }
        Ok(RttStats::from_samples(&rtts))
    }

    /// Dials `remote` from `from`'s listen socket and runs until the connection
    /// is usable, fails, or `deadline_ms` passes.
    pub fn dial_and_wait(
        &mut self,
        from: HostId,
        remote: Endpoint,
        transport: Transport,
        deadline_ms: f64,
    ) -> Result<DialOutcome, WorldError> {
        let local = self.with_peer(from, |stack, ctx| match transport {
            Transport::Tcp => {
                let local = stack.tcp_port;
                tcp_dial(stack, ctx, local, remote, deadline_ms, DEFAULT_TTL);
                local
            }
            Transport::Quic => {
                let local = stack.quic_port;
                quic_dial(stack, ctx, local, remote, deadline_ms);
                local
            }
        })?;
        let deadline = self.now() + deadline_ms;
        let start = self.connections().len();
        let mut outcome = None;
        self.run_until(deadline, |w| {
            for ev in &w.connections()[start..] {
                if ev.host == from && ev.local.port == local && ev.remote == remote && ev.transport == transport {
                    match ev.kind {
                        ConnEventKind::Ready => outcome = Some(DialOutcome::Ready { at: ev.at }),
                        ConnEventKind::Failed(r) => outcome = Some(DialOutcome::Failed(r)),
                        ConnEventKind::Established => continue,
                    }
                    return true;
                }
            }
            false
        });
        Ok(outcome.unwrap_or(DialOutcome::Failed(FailReason::Timeout)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nat::{Archetype, FilteringBehavior, MappingBehavior, NatConfig};
    use crate::sim::Latency;
    use crate::world::{PeerId, TraceEvent};

    const A: HostId = HostId(0x0A00_0001);
    const B: HostId = HostId(0x0A00_0002);
    const B_NAT: HostId = HostId(0xCB00_7102);

    fn public_pair() -> World {
        let mut w = World::new(1);
        w.add_public_peer(A, PeerId(1), Latency::fixed(10.0)).unwrap();
        w.add_public_peer(B, PeerId(2), Latency::fixed(20.0)).unwrap();
        w
    }

    #[test]
    fn tcp_dial_to_public_listener() {
        let mut w = public_pair();
        let out = w.dial_and_wait(A, Endpoint::new(B, 4001), Transport::Tcp, 15_000.0).unwrap();
        // SYN/SYN-ACK then the security round trip.
        assert_eq!(out, DialOutcome::Ready { at: SimTime::from_ms(120.0) });
    }

    #[test]
    fn quic_dial_is_one_round_trip() {
        let mut w = public_pair();
        let out = w.dial_and_wait(A, Endpoint::new(B, 4001), Transport::Quic, 15_000.0).unwrap();
        assert_eq!(out, DialOutcome::Ready { at: SimTime::from_ms(60.0) });
    }

    #[test]
    fn tcp_to_closed_port_is_reset() {
        let mut w = public_pair();
        let out = w.dial_and_wait(A, Endpoint::new(B, 9), Transport::Tcp, 15_000.0).unwrap();
        assert_eq!(out, DialOutcome::Failed(FailReason::Reset));
    }

    #[test]
    fn dial_into_port_restricted_nat_times_out() {
        let mut w = World::new(1);
        w.add_public_peer(A, PeerId(1), Latency::fixed(10.0)).unwrap();
        let nat = NatConfig::for_archetype(Archetype::PortRestrictedCone);
        w.add_private_peer(B, PeerId(2), Latency::fixed(20.0), B_NAT, nat, 1.0).unwrap();
        let out = w.dial_and_wait(A, Endpoint::new(B_NAT, 4001), Transport::Quic, 15_000.0).unwrap();
        assert_eq!(out, DialOutcome::Failed(FailReason::Timeout));
    }

    #[test]
    fn simultaneous_tcp_open_through_two_nats() {
        let a_nat = HostId(0xCB00_7101);
        let mut w = World::new(1);
        w.enable_trace();
        let nat = NatConfig::with_behavior(MappingBehavior::EIM, FilteringBehavior::APDF);
        let mut nat_a = nat.clone();
        nat_a.port_alloc = crate::nat::PortAllocation::PreserveBestEffort;
        let mut nat_b = nat;
        nat_b.port_alloc = crate::nat::PortAllocation::PreserveBestEffort;
        w.add_private_peer(A, PeerId(1), Latency::fixed(10.0), a_nat, nat_a, 1.0).unwrap();
        w.add_private_peer(B, PeerId(2), Latency::fixed(20.0), B_NAT, nat_b, 1.0).unwrap();
        w.with_peer(A, |s, c| tcp_dial(s, c, 4001, Endpoint::new(B_NAT, 4001), 15_000.0, DEFAULT_TTL)).unwrap();
        w.with_peer(B, |s, c| tcp_dial(s, c, 4001, Endpoint::new(a_nat, 4001), 15_000.0, DEFAULT_TTL)).unwrap();
        w.run_for(2_000.0);
        let ready: Vec<_> = w.connections().iter().filter(|e| e.kind == ConnEventKind::Ready).collect();
        assert!(!ready.is_empty());
        // Nothing is ever delivered to a host without passing its NAT first.
        for e in w.trace() {
            if let TraceEvent::Delivered { host, pkt } = &e.event {
                assert!(pkt.dst.host == *host);
            }
        }
    }

    #[test]
    fn prime_sends_count_packets() {
        let mut w = public_pair();
        w.enable_trace();
        w.with_peer(A, |s, c| quic_prime(s, c, 4001, Endpoint::new(B, 4001), 3, 64, 10.0, None)).unwrap();
        w.run_for(1_000.0);
        let sent = w.trace().iter().filter(|e| matches!(&e.event, TraceEvent::Sent { pkt, .. } if pkt.tag == Tag::Dummy)).count();
        assert_eq!(sent, 3);
    }

    #[test]
    #[should_panic]
    fn prime_rejects_zero_count() {
        let mut w = public_pair();
        w.with_peer(A, |s, c| quic_prime(s, c, 4001, Endpoint::new(B, 4001), 0, 64, 10.0, None)).unwrap();
    }

    #[test]
    fn direct_rtt_zero_jitter() {
        let mut w = public_pair();
        let stats = w
            .measure_rtt(A, PingPath::Direct { local_port: 4001, remote: Endpoint::new(B, 4001), transport: Transport::Quic }, 10)
            .unwrap()
            .unwrap();
        assert_eq!(stats, RttStats { mean_ms: 60.0, stddev_ms: 0.0, samples: 10 });
    }

    #[test]
    fn rtt_stats_basics() {
        assert_eq!(RttStats::from_samples(&[]), None);
        let s = RttStats::from_samples(&[1.0, 3.0]).unwrap();
        assert_eq!(s.mean_ms, 2.0);
        assert!((s.stddev_ms - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(RttStats { mean_ms: 0.0, stddev_ms: 0.0, samples: 1 }.ratio(), None);
    }
}
