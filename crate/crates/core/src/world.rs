//! Packet-level world: hosts, their NATs and the event loop moving packets
//! between them.
//!
//! A packet sent at `t` by a host behind a NAT is translated by that NAT at
//! `t + nat_offset(src)`, reaches the destination NAT at
//! `t + latency - nat_offset(dst)` and the destination host at `t + latency`,
//! where `latency` is one draw from [`Topology::sample_latency`].

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dcutr::{self, DcutrSession};
use crate::nat::{DropReason, Endpoint, InboundVerdict, NatConfig, NatConfigError, NatState, OutboundError};
use crate::relay::{self, PeerAddressInfo, RelayClient, RelayConfig, RelayService};
use crate::sim::{HostId, Latency, RandomStream, Scheduler, SimError, SimTime, Topology};
use crate::strategy::BirthdayState;
use crate::transport::{self, ConnEvent, Packet, PacketKind, PingTracker, QuicConn, TcpConn, Transport};

pub const TCP_LISTEN_PORT: u16 = 4001;
pub const QUIC_LISTEN_PORT: u16 = 4001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, serde::Deserialize)]
pub struct PeerId(pub u32);

impl std::fmt::Display for PeerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "peer-{:05}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Nat(#[from] NatConfigError),
    #[error("host {0} already exists")]
    DuplicateHost(HostId),
    #[error("{0} is not a peer host")]
    NotAPeer(HostId),
    #[error("packet ttl must be >= 1")]
    ZeroTtl,
}

/// Timers a host can arm. `epoch` fields let a host ignore timers from an
/// abandoned attempt.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Timer {
    TcpRetransmit { local: u16, remote: Endpoint, tries: u32 },
    QuicRetransmit { local: u16, remote: Endpoint, tries: u32 },
    Prime { local: u16, toward: Endpoint, ttl: u8, remaining: u32, interval_ms: f64, until: Option<SimTime>, epoch: u32 },
    DcutrDial { epoch: u32 },
    Probe { local: u16, target: Endpoint, ttl: u8, epoch: u32 },
    Keepalive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Action {
    Send(Packet),
    Timer { delay_ms: f64, timer: Timer },
    Conn(ConnEvent),
}

/// Scratch space handed to host handlers. Handlers never touch the world
/// directly; the world applies the queued actions afterwards.
pub struct Ctx {
    pub now: SimTime,
    pub host: HostId,
    /// Round trip from this host to its own NAT (0 for public hosts).
    pub nat_rtt: f64,
    actions: Vec<Action>,
}

impl Ctx {
    pub fn new(now: SimTime, host: HostId, nat_rtt: f64) -> Self {
        Ctx { now, host, nat_rtt, actions: Vec::new() }
    }

    pub fn send(&mut self, pkt: Packet) {
        self.actions.push(Action::Send(pkt));
    }

    pub fn timer(&mut self, delay_ms: f64, timer: Timer) {
        self.actions.push(Action::Timer { delay_ms, timer });
    }

    pub fn conn(&mut self, ev: ConnEvent) {
        self.actions.push(Action::Conn(ev));
    }

    pub fn into_actions(self) -> Vec<Action> {
        self.actions
    }
}

/// Everything a simulated libp2p host runs. Relays are peers with a relay service.
#[derive(Debug)]
pub struct PeerStack {
    pub peer_id: PeerId,
    pub host: HostId,
    pub tcp_port: u16,
    pub quic_port: u16,
    pub transports: Vec<Transport>,
    pub tcp: BTreeMap<(u16, Endpoint), TcpConn>,
    pub quic: BTreeMap<(u16, Endpoint, transport::QuicRole), QuicConn>,
    pub pings: PingTracker,
    pub info: PeerAddressInfo,
    pub relay_client: RelayClient,
    pub relay_service: Option<RelayService>,
    pub dcutr: Option<DcutrSession>,
    pub birthday: Option<BirthdayState>,
    pub epoch: u32,
    pub next_ephemeral: u16,
    pub rng: RandomStream,
}

impl PeerStack {
    pub fn new(peer_id: PeerId, host: HostId, seed: u64) -> Self {
        PeerStack {
            peer_id,
            host,
            tcp_port: TCP_LISTEN_PORT,
            quic_port: QUIC_LISTEN_PORT,
            transports: vec![Transport::Tcp, Transport::Quic],
            tcp: BTreeMap::new(),
            quic: BTreeMap::new(),
            pings: PingTracker::default(),
            info: PeerAddressInfo::default(),
            relay_client: RelayClient::default(),
            relay_service: None,
            dcutr: None,
            birthday: None,
            epoch: 0,
            next_ephemeral: 50_000,
            rng: RandomStream::new(seed, &format!("peer/{}", host.0)),
        }
    }

    pub fn listen_endpoint(&self, t: Transport) -> Endpoint {
        match t {
            Transport::Tcp => Endpoint::new(self.host, self.tcp_port),
            Transport::Quic => Endpoint::new(self.host, self.quic_port),
        }
    }

    pub fn supports(&self, t: Transport) -> bool {
        self.transports.contains(&t)
    }

    pub fn ephemeral_port(&mut self) -> u16 {
        let p = self.next_ephemeral;
        self.next_ephemeral = if p == u16::MAX { 50_000 } else { p + 1 };
        p
    }

    fn receive(&mut self, ctx: &mut Ctx, pkt: Packet) {
        match pkt.kind {
            PacketKind::TcpSyn | PacketKind::TcpSynAck | PacketKind::TcpAck | PacketKind::TcpRst => {
                transport::tcp_receive(self, ctx, pkt)
            }
            PacketKind::QuicInitial | PacketKind::QuicReply => transport::quic_receive(self, ctx, pkt),
            PacketKind::UdpDatagram => transport::udp_receive(self, ctx, pkt),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::TcpRetransmit { .. } | Timer::QuicRetransmit { .. } => transport::on_retransmit(self, ctx, timer),
            Timer::Prime { .. } => transport::on_prime(self, ctx, timer),
            Timer::DcutrDial { epoch } => dcutr::on_dial_timer(self, ctx, epoch),
            Timer::Probe { .. } => crate::strategy::on_probe_timer(self, ctx, timer),
            Timer::Keepalive => relay::on_keepalive(self, ctx),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum TraceEvent {
    Sent { host: HostId, pkt: Packet },
    Translated { nat: HostId, internal: Endpoint, external: Endpoint, dst: Endpoint, kind: PacketKind, ttl: u8 },
    OutboundRejected { nat: HostId, src: Endpoint, error: OutboundError },
    TtlExpired { src: Endpoint, dst: Endpoint, kind: PacketKind, ttl: u8, hops: u8 },
    Lost { src: Endpoint, dst: Endpoint, kind: PacketKind },
    Unroutable { dst: Endpoint },
    ArrivedAtNat { nat: HostId, src: Endpoint, dst: Endpoint, kind: PacketKind },
    Admitted { nat: HostId, src: Endpoint, internal: Endpoint, kind: PacketKind },
    Dropped { nat: HostId, src: Endpoint, dst: Endpoint, kind: PacketKind, reason: DropReason, rst: bool },
    Delivered { host: HostId, pkt: Packet },
    Conn(ConnEvent),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub at: SimTime,
    pub event: TraceEvent,
}

/// What [`World::send`] knows at send time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Delivery {
    /// Arrival at the destination host is scheduled (NAT filtering may still drop it).
    Scheduled { arrival: SimTime },
    /// Dropped in transit after the sender's own NAT.
    TtlExpired { hops: u8 },
    Lost,
    Unroutable,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Stage {
    SrcNat,
    Core,
    DstNat,
    Host,
}

#[derive(Clone, Debug)]
struct Transit {
    pkt: Packet,
    stage: Stage,
    from: HostId,
    to: HostId,
    sent_at: SimTime,
    total_ms: f64,
    /// Decided at send time, applied after the sender's NAT.
    fate: Delivery,
}

#[derive(Debug)]
enum Event {
    Transit(Box<Transit>),
    Timer { host: HostId, timer: Timer },
}

pub struct World {
    sched: Scheduler<Event>,
    topology: Topology,
    nats: BTreeMap<HostId, NatState>,
    behind: BTreeMap<HostId, HostId>,
    nat_owner: BTreeMap<HostId, HostId>,
    peers: BTreeMap<HostId, PeerStack>,
    rng: RandomStream,
    seed: u64,
    trace: Option<Vec<TraceEntry>>,
    conns: Vec<ConnEvent>,
    events_processed: u64,
}

impl World {
    pub fn new(seed: u64) -> Self {
        Self::starting_at(seed, SimTime::ZERO)
    }

    pub fn starting_at(seed: u64, start: SimTime) -> Self {
        World {
            sched: Scheduler::starting_at(start),
            topology: Topology::new(),
            nats: BTreeMap::new(),
            behind: BTreeMap::new(),
            nat_owner: BTreeMap::new(),
            peers: BTreeMap::new(),
            rng: RandomStream::new(seed, "world"),
            seed,
            trace: None,
            conns: Vec::new(),
            events_processed: 0,
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceEntry] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn topology_mut(&mut self) -> &mut Topology {
        &mut self.topology
    }

    pub fn add_public_peer(&mut self, host: HostId, peer_id: PeerId, access: Latency) -> Result<(), WorldError> {
        if self.peers.contains_key(&host) || self.nats.contains_key(&host) {
            return Err(WorldError::DuplicateHost(host));
        }
        self.topology.add_host(host, access)?;
        self.peers.insert(host, PeerStack::new(peer_id, host, self.seed));
        Ok(())
    }

    /// Adds a peer at `host` behind its own NAT reachable at `nat_public`.
    pub fn add_private_peer(
        &mut self,
        host: HostId,
        peer_id: PeerId,
        access: Latency,
        nat_public: HostId,
        nat: NatConfig,
        nat_offset_ms: f64,
    ) -> Result<(), WorldError> {
        if self.peers.contains_key(&host) || self.nats.contains_key(&nat_public) || self.peers.contains_key(&nat_public)
        {
            return Err(WorldError::DuplicateHost(host));
        }
        self.topology.add_host(host, access)?;
        self.topology.set_nat_offset(host, nat_offset_ms)?;
        let state = NatState::new(nat, nat_public, crate::sim::mix_seed(self.seed, nat_public.0 as u64))?;
        self.nats.insert(nat_public, state);
        self.behind.insert(host, nat_public);
        self.nat_owner.insert(nat_public, host);
        self.peers.insert(host, PeerStack::new(peer_id, host, self.seed));
        Ok(())
    }

    pub fn add_relay(&mut self, host: HostId, peer_id: PeerId, access: Latency, config: RelayConfig) -> Result<(), WorldError> {
        self.add_public_peer(host, peer_id, access)?;
        self.peer_mut(host)?.relay_service = Some(RelayService::new(config));
        Ok(())
    }

    pub fn peer(&self, host: HostId) -> Result<&PeerStack, WorldError> {
        self.peers.get(&host).ok_or(WorldError::NotAPeer(host))
    }

    pub fn peer_mut(&mut self, host: HostId) -> Result<&mut PeerStack, WorldError> {
        self.peers.get_mut(&host).ok_or(WorldError::NotAPeer(host))
    }

    pub fn peer_host(&self, id: PeerId) -> Option<HostId> {
        self.peers.values().find(|p| p.peer_id == id).map(|p| p.host)
    }

    pub fn nat_of(&self, host: HostId) -> Option<&NatState> {
        self.behind.get(&host).and_then(|p| self.nats.get(p))
    }

    pub fn nat_of_mut(&mut self, host: HostId) -> Option<&mut NatState> {
        let public = *self.behind.get(&host)?;
        self.nats.get_mut(&public)
    }

    pub fn nat_public(&self, host: HostId) -> Option<HostId> {
        self.behind.get(&host).copied()
    }

    pub fn nat_owner(&self, nat_public: HostId) -> Option<HostId> {
        self.nat_owner.get(&nat_public).copied()
    }

    pub fn is_private(&self, host: HostId) -> bool {
        self.behind.contains_key(&host)
    }

    /// One-way latency between the two hosts' NATs (or the hosts themselves when public).
    pub fn nat_to_nat_latency(&self, a: HostId, b: HostId) -> Result<f64, SimError> {
        let l = self.topology.path_latency(a, b)?;
        Ok(l.mean_ms - self.topology.nat_offset(a) - self.topology.nat_offset(b))
    }

    pub fn connections(&self) -> &[ConnEvent] {
        &self.conns
    }

    /// Runs a host-local operation (a dial, a prime) with a fresh [`Ctx`] and applies its actions.
    pub fn with_peer<T>(&mut self, host: HostId, f: impl FnOnce(&mut PeerStack, &mut Ctx) -> T) -> Result<T, WorldError> {
        let nat_rtt = self.topology.nat_rtt(host);
        let mut ctx = Ctx::new(self.now(), host, nat_rtt);
        let peer = self.peers.get_mut(&host).ok_or(WorldError::NotAPeer(host))?;
        let out = f(peer, &mut ctx);
        self.apply(host, ctx.into_actions());
        Ok(out)
    }

    pub fn set_timer(&mut self, host: HostId, delay_ms: f64, timer: Timer) {
        self.sched.schedule_in(delay_ms, Event::Timer { host, timer });
    }

    fn apply(&mut self, host: HostId, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send(pkt) => {
                    let _ = self.send(host, pkt);
                }
                Action::Timer { delay_ms, timer } => self.set_timer(host, delay_ms, timer),
                Action::Conn(ev) => {
                    self.record(TraceEvent::Conn(ev.clone()));
                    self.conns.push(ev);
                }
            }
        }
    }

    fn record(&mut self, event: TraceEvent) {
        let at = self.now();
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceEntry { at, event });
        }
    }

    /// Resolves the host that finally receives traffic addressed to `public`.
    fn receiver(&self, public: HostId) -> Option<HostId> {
        if let Some(owner) = self.nat_owner.get(&public) {
            return Some(*owner);
        }
        self.peers.contains_key(&public).then_some(public)
    }

    /// Sends `pkt` from `from` at the current time.
    pub fn send(&mut self, from: HostId, pkt: Packet) -> Result<Delivery, WorldError> {
        if pkt.ttl == 0 {
            return Err(WorldError::ZeroTtl);
        }
        self.record(TraceEvent::Sent { host: from, pkt: pkt.clone() });
        let Some(to) = self.receiver(pkt.dst.host) else {
            self.record(TraceEvent::Unroutable { dst: pkt.dst });
            return Ok(Delivery::Unroutable);
        };
        let now = self.now();
        let total_ms = self.topology.sample_latency(from, to, &mut self.rng)?;
        let hops = self.topology.hop_distance(from, to)?;
        let lost = self.topology.loss_rate() > 0.0 && self.rng.random::<f64>() < self.topology.loss_rate();
        let fate = if pkt.ttl < hops {
            Delivery::TtlExpired { hops }
        } else if lost {
            Delivery::Lost
        } else {
            Delivery::Scheduled { arrival: now + total_ms }
        };
        let transit = Transit { pkt, stage: Stage::SrcNat, from, to, sent_at: now, total_ms, fate };
        if self.behind.contains_key(&from) {
            let at = now + self.topology.nat_offset(from);
            self.sched.schedule(at, Event::Transit(Box::new(transit)))?;
        } else {
            self.advance_transit(Box::new(Transit { stage: Stage::Core, ..transit }));
        }
        Ok(fate)
    }

    /// Sends a packet originating at a NAT itself (a RST), skipping outbound translation.
    fn send_from_nat(&mut self, nat_public: HostId, pkt: Packet) {
        let Some(owner) = self.nat_owner(nat_public) else { return };
        let Some(to) = self.receiver(pkt.dst.host) else { return };
        let now = self.now();
        let Ok(sampled) = self.topology.sample_latency(owner, to, &mut self.rng) else { return };
        let total_ms = (sampled - self.topology.nat_offset(owner)).max(0.0);
        let fate = Delivery::Scheduled { arrival: now + total_ms };
        self.advance_transit(Box::new(Transit { pkt, stage: Stage::Core, from: owner, to, sent_at: now, total_ms, fate }));
    }

    /// Moves a transit past the core: applies the TTL/loss fate and schedules the next stage.
    fn advance_transit(&mut self, mut t: Box<Transit>) {
        match t.fate {
            Delivery::TtlExpired { hops } => {
                self.record(TraceEvent::TtlExpired { src: t.pkt.src, dst: t.pkt.dst, kind: t.pkt.kind, ttl: t.pkt.ttl, hops });
                return;
            }
            Delivery::Lost => {
                self.record(TraceEvent::Lost { src: t.pkt.src, dst: t.pkt.dst, kind: t.pkt.kind });
                return;
            }
            Delivery::Unroutable | Delivery::Scheduled { .. } => {}
        }
        let now = self.now();
        let host_at = t.sent_at + t.total_ms;
        if self.nats.contains_key(&t.pkt.dst.host) {
            let nat_at = (t.sent_at + (t.total_ms - self.topology.nat_offset(t.to)).max(0.0)).max(now);
            t.stage = Stage::DstNat;
            self.sched.schedule(nat_at, Event::Transit(t)).expect("not in the past");
        } else {
            t.stage = Stage::Host;
            self.sched.schedule(host_at.max(now), Event::Transit(t)).expect("not in the past");
        }
    }

    fn handle_transit(&mut self, mut t: Box<Transit>) {
        let now = self.now();
        match t.stage {
            Stage::SrcNat => {
                let nat_public = self.behind[&t.from];
                let nat = self.nats.get_mut(&nat_public).expect("nat exists");
                match nat.process_outbound(&t.pkt, now) {
                    Ok(translated) => {
                        self.record(TraceEvent::Translated {
                            nat: nat_public,
                            internal: t.pkt.src,
                            external: translated.src,
                            dst: translated.dst,
                            kind: translated.kind,
                            ttl: translated.ttl,
                        });
                        t.pkt = translated;
                        t.stage = Stage::Core;
                        self.advance_transit(t);
                    }
                    Err(error) => {
                        self.record(TraceEvent::OutboundRejected { nat: nat_public, src: t.pkt.src, error });
                    }
                }
            }
            Stage::Core => self.advance_transit(t),
            Stage::DstNat => {
                let nat_public = t.pkt.dst.host;
                self.record(TraceEvent::ArrivedAtNat { nat: nat_public, src: t.pkt.src, dst: t.pkt.dst, kind: t.pkt.kind });
                let nat = self.nats.get_mut(&nat_public).expect("nat exists");
                match nat.process_inbound(&t.pkt, now) {
                    InboundVerdict::Deliver(p) => {
                        self.record(TraceEvent::Admitted { nat: nat_public, src: p.src, internal: p.dst, kind: p.kind });
                        t.pkt = p;
                        t.stage = Stage::Host;
                        let at = (t.sent_at + t.total_ms).max(now);
                        self.sched.schedule(at, Event::Transit(t)).expect("not in the past");
                    }
                    InboundVerdict::Drop(reason) => {
                        self.record(TraceEvent::Dropped {
                            nat: nat_public,
                            src: t.pkt.src,
                            dst: t.pkt.dst,
                            kind: t.pkt.kind,
                            reason,
                            rst: false,
                        });
                    }
                    InboundVerdict::RejectRst(reason) => {
                        self.record(TraceEvent::Dropped {
                            nat: nat_public,
                            src: t.pkt.src,
                            dst: t.pkt.dst,
                            kind: t.pkt.kind,
                            reason,
                            rst: true,
                        });
                        let rst = Packet::new(t.pkt.dst, t.pkt.src, PacketKind::TcpRst, 40);
                        self.send_from_nat(nat_public, rst);
                    }
                }
            }
            Stage::Host => {
                let host = t.to;
                self.record(TraceEvent::Delivered { host, pkt: t.pkt.clone() });
                let nat_rtt = self.topology.nat_rtt(host);
                let mut ctx = Ctx::new(now, host, nat_rtt);
                if let Some(peer) = self.peers.get_mut(&host) {
                    peer.receive(&mut ctx, t.pkt);
                }
                self.apply(host, ctx.into_actions());
            }
        }
    }

    /// Processes one event. Returns `false` when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some((_, ev)) = self.sched.pop() else { return false };
        self.events_processed += 1;
        match ev {
            Event::Transit(t) => self.handle_transit(t),
            Event::Timer { host, timer } => {
                let nat_rtt = self.topology.nat_rtt(host);
                let mut ctx = Ctx::new(self.now(), host, nat_rtt);
                if let Some(peer) = self.peers.get_mut(&host) {
                    peer.on_timer(&mut ctx, timer);
                }
                self.apply(host, ctx.into_actions());
            }
        }
        true
    }

    /// Runs events until `done` holds or the next event lies beyond `deadline`.
    /// Returns whether `done` was reached; otherwise the clock ends at `deadline`.
    pub fn run_until(&mut self, deadline: SimTime, mut done: impl FnMut(&World) -> bool) -> bool {
        loop {
            if done(self) {
                return true;
            }
            match self.sched.peek_time() {
                Some(t) if t <= deadline => {
                    self.step();
                }
                _ => {
                    self.sched.advance_to(deadline);
                    return done(self);
                }
            }
        }
    }

    pub fn run_for(&mut self, ms: f64) {
        let deadline = self.now() + ms;
        self.run_until(deadline, |_| false);
    }
}
