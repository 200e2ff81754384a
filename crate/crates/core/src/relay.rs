//! Circuit relay reservations and limited relayed connections, Identify
//! observed addresses, and AutoNAT dial-back.
//!
//! Relay control traffic travels as datagrams between a peer's QUIC socket
//! and the relay. Connection setup with the relay itself is not modelled.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nat::Endpoint;
use crate::sim::{HostId, SimTime};
use crate::transport::{self, FailReason, Packet, PacketKind, Tag, Transport};
use crate::world::{Ctx, PeerId, PeerStack, Timer, World, WorldError};

pub const KEEPALIVE_INTERVAL_MS: f64 = 10_000.0;
pub const RELAY_CONNECT_TIMEOUT_MS: f64 = 15_000.0;
pub const CONTROL_TIMEOUT_MS: f64 = 5_000.0;
pub const AUTONAT_TIMEOUT_MS: f64 = 5_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelayConfig {
    pub reservation_duration_ms: f64,
    pub data_budget_bytes: u64,
    pub relayed_conn_limit: u32,
    pub reservation_capacity: usize,
}

impl Default for RelayConfig {
    fn default() -> Self {
        RelayConfig {
            reservation_duration_ms: 3_600_000.0,
            data_budget_bytes: 4_096,
            relayed_conn_limit: 16,
            reservation_capacity: 128,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RelayError {
    #[error("relay refused the reservation")]
    Refused,
    #[error("no answer from relay")]
    NoAnswer,
    #[error("no relayed connection could be established")]
    NoConnection,
    #[error(transparent)]
    World(#[from] WorldErrorKind),
}

/// Cloneable summary of [`WorldError`] for use inside [`RelayError`].
#[derive(Debug, Error, PartialEq)]
#[error("{0}")]
pub struct WorldErrorKind(pub String);

impl From<WorldError> for RelayError {
    fn from(e: WorldError) -> Self {
        RelayError::World(WorldErrorKind(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CircuitId(pub u64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reservation {
    pub relay: HostId,
    pub client: PeerId,
    /// Where the relay reaches the client (its observed endpoint).
    pub endpoint: Endpoint,
    pub created: SimTime,
    pub expires: SimTime,
    pub data_budget_bytes: u64,
    pub relayed_conn_limit: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reachability {
    #[default]
    Unknown,
    Public,
    Private,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ListenAddr {
    pub endpoint: Endpoint,
    pub transport: Transport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PeerAddressInfo {
    pub observed_public: Vec<ListenAddr>,
    pub reachability: Reachability,
    pub port_mapping_active: bool,
}

impl PeerAddressInfo {
    pub fn add_observed(&mut self, addr: ListenAddr) {
        if !self.observed_public.contains(&addr) {
            self.observed_public.push(addr);
        }
    }

    pub fn addrs_for(&self, transport: Transport) -> impl Iterator<Item = Endpoint> + '_ {
        self.observed_public.iter().filter(move |a| a.transport == transport).map(|a| a.endpoint)
    }
}

/// Messages exchanged end-to-end over a relayed circuit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum CircuitMsg {
    Identify(PeerAddressInfo),
    /// Opens the hole-punch stream.
    Open,
    Connect { attempt: u8, addrs: Vec<ListenAddr>, nat_rtt_ms: Option<f64> },
    Sync { attempt: u8 },
    Ping(u32),
    Pong(u32),
}

impl CircuitMsg {
    pub fn size_bytes(&self) -> u32 {
        match self {
            CircuitMsg::Identify(info) => 64 + 8 * info.observed_public.len() as u32,
            CircuitMsg::Open => 16,
            CircuitMsg::Connect { addrs, nat_rtt_ms, .. } => {
                96 + 8 * addrs.len() as u32 + if nat_rtt_ms.is_some() { 8 } else { 0 }
            }
            CircuitMsg::Sync { .. } => 16,
            CircuitMsg::Ping(_) | CircuitMsg::Pong(_) => transport::PING_BYTES,
        }
    }

    pub fn is_dcutr(&self) -> bool {
        matches!(self, CircuitMsg::Open | CircuitMsg::Connect { .. } | CircuitMsg::Sync { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum RelayFrame {
    Reserve { peer: PeerId },
    ReserveOk { expires: SimTime, observed: Endpoint },
    ReserveDenied,
    IdentifyRequest,
    IdentifyReply { observed: Endpoint },
    Connect { from: PeerId, target: PeerId },
    ConnectOk { circuit: CircuitId, target: PeerId },
    ConnectDenied { target: PeerId },
    Stop { circuit: CircuitId, from: PeerId },
    StopOk { circuit: CircuitId },
    Data { circuit: CircuitId, msg: CircuitMsg },
    Close { circuit: CircuitId },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelayCircuit {
    pub id: CircuitId,
    pub dialer: PeerId,
    pub dialer_ep: Endpoint,
    pub listener: PeerId,
    pub listener_ep: Endpoint,
    /// Bytes forwarded dialer to listener and listener to dialer.
    pub bytes_used: [u64; 2],
    pub budget: u64,
    pub accepted: bool,
    pub open: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelayService {
    pub config: RelayConfig,
    pub reservations: BTreeMap<PeerId, Reservation>,
    pub circuits: BTreeMap<CircuitId, RelayCircuit>,
    next_circuit: u64,
}

impl RelayService {
    pub fn new(config: RelayConfig) -> Self {
        RelayService { config, reservations: BTreeMap::new(), circuits: BTreeMap::new(), next_circuit: 1 }
    }

    fn live_circuits_for(&self, listener: PeerId) -> u32 {
        self.circuits.values().filter(|c| c.open && c.listener == listener).count() as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CircuitEnd {
    pub relay: Endpoint,
    pub remote: PeerId,
    pub dialed: bool,
    pub open: bool,
    pub opened_at: SimTime,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConnectState {
    Pending,
    Ok(CircuitId),
    Denied,
    Abandoned,
}

/// Client-side relay state of a peer.
#[derive(Clone, Debug, Default)]
pub struct RelayClient {
    /// Relays holding a reservation for us, with the reservation expiry.
    pub reservations: BTreeMap<HostId, SimTime>,
    pub reservation_denied: BTreeSet<HostId>,
    pub circuits: BTreeMap<CircuitId, CircuitEnd>,
    pub connects: BTreeMap<HostId, ConnectState>,
    /// Relays we keep mappings alive toward.
    pub keepalive: BTreeSet<HostId>,
    keepalive_armed: bool,
    /// What the other end of each circuit told us about itself.
    pub remote_info: BTreeMap<CircuitId, PeerAddressInfo>,
    pub identify_replies: BTreeMap<(HostId, Transport), Endpoint>,
}

pub(crate) fn relay_send(ctx: &mut Ctx, from_port: u16, to: Endpoint, frame: RelayFrame, size: u32) {
    let pkt = Packet::new(Endpoint::new(ctx.host, from_port), to, PacketKind::UdpDatagram, size).with_tag(Tag::Relay(frame));
    ctx.send(pkt);
}

/// Sends `msg` over `circuit`; returns false when the circuit is unknown or closed.
pub fn circuit_send(stack: &mut PeerStack, ctx: &mut Ctx, circuit: CircuitId, msg: CircuitMsg) -> bool {
    let Some(end) = stack.relay_client.circuits.get(&circuit) else { return false };
    if !end.open {
        return false;
    }
    let size = msg.size_bytes();
    let relay = end.relay;
    let port = stack.quic_port;
    relay_send(ctx, port, relay, RelayFrame::Data { circuit, msg }, size);
    true
}

fn arm_keepalive(stack: &mut PeerStack, ctx: &mut Ctx, relay: HostId) {
    stack.relay_client.keepalive.insert(relay);
    if !stack.relay_client.keepalive_armed {
        stack.relay_client.keepalive_armed = true;
        ctx.timer(KEEPALIVE_INTERVAL_MS, Timer::Keepalive);
    }
}

pub(crate) fn on_keepalive(stack: &mut PeerStack, ctx: &mut Ctx) {
    if stack.relay_client.keepalive.is_empty() {
        stack.relay_client.keepalive_armed = false;
        return;
    }
    for relay in stack.relay_client.keepalive.clone() {
        let udp = Packet::new(Endpoint::new(ctx.host, stack.quic_port), Endpoint::new(relay, crate::world::QUIC_LISTEN_PORT), PacketKind::UdpDatagram, 8)
            .with_tag(Tag::Keepalive);
        ctx.send(udp);
        let tcp = Packet::new(Endpoint::new(ctx.host, stack.tcp_port), Endpoint::new(relay, crate::world::TCP_LISTEN_PORT), PacketKind::TcpAck, 40)
            .with_tag(Tag::Keepalive);
        ctx.send(tcp);
    }
    ctx.timer(KEEPALIVE_INTERVAL_MS, Timer::Keepalive);
}

pub(crate) fn on_frame(stack: &mut PeerStack, ctx: &mut Ctx, pkt: Packet) {
    let Tag::Relay(frame) = pkt.tag else { return };
    let src = pkt.src;
    let to_service = match &frame {
        RelayFrame::Reserve { .. }
        | RelayFrame::IdentifyRequest
        | RelayFrame::Connect { .. }
        | RelayFrame::StopOk { .. } => true,
        RelayFrame::Data { circuit, .. } | RelayFrame::Close { circuit } => {
            stack.relay_service.as_ref().is_some_and(|s| s.circuits.contains_key(circuit))
        }
        _ => false,
    };
    if to_service {
        if stack.relay_service.is_some() || matches!(frame, RelayFrame::IdentifyRequest) {
            service_frame(stack, ctx, pkt.kind, pkt.dst.port, src, frame);
        }
    } else {
        client_frame(stack, ctx, src, frame);
    }
}

fn service_frame(stack: &mut PeerStack, ctx: &mut Ctx, kind: PacketKind, local_port: u16, src: Endpoint, frame: RelayFrame) {
    if let RelayFrame::IdentifyRequest = frame {
        // Any public peer answers Identify, relay or not.
        let reply = Packet::new(Endpoint::new(ctx.host, local_port), src, kind, 48)
            .with_tag(Tag::Relay(RelayFrame::IdentifyReply { observed: src }));
        ctx.send(reply);
        return;
    }
    let port = stack.quic_port;
    let Some(svc) = stack.relay_service.as_mut() else { return };
    match frame {
        RelayFrame::Reserve { peer: client } => {
            svc.reservations.retain(|_, r| ctx.now < r.expires);
            if !svc.reservations.contains_key(&client) && svc.reservations.len() >= svc.config.reservation_capacity {
                relay_send(ctx, port, src, RelayFrame::ReserveDenied, 16);
                return;
            }
            let r = Reservation {
                relay: ctx.host,
                client,
                endpoint: src,
                created: ctx.now,
                expires: ctx.now + svc.config.reservation_duration_ms,
                data_budget_bytes: svc.config.data_budget_bytes,
                relayed_conn_limit: svc.config.relayed_conn_limit,
            };
            let expires = r.expires;
            svc.reservations.insert(client, r);
            relay_send(ctx, port, src, RelayFrame::ReserveOk { expires, observed: src }, 48);
        }
        RelayFrame::Connect { from: dialer, target } => {
            let live = svc.reservations.get(&target).filter(|r| ctx.now < r.expires).cloned();
            let Some(res) = live else {
                relay_send(ctx, port, src, RelayFrame::ConnectDenied { target }, 16);
                return;
            };
            if svc.live_circuits_for(target) >= res.relayed_conn_limit {
                relay_send(ctx, port, src, RelayFrame::ConnectDenied { target }, 16);
                return;
            }
            // relay address in the high bits keeps ids unique across relays
            let id = CircuitId((u64::from(ctx.host.0) << 32) | svc.next_circuit);
            svc.next_circuit += 1;
            svc.circuits.insert(
                id,
                RelayCircuit {
                    id,
                    dialer,
                    dialer_ep: src,
                    listener: target,
                    listener_ep: res.endpoint,
                    bytes_used: [0, 0],
                    budget: res.data_budget_bytes,
                    accepted: false,
                    open: true,
                },
            );
            relay_send(ctx, port, res.endpoint, RelayFrame::Stop { circuit: id, from: dialer }, 32);
        }
        RelayFrame::StopOk { circuit } => {
            if let Some(c) = svc.circuits.get_mut(&circuit) {
                if c.open && src == c.listener_ep && !c.accepted {
                    c.accepted = true;
                    let (to, target) = (c.dialer_ep, c.listener);
                    relay_send(ctx, port, to, RelayFrame::ConnectOk { circuit, target }, 32);
                }
            }
        }
        RelayFrame::Data { circuit, msg } => {
            let Some(c) = svc.circuits.get_mut(&circuit) else { return };
            if !c.open || !c.accepted {
                return;
            }
            let (dir, to) = if src == c.dialer_ep {
                (0, c.listener_ep)
            } else if src == c.listener_ep {
                (1, c.dialer_ep)
            } else {
                return;
            };
            let size = u64::from(msg.size_bytes());
            if c.bytes_used[dir] + size > c.budget {
                c.open = false;
                let (a, b) = (c.dialer_ep, c.listener_ep);
                relay_send(ctx, port, a, RelayFrame::Close { circuit }, 16);
                relay_send(ctx, port, b, RelayFrame::Close { circuit }, 16);
                return;
            }
            c.bytes_used[dir] += size;
            relay_send(ctx, port, to, RelayFrame::Data { circuit, msg }, size as u32);
        }
        RelayFrame::Close { circuit } => {
            if let Some(c) = svc.circuits.get_mut(&circuit) {
                if c.open && (src == c.dialer_ep || src == c.listener_ep) {
                    c.open = false;
                    let other = if src == c.dialer_ep { c.listener_ep } else { c.dialer_ep };
                    relay_send(ctx, port, other, RelayFrame::Close { circuit }, 16);
                }
            }
        }
        _ => {}
    }
}

fn client_frame(stack: &mut PeerStack, ctx: &mut Ctx, src: Endpoint, frame: RelayFrame) {
    let port = stack.quic_port;
    let rc = &mut stack.relay_client;
    match frame {
        RelayFrame::ReserveOk { expires, observed } => {
            rc.reservations.insert(src.host, expires);
            rc.identify_replies.insert((src.host, Transport::Quic), observed);
        }
        RelayFrame::ReserveDenied => {
            rc.reservation_denied.insert(src.host);
        }
        RelayFrame::IdentifyReply { observed } => {
            rc.identify_replies.insert((src.host, Transport::Quic), observed);
        }
        RelayFrame::ConnectOk { circuit, target } => {
            let state = rc.connects.get(&src.host).cloned();
            match state {
                Some(ConnectState::Pending) if !rc.connects.values().any(|s| matches!(s, ConnectState::Ok(_))) => {
                    rc.connects.insert(src.host, ConnectState::Ok(circuit));
                    rc.circuits.insert(
                        circuit,
                        CircuitEnd { relay: src, remote: target, dialed: true, open: true, opened_at: ctx.now },
                    );
                }
                _ => {
                    // A slower relay answered after another one won.
                    rc.connects.insert(src.host, ConnectState::Abandoned);
                    relay_send(ctx, port, src, RelayFrame::Close { circuit }, 16);
                }
            }
        }
        RelayFrame::ConnectDenied { .. } => {
            if matches!(rc.connects.get(&src.host), Some(ConnectState::Pending)) {
                rc.connects.insert(src.host, ConnectState::Denied);
            }
        }
        RelayFrame::Stop { circuit, from } => {
            rc.circuits.insert(circuit, CircuitEnd { relay: src, remote: from, dialed: false, open: true, opened_at: ctx.now });
            relay_send(ctx, port, src, RelayFrame::StopOk { circuit }, 16);
        }
        RelayFrame::Close { circuit } => {
            if let Some(c) = rc.circuits.get_mut(&circuit) {
                c.open = false;
            }
        }
        RelayFrame::Data { circuit, msg } => {
            if !rc.circuits.get(&circuit).is_some_and(|c| c.open) {
                return;
            }
            match msg {
                CircuitMsg::Ping(seq) => {
                    circuit_send(stack, ctx, circuit, CircuitMsg::Pong(seq));
                }
                CircuitMsg::Pong(seq) => stack.pings.record(seq, ctx.now),
                CircuitMsg::Identify(info) => {
                    rc.remote_info.insert(circuit, info);
                }
                msg @ (CircuitMsg::Open | CircuitMsg::Connect { .. } | CircuitMsg::Sync { .. }) => {
                    crate::dcutr::on_circuit_msg(stack, ctx, circuit, msg);
                }
            }
        }
        _ => {}
    }
}

/// TCP segments carrying relay frames bypass the connection table: the
/// connection to the relay itself is not modelled.
pub(crate) fn on_tcp_frame(stack: &mut PeerStack, ctx: &mut Ctx, pkt: &Packet) -> bool {
    let Tag::Relay(frame) = &pkt.tag else { return false };
    match frame {
        RelayFrame::IdentifyRequest => {
            let reply = Packet::new(pkt.dst, pkt.src, PacketKind::TcpAck, 48)
                .with_tag(Tag::Relay(RelayFrame::IdentifyReply { observed: pkt.src }));
            ctx.send(reply);
        }
        RelayFrame::IdentifyReply { observed } => {
            stack.relay_client.identify_replies.insert((pkt.src.host, Transport::Tcp), *observed);
        }
        _ => {}
    }
    true
}

/// A relayed connection as seen from outside: `dialer` connected through
/// `relay` to `listener`, which holds the reservation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelayedConn {
    pub circuit: CircuitId,
    pub relay: HostId,
    pub dialer: HostId,
    pub listener: HostId,
    pub established_at: SimTime,
}

impl World {
    /// Requests a reservation for `client` at `relay`.
    pub fn reserve(&mut self, client: HostId, relay: HostId) -> Result<Reservation, RelayError> {
        let relay_ep = self.peer(relay)?.listen_endpoint(Transport::Quic);
        let client_id = self.peer(client)?.peer_id;
        self.with_peer(client, |s, c| {
            s.relay_client.reservation_denied.remove(&relay);
            relay_send(c, s.quic_port, relay_ep, RelayFrame::Reserve { peer: client_id }, 32);
            arm_keepalive(s, c, relay);
        })?;
        let deadline = self.now() + CONTROL_TIMEOUT_MS;
        self.run_until(deadline, |w| {
            w.peer(client).map_or(true, |p| {
                p.relay_client.reservations.contains_key(&relay) || p.relay_client.reservation_denied.contains(&relay)
            })
        });
        let stack = self.peer(client)?;
        if stack.relay_client.reservation_denied.contains(&relay) {
            return Err(RelayError::Refused);
        }
        if !stack.relay_client.reservations.contains_key(&relay) {
            return Err(RelayError::NoAnswer);
        }
        let svc = self.relay_service(relay).ok_or(RelayError::Refused)?;
        svc.reservations.get(&client_id).cloned().ok_or(RelayError::NoAnswer)
    }

    pub fn relay_service(&self, relay: HostId) -> Option<&RelayService> {
        self.peer(relay).ok().and_then(|p| p.relay_service.as_ref())
    }

    pub fn relay_service_mut(&mut self, relay: HostId) -> Option<&mut RelayService> {
        self.peer_mut(relay).ok().and_then(|p| p.relay_service.as_mut())
    }

    /// Learns `peer`'s observed endpoints from `helper` over both transports.
    pub fn identify_with(&mut self, peer: HostId, helper: HostId) -> Result<Vec<ListenAddr>, WorldError> {
        let (tcp_ep, quic_ep) = {
            let h = self.peer(helper)?;
            (h.listen_endpoint(Transport::Tcp), h.listen_endpoint(Transport::Quic))
        };
        self.with_peer(peer, |s, c| {
            let tcp = Packet::new(Endpoint::new(c.host, s.tcp_port), tcp_ep, PacketKind::TcpAck, 40)
                .with_tag(Tag::Relay(RelayFrame::IdentifyRequest));
            c.send(tcp);
            relay_send(c, s.quic_port, quic_ep, RelayFrame::IdentifyRequest, 40);
        })?;
        let deadline = self.now() + CONTROL_TIMEOUT_MS;
        self.run_until(deadline, |w| {
            w.peer(peer).map_or(true, |p| {
                p.relay_client.identify_replies.contains_key(&(helper, Transport::Tcp))
                    && p.relay_client.identify_replies.contains_key(&(helper, Transport::Quic))
            })
        });
        let stack = self.peer_mut(peer)?;
        let mut found = Vec::new();
        for t in [Transport::Tcp, Transport::Quic] {
            if let Some(ep) = stack.relay_client.identify_replies.get(&(helper, t)).copied() {
                let addr = ListenAddr { endpoint: ep, transport: t };
                if stack.supports(t) {
                    stack.info.add_observed(addr);
                }
                found.push(addr);
            }
        }
        Ok(found)
    }

    /// Connects `dialer` to the peer `target` through every relay in
    /// `relays` at once; the first relay to complete the circuit wins.
    pub fn relay_connect(&mut self, dialer: HostId, target: PeerId, relays: &[HostId]) -> Result<RelayedConn, RelayError> {
        let mut eps = Vec::new();
        for r in relays {
            eps.push((*r, self.peer(*r)?.listen_endpoint(Transport::Quic)));
        }
        self.with_peer(dialer, |s, c| {
            for (r, ep) in &eps {
                s.relay_client.connects.insert(*r, ConnectState::Pending);
                relay_send(c, s.quic_port, *ep, RelayFrame::Connect { from: s.peer_id, target }, 64);
                arm_keepalive(s, c, *r);
            }
        })?;
        let deadline = self.now() + RELAY_CONNECT_TIMEOUT_MS;
        let done = |w: &World| {
            w.peer(dialer).map_or(true, |p| {
                let states: Vec<_> = relays.iter().filter_map(|r| p.relay_client.connects.get(r)).collect();
                states.iter().any(|s| matches!(s, ConnectState::Ok(_)))
                    || states.iter().all(|s| matches!(s, ConnectState::Denied))
            })
        };
        self.run_until(deadline, done);
        let stack = self.peer_mut(dialer)?;
        let won = relays.iter().find_map(|r| match stack.relay_client.connects.get(r) {
            Some(ConnectState::Ok(c)) => Some((*r, *c)),
            _ => None,
        });
        for r in relays {
            if matches!(stack.relay_client.connects.get(r), Some(ConnectState::Pending)) {
                stack.relay_client.connects.insert(*r, ConnectState::Abandoned);
            }
        }
        let (relay, circuit) = won.ok_or(RelayError::NoConnection)?;
        let listener = self.peer_host(target).ok_or(RelayError::NoConnection)?;
        Ok(RelayedConn { circuit, relay, dialer, listener, established_at: self.now() })
    }

    pub fn circuit(&self, conn: &RelayedConn) -> Option<&RelayCircuit> {
        self.relay_service(conn.relay)?.circuits.get(&conn.circuit)
    }

    pub fn circuit_open(&self, conn: &RelayedConn) -> bool {
        self.circuit(conn).is_some_and(|c| c.open)
    }

    /// Sends `msg` from `from` over the relayed connection.
    pub fn circuit_send(&mut self, from: HostId, conn: &RelayedConn, msg: CircuitMsg) -> Result<bool, WorldError> {
        self.with_peer(from, |s, c| circuit_send(s, c, conn.circuit, msg))
    }

    /// Closes the relayed connection from `from`'s side.
    pub fn close_circuit(&mut self, from: HostId, conn: &RelayedConn) -> Result<(), WorldError> {
        self.with_peer(from, |s, c| {
            if let Some(end) = s.relay_client.circuits.get_mut(&conn.circuit) {
                if end.open {
                    end.open = false;
                    let relay = end.relay;
                    relay_send(c, s.quic_port, relay, RelayFrame::Close { circuit: conn.circuit }, 16);
                }
            }
        })
    }

    /// Both ends tell each other their address info over the circuit.
    /// Returns `(dialer's view of listener, listener's view of dialer)`.
    pub fn identify_exchange(&mut self, conn: &RelayedConn) -> Result<(Option<PeerAddressInfo>, Option<PeerAddressInfo>), WorldError> {
        for host in [conn.dialer, conn.listener] {
            let info = self.peer(host)?.info.clone();
            self.circuit_send(host, conn, CircuitMsg::Identify(info))?;
        }
        let deadline = self.now() + CONTROL_TIMEOUT_MS;
        let id = conn.circuit;
        self.run_until(deadline, |w| {
            [conn.dialer, conn.listener]
                .iter()
                .all(|h| w.peer(*h).map_or(true, |p| p.relay_client.remote_info.contains_key(&id)))
        });
        Ok((
            self.peer(conn.dialer)?.relay_client.remote_info.get(&id).cloned(),
            self.peer(conn.listener)?.relay_client.remote_info.get(&id).cloned(),
        ))
    }

    /// Installs a port mapping for `peer` on its NAT (both listen sockets,
    /// external port equal to the internal one). With `lies` the peer only
    /// claims the mapping.
    pub fn enable_port_mapping(&mut self, peer: HostId, lies: bool) -> Result<(), WorldError> {
        let public = self.nat_public(peer);
        let (tcp, quic) = {
            let p = self.peer(peer)?;
            (p.tcp_port, p.quic_port)
        };
        if !lies {
            if let Some(nat) = self.nat_of_mut(peer) {
                nat.install_static_mapping(crate::nat::Proto::Tcp, Endpoint::new(peer, tcp), tcp);
                nat.install_static_mapping(crate::nat::Proto::Udp, Endpoint::new(peer, quic), quic);
            }
        }
        let stack = self.peer_mut(peer)?;
        stack.info.port_mapping_active = true;
        if let Some(public) = public {
            stack.info.add_observed(ListenAddr { endpoint: Endpoint::new(public, tcp), transport: Transport::Tcp });
            stack.info.add_observed(ListenAddr { endpoint: Endpoint::new(public, quic), transport: Transport::Quic });
        }
        Ok(())
    }

    /// Asks each helper to dial back every advertised address of `peer`.
    pub fn autonat_check(&mut self, peer: HostId, helpers: &[HostId]) -> Result<Reachability, WorldError> {
        if helpers.is_empty() {
            return Ok(Reachability::Unknown);
        }
        let mut addrs = self.peer(peer)?.info.observed_public.clone();
        if !self.is_private(peer) {
            for t in [Transport::Tcp, Transport::Quic] {
                let a = ListenAddr { endpoint: self.peer(peer)?.listen_endpoint(t), transport: t };
                if !addrs.contains(&a) {
                    addrs.push(a);
                }
            }
        }
        let mut reachable = false;
        'outer: for helper in helpers {
            for a in &addrs {
                if !self.peer(peer)?.supports(a.transport) {
                    continue;
                }
                let out = self.dial_and_wait(*helper, a.endpoint, a.transport, AUTONAT_TIMEOUT_MS)?;
                if matches!(out, transport::DialOutcome::Ready { .. }) {
                    reachable = true;
                    break 'outer;
                }
                debug_assert!(matches!(out, transport::DialOutcome::Failed(FailReason::Timeout | FailReason::Reset)));
            }
        }
        let r = if reachable { Reachability::Public } else { Reachability::Private };
        self.peer_mut(peer)?.info.reachability = r;
        Ok(r)
    }
}
