//! Stateful NAT device: mapping and filtering behaviours, port allocation,
//! idle expiry, static port mappings and the unsolicited-traffic denylist.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{HostId, RandomStream, SimTime};
use crate::transport::{Packet, PacketKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proto {
    Tcp,
    Udp,
}

/// A `(host, port)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub host: HostId,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: HostId, port: u16) -> Self {
        Endpoint { host, port }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed endpoint {0:?}")]
pub struct ParseEndpointError(pub String);

impl FromStr for Endpoint {
    type Err = ParseEndpointError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseEndpointError(s.to_owned());
        let (ip, port) = s.rsplit_once(':').ok_or_else(err)?;
        let ip: std::net::Ipv4Addr = ip.parse().map_err(|_| err())?;
        let port: u16 = port.parse().map_err(|_| err())?;
        Ok(Endpoint::new(HostId::from(ip), port))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MappingBehavior {
    /// Endpoint-independent: one external port per internal endpoint.
    EIM,
    /// Address-dependent: one external port per (internal endpoint, destination host).
    ADM,
    /// Address and port dependent: one external port per (internal endpoint, destination endpoint).
    APDM,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilteringBehavior {
    EIF,
    ADF,
    APDF,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PortAllocation {
    Sequential,
    Random,
    PreserveBestEffort,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Archetype {
    FullCone,
    RestrictedCone,
    PortRestrictedCone,
    Symmetric,
}

impl Archetype {
    pub const ALL: [Archetype; 4] =
        [Archetype::FullCone, Archetype::RestrictedCone, Archetype::PortRestrictedCone, Archetype::Symmetric];

    pub fn is_cone(self) -> bool {
        self != Archetype::Symmetric
    }
}

/// Inclusive external port range a NAT allocates from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortRange {
    pub first: u16,
    pub last: u16,
}

impl PortRange {
    pub const FULL: PortRange = PortRange { first: 0, last: u16::MAX };

    pub fn size(&self) -> u32 {
        self.last as u32 - self.first as u32 + 1
    }

    pub fn contains(&self, port: u16) -> bool {
        (self.first..=self.last).contains(&port)
    }
}

impl Default for PortRange {
    fn default() -> Self {
        PortRange::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NatConfig {
    pub mapping: MappingBehavior,
    pub filtering: FilteringBehavior,
    pub port_alloc: PortAllocation,
    pub mapping_ttl_ms: f64,
    pub max_sessions: usize,
    pub denylist_on_unsolicited: bool,
    pub denylist_duration_ms: f64,
    pub rst_on_unsolicited_tcp: bool,
    pub port_range: PortRange,
    pub sequential_start: u16,
    /// Denylist a source host after this many unsolicited inbound packets within one second.
    pub scan_limit: Option<u32>,
}

impl Default for NatConfig {
    fn default() -> Self {
        NatConfig {
            mapping: MappingBehavior::EIM,
            filtering: FilteringBehavior::APDF,
            port_alloc: PortAllocation::Random,
            mapping_ttl_ms: 30_000.0,
            max_sessions: 65_536,
            denylist_on_unsolicited: false,
            denylist_duration_ms: 60_000.0,
            rst_on_unsolicited_tcp: false,
            port_range: PortRange::FULL,
            sequential_start: 40_000,
            scan_limit: None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum NatConfigError {
    #[error("mapping_ttl_ms must be > 0, got {0}")]
    MappingTtl(f64),
    #[error("max_sessions must be >= 1")]
    MaxSessions,
    #[error("port range {0}..={1} is empty")]
    PortRange(u16, u16),
}

impl NatConfig {
    pub fn with_behavior(mapping: MappingBehavior, filtering: FilteringBehavior) -> Self {
        NatConfig { mapping, filtering, ..NatConfig::default() }
    }

    pub fn for_archetype(archetype: Archetype) -> Self {
        use FilteringBehavior::*;
        use MappingBehavior::*;
        match archetype {
            Archetype::FullCone => Self::with_behavior(EIM, EIF),
            Archetype::RestrictedCone => Self::with_behavior(EIM, ADF),
            Archetype::PortRestrictedCone => Self::with_behavior(EIM, APDF),
            Archetype::Symmetric => Self::with_behavior(APDM, APDF),
        }
    }

    pub fn validate(&self) -> Result<(), NatConfigError> {
        if !(self.mapping_ttl_ms > 0.0) {
            return Err(NatConfigError::MappingTtl(self.mapping_ttl_ms));
        }
        if self.max_sessions == 0 {
            return Err(NatConfigError::MaxSessions);
        }
        if self.port_range.first > self.port_range.last {
            return Err(NatConfigError::PortRange(self.port_range.first, self.port_range.last));
        }
        Ok(())
    }

    pub fn archetype(&self) -> Archetype {
        archetype(self)
    }

    /// Endpoint-dependent mapping: the external port depends on the destination.
    pub fn is_edm(&self) -> bool {
        self.mapping != MappingBehavior::EIM
    }
}

pub fn archetype(config: &NatConfig) -> Archetype {
    match (config.mapping, config.filtering) {
        (MappingBehavior::EIM, FilteringBehavior::EIF) => Archetype::FullCone,
        (MappingBehavior::EIM, FilteringBehavior::ADF) => Archetype::RestrictedCone,
        (MappingBehavior::EIM, FilteringBehavior::APDF) => Archetype::PortRestrictedCone,
        (MappingBehavior::ADM | MappingBehavior::APDM, _) => Archetype::Symmetric,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MappingKey {
    Endpoint { proto: Proto, internal: Endpoint },
    Address { proto: Proto, internal: Endpoint, dest: HostId },
    AddressPort { proto: Proto, internal: Endpoint, dest: Endpoint },
}

impl MappingKey {
    fn for_packet(behavior: MappingBehavior, proto: Proto, internal: Endpoint, dest: Endpoint) -> Self {
        match behavior {
            MappingBehavior::EIM => MappingKey::Endpoint { proto, internal },
            MappingBehavior::ADM => MappingKey::Address { proto, internal, dest: dest.host },
            MappingBehavior::APDM => MappingKey::AddressPort { proto, internal, dest },
        }
    }

    pub fn proto(&self) -> Proto {
        match *self {
            MappingKey::Endpoint { proto, .. }
            | MappingKey::Address { proto, .. }
            | MappingKey::AddressPort { proto, .. } => proto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NatMapping {
    pub internal: Endpoint,
    pub external: Endpoint,
    pub key: MappingKey,
    pub contacted: BTreeSet<Endpoint>,
    pub last_activity: SimTime,
    /// Installed by a port-mapping protocol: endpoint-independent filtering, never expires.
    pub is_static: bool,
}

/// Whether `filtering` lets a packet from `src` through `mapping`.
pub fn admits(filtering: FilteringBehavior, mapping: &NatMapping, src: Endpoint) -> bool {
    if mapping.is_static {
        return true;
    }
    match filtering {
        FilteringBehavior::EIF => true,
        FilteringBehavior::ADF => mapping.contacted.iter().any(|c| c.host == src.host),
        FilteringBehavior::APDF => mapping.contacted.contains(&src),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutboundError {
    /// No matching mapping and the table is at `max_sessions` (or the port range is exhausted).
    SessionTableFull,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropReason {
    Denylisted,
    NoMapping,
    Filtered,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InboundVerdict {
    Deliver(Packet),
    Drop(DropReason),
    /// Unsolicited TCP rejected; the caller sends a RST back to the source.
    RejectRst(DropReason),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NatCounters {
    pub outbound: u64,
    pub inbound_delivered: u64,
    pub inbound_dropped: u64,
    pub rst_sent: u64,
    pub table_full: u64,
    pub denylist_additions: u64,
}

#[derive(Clone, Debug)]
pub struct NatState {
    config: NatConfig,
    public_host: HostId,
    table: BTreeMap<MappingKey, NatMapping>,
    by_external: BTreeMap<(Proto, u16), MappingKey>,
    static_by_internal: BTreeMap<(Proto, Endpoint), MappingKey>,
    denylist: BTreeMap<HostId, SimTime>,
    unsolicited: BTreeMap<HostId, VecDeque<SimTime>>,
    next_sequential_port: u16,
    next_expiry_check: SimTime,
    rng: RandomStream,
    counters: NatCounters,
}

impl NatState {
    pub fn new(config: NatConfig, public_host: HostId, seed: u64) -> Result<Self, NatConfigError> {
        config.validate()?;
        let start = if config.port_range.contains(config.sequential_start) {
            config.sequential_start
        } else {
            config.port_range.first
        };
        Ok(NatState {
            public_host,
            table: BTreeMap::new(),
            by_external: BTreeMap::new(),
            static_by_internal: BTreeMap::new(),
            denylist: BTreeMap::new(),
            unsolicited: BTreeMap::new(),
            next_sequential_port: start,
            next_expiry_check: SimTime::ZERO,
            rng: RandomStream::new(seed, &format!("nat-{public_host}")),
            counters: NatCounters::default(),
            config,
        })
    }

    pub fn config(&self) -> &NatConfig {
        &self.config
    }

    pub fn public_host(&self) -> HostId {
        self.public_host
    }

    pub fn mappings(&self) -> impl Iterator<Item = &NatMapping> {
        self.table.values()
    }

    pub fn session_count(&self) -> usize {
        self.table.len()
    }

    pub fn counters(&self) -> &NatCounters {
        &self.counters
    }

    pub fn is_denylisted(&self, host: HostId, now: SimTime) -> bool {
        self.denylist.get(&host).is_some_and(|&until| now < until)
    }

    pub fn denylist(&self) -> &BTreeMap<HostId, SimTime> {
        &self.denylist
    }

    /// The mapping currently holding `external` on `proto`, if any.
    pub fn mapping_at(&self, proto: Proto, port: u16) -> Option<&NatMapping> {
        self.by_external.get(&(proto, port)).and_then(|k| self.table.get(k))
    }

    /// Installs a port-forwarding entry (as a UPnP/PMP client would request).
    pub fn install_static_mapping(&mut self, proto: Proto, internal: Endpoint, external_port: u16) -> Endpoint {
        let key = MappingKey::Endpoint { proto, internal };
        let external = Endpoint::new(self.public_host, external_port);
        if let Some(old) = self.by_external.remove(&(proto, external_port)) {
            self.table.remove(&old);
        }
        self.table.insert(
            key,
            NatMapping {
                internal,
                external,
                key,
                contacted: BTreeSet::new(),
                last_activity: SimTime::ZERO,
                is_static: true,
            },
        );
        self.by_external.insert((proto, external_port), key);
        self.static_by_internal.insert((proto, internal), key);
        external
    }

    /// Drops idle mappings (`now - last_activity > mapping_ttl`) and lapsed denylist entries.
    pub fn expire(&mut self, now: SimTime) {
        if now < self.next_expiry_check {
            return;
        }
        let ttl = self.config.mapping_ttl_ms;
        let stale: Vec<MappingKey> = self
            .table
            .iter()
            .filter(|(_, m)| !m.is_static && now - m.last_activity > ttl)
            .map(|(k, _)| *k)
            .collect();
        for key in stale {
            if let Some(m) = self.table.remove(&key) {
                self.by_external.remove(&(key.proto(), m.external.port));
            }
        }
        self.denylist.retain(|_, until| now < *until);
        // Activity only moves forward, so the oldest survivor bounds the next expiry.
        let oldest = self.table.values().filter(|m| !m.is_static).map(|m| m.last_activity).min();
        let mut next = oldest.map_or(f64::INFINITY, |t| t.as_ms() + ttl);
        if let Some(until) = self.denylist.values().min() {
            next = next.min(until.as_ms());
        }
        self.next_expiry_check = if next.is_finite() { SimTime::from_ms(next) } else { SimTime::from_ms(f64::MAX) };
    }

    pub fn process_outbound(&mut self, pkt: &Packet, now: SimTime) -> Result<Packet, OutboundError> {
        self.expire(now);
        let proto = pkt.kind.proto();
        let key = match self.static_by_internal.get(&(proto, pkt.src)) {
            Some(k) => *k,
            None => MappingKey::for_packet(self.config.mapping, proto, pkt.src, pkt.dst),
        };
        if !self.table.contains_key(&key) {
            if self.table.len() >= self.config.max_sessions {
                self.counters.table_full += 1;
                return Err(OutboundError::SessionTableFull);
            }
            let Some(port) = self.allocate_port(proto, pkt.src.port) else {
                self.counters.table_full += 1;
                return Err(OutboundError::SessionTableFull);
            };
            let external = Endpoint::new(self.public_host, port);
            self.table.insert(
                key,
                NatMapping {
                    internal: pkt.src,
                    external,
                    key,
                    contacted: BTreeSet::new(),
                    last_activity: now,
                    is_static: false,
                },
            );
            self.by_external.insert((proto, port), key);
            self.next_expiry_check = self.next_expiry_check.min(now + self.config.mapping_ttl_ms);
        }
        let mapping = self.table.get_mut(&key).expect("present");
        mapping.contacted.insert(pkt.dst);
        mapping.last_activity = now;
        self.counters.outbound += 1;
        let mut out = pkt.clone();
        out.src = mapping.external;
        Ok(out)
    }

    pub fn process_inbound(&mut self, pkt: &Packet, now: SimTime) -> InboundVerdict {
        debug_assert_eq!(pkt.dst.host, self.public_host);
        self.expire(now);
        if self.is_denylisted(pkt.src.host, now) {
            self.counters.inbound_dropped += 1;
            return InboundVerdict::Drop(DropReason::Denylisted);
        }
        let proto = pkt.kind.proto();
        let filtering = self.config.filtering;
        let verdict = match self.by_external.get(&(proto, pkt.dst.port)).copied() {
            None => Err(DropReason::NoMapping),
            Some(key) => {
                let mapping = self.table.get_mut(&key).expect("index consistent");
                if admits(filtering, mapping, pkt.src) {
                    if !mapping.is_static {
                        mapping.last_activity = now;
                    }
                    let mut delivered = pkt.clone();
                    delivered.dst = mapping.internal;
                    Ok(delivered)
                } else {
                    Err(DropReason::Filtered)
                }
            }
        };
        match verdict {
            Ok(p) => {
                self.counters.inbound_delivered += 1;
                InboundVerdict::Deliver(p)
            }
            Err(reason) => {
                self.counters.inbound_dropped += 1;
                self.note_unsolicited(pkt.src.host, now);
                if self.config.rst_on_unsolicited_tcp && proto == Proto::Tcp && pkt.kind != PacketKind::TcpRst {
                    self.counters.rst_sent += 1;
                    InboundVerdict::RejectRst(reason)
                } else {
                    InboundVerdict::Drop(reason)
                }
            }
        }
    }

    fn note_unsolicited(&mut self, src: HostId, now: SimTime) {
        let until = now + self.config.denylist_duration_ms;
        if self.config.denylist_on_unsolicited {
            self.deny(src, until);
            return;
        }
        if let Some(limit) = self.config.scan_limit {
            let window = self.unsolicited.entry(src).or_default();
            window.push_back(now);
            while window.front().is_some_and(|&t| now - t >= 1_000.0) {
                window.pop_front();
            }
            if window.len() as u32 > limit {
                window.clear();
                self.deny(src, until);
            }
        }
    }

    fn deny(&mut self, src: HostId, until: SimTime) {
        self.denylist.insert(src, until);
        self.counters.denylist_additions += 1;
        self.next_expiry_check = self.next_expiry_check.min(until);
    }

    fn port_in_use(&self, proto: Proto, port: u16) -> bool {
        self.by_external.contains_key(&(proto, port))
    }

    fn allocate_port(&mut self, proto: Proto, internal_port: u16) -> Option<u16> {
        let range = self.config.port_range;
        let in_use = self.by_external.range((proto, range.first)..=(proto, range.last)).count() as u32;
        if in_use >= range.size() {
            return None;
        }
        match self.config.port_alloc {
            PortAllocation::Sequential => {
                let mut port = self.next_sequential_port;
                while self.port_in_use(proto, port) {
                    port = if port == range.last { range.first } else { port + 1 };
                }
                self.next_sequential_port = if port == range.last { range.first } else { port + 1 };
                Some(port)
            }
            PortAllocation::Random => Some(self.random_free_port(proto)),
            PortAllocation::PreserveBestEffort => {
                if range.contains(internal_port) && !self.port_in_use(proto, internal_port) {
                    Some(internal_port)
                } else {
                    Some(self.random_free_port(proto))
                }
            }
        }
    }

    fn random_free_port(&mut self, proto: Proto) -> u16 {
        let range = self.config.port_range;
        loop {
            let port = self.rng.random_range(range.first..=range.last);
            if !self.port_in_use(proto, port) {
                return port;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::PacketKind;
    use proptest::prelude::*;

    const PUB: HostId = HostId(0xC633_6405); // 198.51.100.5
    const INSIDE: HostId = HostId(0xC0A8_0002);

    fn ep(host: u32, port: u16) -> Endpoint {
        Endpoint::new(HostId(host), port)
    }

    fn inside(port: u16) -> Endpoint {
        Endpoint::new(INSIDE, port)
    }

    fn nat(mapping: MappingBehavior, filtering: FilteringBehavior) -> NatState {
        NatState::new(NatConfig::with_behavior(mapping, filtering), PUB, 1).unwrap()
    }

    fn udp(src: Endpoint, dst: Endpoint) -> Packet {
        Packet::new(src, dst, PacketKind::UdpDatagram, 30)
    }

    fn t(ms: f64) -> SimTime {
        SimTime::from_ms(ms)
    }

    #[test]
    fn eim_reuses_external_endpoint_across_destinations() {
        let mut n = nat(MappingBehavior::EIM, FilteringBehavior::APDF);
        let a = n.process_outbound(&udp(inside(4001), ep(10, 80)), t(0.0)).unwrap();
        let b = n.process_outbound(&udp(inside(4001), ep(11, 9000)), t(1.0)).unwrap();
        assert_eq!(a.src, b.src);
        assert_eq!(a.src.host, PUB);
    }

    #[test]
    fn apdm_allocates_per_destination_endpoint() {
        let mut n = nat(MappingBehavior::APDM, FilteringBehavior::APDF);
        let a = n.process_outbound(&udp(inside(4001), ep(10, 80)), t(0.0)).unwrap();
        let b = n.process_outbound(&udp(inside(4001), ep(10, 81)), t(0.0)).unwrap();
        assert_ne!(a.src.port, b.src.port);
    }

    #[test]
    fn adm_allocates_per_destination_host() {
        let mut n = nat(MappingBehavior::ADM, FilteringBehavior::APDF);
        let a = n.process_outbound(&udp(inside(4001), ep(10, 80)), t(0.0)).unwrap();
        let b = n.process_outbound(&udp(inside(4001), ep(10, 81)), t(0.0)).unwrap();
        let c = n.process_outbound(&udp(inside(4001), ep(12, 80)), t(0.0)).unwrap();
        assert_eq!(a.src, b.src);
        assert_ne!(a.src, c.src);
    }

    #[test]
    fn sequential_allocation_counts_up_from_start() {
        let mut cfg = NatConfig::with_behavior(MappingBehavior::APDM, FilteringBehavior::APDF);
        cfg.port_alloc = PortAllocation::Sequential;
        let mut n = NatState::new(cfg, PUB, 1).unwrap();
        let a = n.process_outbound(&udp(inside(1), ep(10, 80)), t(0.0)).unwrap();
        let b = n.process_outbound(&udp(inside(1), ep(10, 81)), t(0.0)).unwrap();
        assert_eq!((a.src.port, b.src.port), (40_000, 40_001));
    }

    #[test]
    fn preserve_keeps_internal_port_when_free() {
        let mut cfg = NatConfig::with_behavior(MappingBehavior::APDM, FilteringBehavior::APDF);
        cfg.port_alloc = PortAllocation::PreserveBestEffort;
        let mut n = NatState::new(cfg, PUB, 1).unwrap();
        let a = n.process_outbound(&udp(inside(4001), ep(10, 80)), t(0.0)).unwrap();
        let b = n.process_outbound(&udp(inside(4001), ep(10, 81)), t(0.0)).unwrap();
        assert_eq!(a.src.port, 4001);
        assert_ne!(b.src.port, 4001);
    }

    #[test]
    fn full_cone_admits_strangers() {
        let mut n = nat(MappingBehavior::EIM, FilteringBehavior::EIF);
        let out = n.process_outbound(&udp(inside(4001), ep(10, 80)), t(0.0)).unwrap();
        match n.process_inbound(&udp(ep(99, 1234), out.src), t(1.0)) {
            InboundVerdict::Deliver(p) => assert_eq!(p.dst, inside(4001)),
            v => panic!("expected delivery, got {v:?}"),
        }
    }

    #[test]
    fn port_restricted_rejects_other_port_of_contacted_host() {
        let mut n = nat(MappingBehavior::EIM, FilteringBehavior::APDF);
        let out = n.process_outbound(&udp(inside(4001), ep(10, 80)), t(0.0)).unwrap();
        assert_eq!(n.process_inbound(&udp(ep(10, 81), out.src), t(1.0)), InboundVerdict::Drop(DropReason::Filtered));
        assert!(matches!(n.process_inbound(&udp(ep(10, 80), out.src), t(1.0)), InboundVerdict::Deliver(_)));
    }

    #[test]
    fn restricted_cone_admits_any_port_of_contacted_host() {
        let mut n = nat(MappingBehavior::EIM, FilteringBehavior::ADF);
        let out = n.process_outbound(&udp(inside(4001), ep(10, 80)), t(0.0)).unwrap();
        assert!(matches!(n.process_inbound(&udp(ep(10, 81), out.src), t(1.0)), InboundVerdict::Deliver(_)));
        assert_eq!(n.process_inbound(&udp(ep(11, 80), out.src), t(1.0)), InboundVerdict::Drop(DropReason::Filtered));
    }

    #[test]
    fn unsolicited_inbound_denylists_source() {
        let mut cfg = NatConfig::default();
        cfg.denylist_on_unsolicited = true;
        cfg.denylist_duration_ms = 10_000.0;
        let mut n = NatState::new(cfg, PUB, 1).unwrap();
        let early = udp(ep(10, 80), Endpoint::new(PUB, 50_000));
        assert_eq!(n.process_inbound(&early, t(0.0)), InboundVerdict::Drop(DropReason::NoMapping));
        // The legitimate exchange that follows is blocked until expiry.
        let out = n.process_outbound(&udp(inside(4001), ep(10, 80)), t(1.0)).unwrap();
        let reply = udp(ep(10, 80), out.src);
        assert_eq!(n.process_inbound(&reply, t(2.0)), InboundVerdict::Drop(DropReason::Denylisted));
        assert!(matches!(n.process_inbound(&reply, t(10_000.0)), InboundVerdict::Deliver(_)));
    }

    #[test]
    fn rst_only_for_tcp() {
        let mut cfg = NatConfig::default();
        cfg.rst_on_unsolicited_tcp = true;
        let mut n = NatState::new(cfg, PUB, 1).unwrap();
        let syn = Packet::new(ep(10, 80), Endpoint::new(PUB, 1), PacketKind::TcpSyn, 40);
        assert_eq!(n.process_inbound(&syn, t(0.0)), InboundVerdict::RejectRst(DropReason::NoMapping));
        assert_eq!(
            n.process_inbound(&udp(ep(10, 80), Endpoint::new(PUB, 1)), t(0.0)),
            InboundVerdict::Drop(DropReason::NoMapping)
        );
    }

    #[test]
    fn scan_limit_denylists_after_burst() {
        let mut cfg = NatConfig::default();
        cfg.scan_limit = Some(3);
        let mut n = NatState::new(cfg, PUB, 1).unwrap();
        for i in 0..4 {
            n.process_inbound(&udp(ep(10, 80), Endpoint::new(PUB, 100 + i)), t(i as f64 * 10.0));
        }
        assert!(n.is_denylisted(HostId(10), t(50.0)));
    }

    #[test]
    fn expiry_boundaries() {
        let mut n = nat(MappingBehavior::EIM, FilteringBehavior::APDF);
        n.process_outbound(&udp(inside(1), ep(10, 80)), t(0.0)).unwrap();
        n.process_outbound(&udp(inside(2), ep(10, 80)), t(0.0)).unwrap();
        n.process_outbound(&udp(inside(2), ep(10, 80)), t(30_000.0)).unwrap();
        n.expire(t(30_001.0));
        let internals: Vec<_> = n.mappings().map(|m| m.internal).collect();
        assert_eq!(internals, vec![inside(2)]);

        n.deny(HostId(7), t(40_000.0));
        n.expire(t(39_999.0));
        assert!(n.denylist().contains_key(&HostId(7)));
        n.expire(t(40_000.0));
        assert!(!n.denylist().contains_key(&HostId(7)));
    }

    #[test]
    fn table_full_is_distinct_signal() {
        let mut cfg = NatConfig::with_behavior(MappingBehavior::APDM, FilteringBehavior::APDF);
        cfg.max_sessions = 2;
        let mut n = NatState::new(cfg, PUB, 1).unwrap();
        n.process_outbound(&udp(inside(1), ep(10, 1)), t(0.0)).unwrap();
        n.process_outbound(&udp(inside(1), ep(10, 2)), t(0.0)).unwrap();
        assert_eq!(n.process_outbound(&udp(inside(1), ep(10, 3)), t(0.0)), Err(OutboundError::SessionTableFull));
        // An existing mapping still works.
        assert!(n.process_outbound(&udp(inside(1), ep(10, 2)), t(0.0)).is_ok());
    }

    #[test]
    fn static_mapping_admits_unsolicited_and_never_expires() {
        let mut n = nat(MappingBehavior::APDM, FilteringBehavior::APDF);
        let ext = n.install_static_mapping(Proto::Tcp, inside(4001), 4001);
        let syn = Packet::new(ep(10, 80), ext, PacketKind::TcpSyn, 40);
        assert!(matches!(n.process_inbound(&syn, t(1e9)), InboundVerdict::Deliver(_)));
        let out = n.process_outbound(&Packet::new(inside(4001), ep(10, 80), PacketKind::TcpSynAck, 40), t(1e9)).unwrap();
        assert_eq!(out.src, ext);
    }

    #[test]
    fn archetype_table() {
        use FilteringBehavior::*;
        use MappingBehavior::*;
        let cases = [
            (EIM, EIF, Archetype::FullCone),
            (EIM, ADF, Archetype::RestrictedCone),
            (EIM, APDF, Archetype::PortRestrictedCone),
            (APDM, APDF, Archetype::Symmetric),
            (ADM, EIF, Archetype::Symmetric),
            (APDM, EIF, Archetype::Symmetric),
        ];
        for (m, f, want) in cases {
            assert_eq!(archetype(&NatConfig::with_behavior(m, f)), want, "{m:?}+{f:?}");
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = NatConfig::default();
        cfg.mapping_ttl_ms = 0.0;
        assert_eq!(cfg.validate(), Err(NatConfigError::MappingTtl(0.0)));
        let cfg = NatConfig { max_sessions: 0, ..NatConfig::default() };
        assert_eq!(cfg.validate(), Err(NatConfigError::MaxSessions));
    }

    #[test]
    fn endpoint_text_form() {
        let e: Endpoint = "203.0.113.5:40001".parse().unwrap();
        assert_eq!(e.to_string(), "203.0.113.5:40001");
        assert!("203.0.113.5".parse::<Endpoint>().is_err());
    }

    fn behavior() -> impl Strategy<Value = MappingBehavior> {
        prop_oneof![Just(MappingBehavior::EIM), Just(MappingBehavior::ADM), Just(MappingBehavior::APDM)]
    }

    fn filtering() -> impl Strategy<Value = FilteringBehavior> {
        prop_oneof![Just(FilteringBehavior::EIF), Just(FilteringBehavior::ADF), Just(FilteringBehavior::APDF)]
    }

    proptest! {
        #[test]
        fn eim_is_stable(dests in proptest::collection::vec((1u32..20, 1u16..50), 1..30)) {
            let mut n = nat(MappingBehavior::EIM, FilteringBehavior::APDF);
            let mut seen = BTreeSet::new();
            for (i, (h, p)) in dests.into_iter().enumerate() {
                let out = n.process_outbound(&udp(inside(4001), ep(h, p)), t(i as f64)).unwrap();
                seen.insert(out.src);
            }
            prop_assert_eq!(seen.len(), 1);
        }

        #[test]
        fn apdm_never_shares_ports(dests in proptest::collection::btree_set((1u32..20, 1u16..50), 1..40)) {
            let mut n = nat(MappingBehavior::APDM, FilteringBehavior::APDF);
            let mut ports = BTreeSet::new();
            for (h, p) in &dests {
                let out = n.process_outbound(&udp(inside(4001), ep(*h, *p)), t(0.0)).unwrap();
                ports.insert(out.src.port);
            }
            prop_assert_eq!(ports.len(), dests.len());
        }

        #[test]
        fn filtering_is_monotone(
            contacted in proptest::collection::btree_set((1u32..6, 1u16..6), 1..6),
            src in (1u32..6, 1u16..6),
        ) {
            let mapping = NatMapping {
                internal: inside(1),
                external: Endpoint::new(PUB, 1),
                key: MappingKey::Endpoint { proto: Proto::Udp, internal: inside(1) },
                contacted: contacted.iter().map(|&(h, p)| ep(h, p)).collect(),
                last_activity: SimTime::ZERO,
                is_static: false,
            };
            let src = ep(src.0, src.1);
            if admits(FilteringBehavior::APDF, &mapping, src) {
                prop_assert!(admits(FilteringBehavior::ADF, &mapping, src));
            }
            if admits(FilteringBehavior::ADF, &mapping, src) {
                prop_assert!(admits(FilteringBehavior::EIF, &mapping, src));
            }
        }

        #[test]
        fn empty_table_never_delivers(
            m in behavior(), f in filtering(), rst in any::<bool>(),
            src in (1u32..1000, any::<u16>()), port in any::<u16>(), tcp in any::<bool>(),
        ) {
            let mut cfg = NatConfig::with_behavior(m, f);
            cfg.rst_on_unsolicited_tcp = rst;
            let mut n = NatState::new(cfg, PUB, 3).unwrap();
            let kind = if tcp { PacketKind::TcpSyn } else { PacketKind::UdpDatagram };
            let pkt = Packet::new(ep(src.0, src.1), Endpoint::new(PUB, port), kind, 40);
            prop_assert!(!matches!(n.process_inbound(&pkt, t(0.0)), InboundVerdict::Deliver(_)));
        }

        #[test]
        fn crossing_packets_open_port_restricted_pair(pa in 1024u16..60000, pb in 1024u16..60000, seed in any::<u64>()) {
            let (pub_a, pub_b) = (HostId(0x0A00_0001), HostId(0x0A00_0002));
            let (in_a, in_b) = (Endpoint::new(HostId(0xC0A8_0001), pa), Endpoint::new(HostId(0xC0A8_0102), pb));
            let cfg = NatConfig::for_archetype(Archetype::PortRestrictedCone);
            let mut na = NatState::new(cfg.clone(), pub_a, seed).unwrap();
            let mut nb = NatState::new(cfg, pub_b, seed ^ 1).unwrap();
            // Learn external endpoints via a third party, as Identify would.
            let stun = ep(0x0808_0808, 3478);
            let ext_a = na.process_outbound(&udp(in_a, stun), t(0.0)).unwrap().src;
            let ext_b = nb.process_outbound(&udp(in_b, stun), t(0.0)).unwrap().src;
            // Both punch toward each other.
            let a_to_b = na.process_outbound(&udp(in_a, ext_b), t(1.0)).unwrap();
            let b_to_a = nb.process_outbound(&udp(in_b, ext_a), t(1.0)).unwrap();
            prop_assert!(matches!(nb.process_inbound(&a_to_b, t(2.0)), InboundVerdict::Deliver(_)));
            prop_assert!(matches!(na.process_inbound(&b_to_a, t(2.0)), InboundVerdict::Deliver(_)));
            for k in 0..3 {
                let later = t(3.0 + k as f64);
                let x = na.process_outbound(&udp(in_a, ext_b), later).unwrap();
                let y = nb.process_outbound(&udp(in_b, ext_a), later).unwrap();
                prop_assert!(matches!(nb.process_inbound(&x, later), InboundVerdict::Deliver(_)));
                prop_assert!(matches!(na.process_inbound(&y, later), InboundVerdict::Deliver(_)));
            }
        }
    }
}
