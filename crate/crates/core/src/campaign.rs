//! Population generation, trial execution, aggregation and export.
//!
//! Every trial builds a fresh [`World`] holding the sampled client, the
//! sampled remote, the remote's relays and one AutoNAT helper, seeded with
//! `mix_seed(seed, trial)`. Trials are independent, so serial and parallel
//! runs yield identical output.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, FilterOptions, RelayPathReport};
use crate::config::CampaignConfig;
use crate::dcutr::{HolePunchResult, OutcomeResult};
use crate::nat::{Archetype, NatConfig};
use crate::record::{AttemptRecord, RawRecord, RecordError, ResultsFile, SCHEMA_VERSION};
use crate::relay::{ListenAddr, RelayConfig};
use crate::sim::{mix_seed, HostId, Latency, RandomStream, Topology};
use crate::transport::Transport;
use crate::world::{PeerId, World};

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("infeasible population: {0}")]
    Population(String),
    #[error("trial {trial}: {msg}")]
    Trial { trial: u64, msg: String },
    #[error("no results to aggregate")]
    Empty,
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// Shares of NAT types in a population. Must sum to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NatMix {
    /// No NAT at all.
    pub public: f64,
    pub fullcone: f64,
    pub restricted: f64,
    pub port_restricted: f64,
    pub symmetric: f64,
}

impl Default for NatMix {
    fn default() -> Self {
        NatMix { public: 0.0, fullcone: 0.05, restricted: 0.15, port_restricted: 0.69, symmetric: 0.11 }
    }
}

/// NAT type of a generated peer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NatKind {
    Public,
    Behind(Archetype),
}

impl NatKind {
    pub fn label(self) -> &'static str {
        match self {
            NatKind::Public => "public",
            NatKind::Behind(Archetype::FullCone) => "fullcone",
            NatKind::Behind(Archetype::RestrictedCone) => "restricted",
            NatKind::Behind(Archetype::PortRestrictedCone) => "port-restricted",
            NatKind::Behind(Archetype::Symmetric) => "symmetric",
        }
    }
}

impl NatMix {
    pub const ONLY_CONE: NatMix = NatMix { public: 0.0, fullcone: 0.0, restricted: 0.25, port_restricted: 0.75, symmetric: 0.0 };

    fn shares(&self) -> [(NatKind, f64); 5] {
        [
            (NatKind::Public, self.public),
            (NatKind::Behind(Archetype::FullCone), self.fullcone),
            (NatKind::Behind(Archetype::RestrictedCone), self.restricted),
            (NatKind::Behind(Archetype::PortRestrictedCone), self.port_restricted),
            (NatKind::Behind(Archetype::Symmetric), self.symmetric),
        ]
    }

    pub fn validate(&self) -> Result<(), String> {
        let shares = self.shares();
        if shares.iter().any(|(_, s)| !(s.is_finite() && *s >= 0.0)) {
            return Err("nat shares must be non-negative".into());
        }
        let sum: f64 = shares.iter().map(|(_, s)| s).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("nat shares sum to {sum}, expected 1"));
        }
        Ok(())
    }

    /// Sets the symmetric share to `edm`, rescaling the others to fill the rest.
    pub fn with_edm_share(&self, edm: f64) -> Result<NatMix, String> {
        if !(0.0..=1.0).contains(&edm) {
            return Err(format!("edm_share {edm} outside [0, 1]"));
        }
        let rest = self.public + self.fullcone + self.restricted + self.port_restricted;
        let scale = if rest > 0.0 { (1.0 - edm) / rest } else { 0.0 };
        if rest == 0.0 && edm < 1.0 {
            return Err("edm_share < 1 needs at least one non-symmetric share".into());
        }
        Ok(NatMix {
            public: self.public * scale,
            fullcone: self.fullcone * scale,
            restricted: self.restricted * scale,
            port_restricted: self.port_restricted * scale,
            symmetric: edm,
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> NatKind {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let shares = self.shares();
        for (kind, s) in shares {
            acc += s;
            if u < acc {
                return kind;
            }
        }
        shares.iter().rev().find(|(_, s)| *s > 0.0).map_or(NatKind::Public, |(k, _)| *k)
    }
}

fn remote_default_mix() -> NatMix {
    NatMix { public: 0.0, fullcone: 0.0, restricted: 0.2, port_restricted: 0.69, symmetric: 0.11 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSpec {
    pub n_clients: u32,
    pub n_remotes: u32,
    pub n_relays: u32,
    pub relays_per_remote: u32,
    pub nat_mix: NatMix,
    /// Remote peers are discovered behind relays, so they default to no full-cone or public share.
    pub remote_nat_mix: NatMix,
    pub edm_share: Option<f64>,
    pub port_mapping_prevalence: f64,
    /// Share of port-mapped clients whose mapping does not actually exist.
    pub mapping_lies_share: f64,
    /// Share of peers speaking only QUIC; the rest speak both transports.
    pub quic_only_share: f64,
    /// NATs answer unsolicited TCP with RST.
    pub nat_rst_on_unsolicited_tcp: bool,
    /// NATs denylist sources of unsolicited inbound packets.
    pub nat_denylist_on_unsolicited: bool,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        PopulationSpec {
            n_clients: 200,
            n_remotes: 200,
            n_relays: 8,
            relays_per_remote: 2,
            nat_mix: NatMix::default(),
            remote_nat_mix: remote_default_mix(),
            edm_share: None,
            port_mapping_prevalence: 0.0,
            mapping_lies_share: 0.0,
            quic_only_share: 0.0,
            nat_rst_on_unsolicited_tcp: false,
            nat_denylist_on_unsolicited: false,
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<(), CampaignError> {
        let bad = |m: String| Err(CampaignError::Population(m));
        if self.n_clients == 0 || self.n_remotes == 0 {
            return bad("need at least one client and one remote".into());
        }
        if self.n_relays == 0 {
            return bad("need at least one relay".into());
        }
        if self.relays_per_remote == 0 || self.relays_per_remote > self.n_relays {
            return bad(format!("relays_per_remote must be 1..={}", self.n_relays));
        }
        if self.n_clients.max(self.n_remotes) > 1 << 20 || self.n_relays > 1 << 16 {
            return bad("population too large for the address plan".into());
        }
        let (a, b) = self.effective_mixes().map_err(CampaignError::Population)?;
        a.validate().map_err(|e| CampaignError::Population(format!("nat_mix: {e}")))?;
        b.validate().map_err(|e| CampaignError::Population(format!("remote_nat_mix: {e}")))?;
        if b.public > 0.0 {
            return bad("remote peers must be private".into());
        }
        for (name, p) in [
            ("port_mapping_prevalence", self.port_mapping_prevalence),
            ("mapping_lies_share", self.mapping_lies_share),
            ("quic_only_share", self.quic_only_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Client and remote mixes after applying `edm_share`.
    pub fn effective_mixes(&self) -> Result<(NatMix, NatMix), String> {
        match self.edm_share {
            Some(e) => Ok((self.nat_mix.with_edm_share(e)?, self.remote_nat_mix.with_edm_share(e)?)),
            None => Ok((self.nat_mix, self.remote_nat_mix)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencySpec {
    /// Access latency means are drawn uniformly from these ranges.
    pub client_access_ms: [f64; 2],
    pub remote_access_ms: [f64; 2],
    pub relay_access_ms: [f64; 2],
    /// Per-link stddev / mean.
    pub jitter_ratio: f64,
    /// Host-to-own-NAT one-way delay range.
    pub nat_offset_ms: [f64; 2],
    /// Router hops between client and remote.
    pub hop_distance: u8,
    pub loss_rate: f64,
}

impl Default for LatencySpec {
    fn default() -> Self {
        LatencySpec {
            client_access_ms: [5.0, 60.0],
            remote_access_ms: [5.0, 60.0],
            relay_access_ms: [5.0, 40.0],
            jitter_ratio: 0.1,
            nat_offset_ms: [0.2, 3.0],
            hop_distance: crate::sim::DEFAULT_HOP_DISTANCE,
            loss_rate: 0.0,
        }
    }
}

impl LatencySpec {
    pub fn validate(&self) -> Result<(), String> {
        for (name, [lo, hi]) in [
            ("client_access_ms", self.client_access_ms),
            ("remote_access_ms", self.remote_access_ms),
            ("relay_access_ms", self.relay_access_ms),
            ("nat_offset_ms", self.nat_offset_ms),
        ] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                return Err(format!("latency.{name} must be [lo, hi] with 0 <= lo <= hi"));
            }
        }
        if self.nat_offset_ms[1] > self.client_access_ms[0].min(self.remote_access_ms[0]) {
            return Err("latency.nat_offset_ms must not exceed the smallest access latency".into());
        }
        if !(self.jitter_ratio.is_finite() && self.jitter_ratio >= 0.0) {
            return Err("latency.jitter_ratio must be >= 0".into());
        }
        if self.hop_distance < 2 {
            return Err("latency.hop_distance must be >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err("latency.loss_rate must lie in [0, 1]".into());
        }
        Ok(())
    }

    fn draw(&self, [lo, hi]: [f64; 2], rng: &mut impl Rng) -> Latency {
        let mean = if hi > lo { rng.random_range(lo..hi) } else { lo };
        Latency::new(mean, mean * self.jitter_ratio)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterPolicy {
    #[default]
    None,
    /// Each trial is restricted to TCP or QUIC with equal probability.
    Random,
    Tcp,
    Quic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Policy {
    pub transport_filter: FilterPolicy,
    /// Reuse one world (and its NAT state) for all trials, run serially.
    pub persistent_nat: bool,
    /// Simulated time between trials in persistent mode.
    pub persistent_gap_ms: f64,
    /// Trials with index >= this are aborted before the first attempt.
    pub abort_after: Option<u64>,
    pub start: DateTime<Utc>,
    /// Trial timestamps are spread evenly over this many days.
    pub days: u32,
    pub parallel: bool,
    pub min_per_client: u64,
    pub bin_width: f64,
}

impl Default for Policy {
    fn default() -> Self {
        Policy {
            transport_filter: FilterPolicy::None,
            persistent_nat: false,
            persistent_gap_ms: 60_000.0,
            abort_after: None,
            start: "2022-12-01T00:00:00Z".parse().expect("valid date"),
            days: 30,
            parallel: true,
            min_per_client: 0,
            bin_width: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeerRole {
    Client,
    Remote,
    Relay,
    Helper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeerSpec {
    pub peer_id: PeerId,
    pub role: PeerRole,
    /// The peer's own address (private when behind a NAT).
    pub host: HostId,
    pub nat: Option<NatConfig>,
    pub nat_kind: NatKind,
    pub nat_public: Option<HostId>,
    pub nat_offset_ms: f64,
    pub port_mapping_active: bool,
    pub mapping_lies: bool,
    pub transports: Vec<Transport>,
    pub access: Latency,
    pub is_public: bool,
    pub asn: u32,
    /// Indices into [`Population::relays`] holding this remote's reservations.
    pub relays: Vec<usize>,
}

impl PeerSpec {
    pub fn public_ip(&self) -> HostId {
        self.nat_public.unwrap_or(self.host)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub clients: Vec<PeerSpec>,
    pub remotes: Vec<PeerSpec>,
    pub relays: Vec<PeerSpec>,
    pub helper: PeerSpec,
}

const RELAY_BASE: u32 = 0x0a00_0000; // 10.0.0.0
const HELPER_HOST: u32 = 0x0aff_0001; // 10.255.0.1
const CLIENT_PRIVATE: u32 = 0xac10_0000; // 172.16.0.0
const REMOTE_PRIVATE: u32 = 0xac40_0000; // 172.64.0.0
const CLIENT_PUBLIC: u32 = 0x6440_0000; // 100.64.0.0
const REMOTE_PUBLIC: u32 = 0x6480_0000; // 100.128.0.0
const ASN_BASE: u32 = 64_512;

impl Population {
    pub fn all(&self) -> impl Iterator<Item = &PeerSpec> {
        self.clients.iter().chain(&self.remotes).chain(&self.relays).chain(std::iter::once(&self.helper))
    }

    /// Star topology over every generated host.
    pub fn topology(&self) -> Topology {
        let mut t = Topology::new();
        for p in self.all() {
            t.add_host(p.host, p.access).expect("unique hosts");
            if p.nat.is_some() {
                t.set_nat_offset(p.host, p.nat_offset_ms).expect("valid offset");
            }
        }
        t
    }
}

/// Builds a deterministic population from `spec` and `seed`.
pub fn generate_population(spec: &PopulationSpec, latency: &LatencySpec, seed: u64) -> Result<Population, CampaignError> {
    spec.validate()?;
    latency.validate().map_err(CampaignError::Population)?;
    let (client_mix, remote_mix) = spec.effective_mixes().map_err(CampaignError::Population)?;
    let mut rng = RandomStream::new(seed, "population");
    let mut next_id = 0u32;
    let mut id = || {
        next_id += 1;
        PeerId(next_id - 1)
    };

    let relays: Vec<PeerSpec> = (0..spec.n_relays)
        .map(|i| {
            let host = HostId(RELAY_BASE + 1 + i);
            PeerSpec {
                peer_id: id(),
                role: PeerRole::Relay,
                host,
                nat: None,
                nat_kind: NatKind::Public,
                nat_public: None,
                nat_offset_ms: 0.0,
                port_mapping_active: false,
                mapping_lies: false,
                transports: vec![Transport::Tcp, Transport::Quic],
                access: latency.draw(latency.relay_access_ms, &mut rng),
                is_public: true,
                asn: ASN_BASE + 4000 + i,
                relays: Vec::new(),
            }
        })
        .collect();
    let helper = PeerSpec {
        peer_id: id(),
        role: PeerRole::Helper,
        host: HostId(HELPER_HOST),
        nat: None,
        nat_kind: NatKind::Public,
        nat_public: None,
        nat_offset_ms: 0.0,
        port_mapping_active: false,
        mapping_lies: false,
        transports: vec![Transport::Tcp, Transport::Quic],
        access: Latency::new(10.0, 10.0 * latency.jitter_ratio),
        is_public: true,
        asn: ASN_BASE + 5000,
        relays: Vec::new(),
    };

    let mut make = |role: PeerRole, i: u32, mix: &NatMix, rng: &mut RandomStream| {
        let (private, public, access_range) = match role {
            PeerRole::Client => (CLIENT_PRIVATE, CLIENT_PUBLIC, latency.client_access_ms),
            _ => (REMOTE_PRIVATE, REMOTE_PUBLIC, latency.remote_access_ms),
        };
        let kind = mix.sample(rng);
        let access = latency.draw(access_range, rng);
        let [olo, ohi] = latency.nat_offset_ms;
        let offset = if ohi > olo { rng.random_range(olo..ohi) } else { olo };
        let mapped = role == PeerRole::Client && kind != NatKind::Public && rng.random_bool(spec.port_mapping_prevalence);
        let lies = mapped && rng.random_bool(spec.mapping_lies_share);
        let transports = if rng.random_bool(spec.quic_only_share) {
            vec![Transport::Quic]
        } else {
            vec![Transport::Tcp, Transport::Quic]
        };
        let mut relays = Vec::new();
        if role == PeerRole::Remote {
            relays = rand::seq::index::sample(rng, spec.n_relays as usize, spec.relays_per_remote as usize).into_vec();
            relays.sort_unstable();
        }
        let (host, nat, nat_public, nat_offset_ms) = match kind {
            NatKind::Public => (HostId(public + 1 + i), None, None, 0.0),
            NatKind::Behind(a) => {
                let nat = NatConfig {
                    rst_on_unsolicited_tcp: spec.nat_rst_on_unsolicited_tcp,
                    denylist_on_unsolicited: spec.nat_denylist_on_unsolicited,
                    ..NatConfig::for_archetype(a)
                };
                (HostId(private + 1 + i), Some(nat), Some(HostId(public + 1 + i)), offset)
            }
        };
        PeerSpec {
            peer_id: id(),
            role,
            host,
            nat,
            nat_kind: kind,
            nat_public,
            nat_offset_ms,
            port_mapping_active: mapped,
            mapping_lies: lies,
            transports,
            access,
            is_public: kind == NatKind::Public,
            asn: ASN_BASE + (public + 1 + i) / 64 % 4000,
            relays,
        }
    };
    let clients = (0..spec.n_clients).map(|i| make(PeerRole::Client, i, &client_mix, &mut rng)).collect();
    let remotes = (0..spec.n_remotes).map(|i| make(PeerRole::Remote, i, &remote_mix, &mut rng)).collect();
    Ok(Population { clients, remotes, relays, helper })
}

fn add_peer(w: &mut World, p: &PeerSpec, relay_cfg: &RelayConfig) -> Result<(), crate::world::WorldError> {
    match (&p.nat, p.role) {
        (None, PeerRole::Relay) => w.add_relay(p.host, p.peer_id, p.access, relay_cfg.clone())?,
        (None, _) => w.add_public_peer(p.host, p.peer_id, p.access)?,
        (Some(nat), _) => {
            w.add_private_peer(p.host, p.peer_id, p.access, p.nat_public.expect("nat has public ip"), nat.clone(), p.nat_offset_ms)?
        }
    }
    w.peer_mut(p.host)?.transports = p.transports.clone();
    Ok(())
}

/// One executed trial.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trial {
    pub index: u64,
    pub client: usize,
    pub remote: usize,
    pub filter: Option<Transport>,
    pub result: HolePunchResult,
}

/// Pairing and filter for trial `index`, independent of execution order.
pub fn plan_trial(pop: &Population, cfg: &CampaignConfig, index: u64) -> (usize, usize, Option<Transport>) {
    let mut rng = RandomStream::new(mix_seed(cfg.seed, index), "pairing");
    let client = rng.random_range(0..pop.clients.len());
    let remote = rng.random_range(0..pop.remotes.len());
    let filter = match cfg.policy.transport_filter {
        FilterPolicy::None => None,
        FilterPolicy::Tcp => Some(Transport::Tcp),
        FilterPolicy::Quic => Some(Transport::Quic),
        FilterPolicy::Random => Some(if rng.random_bool(0.5) { Transport::Tcp } else { Transport::Quic }),
    };
    (client, remote, filter)
}

fn trial_dcutr(cfg: &CampaignConfig, index: u64) -> crate::dcutr::DcutrConfig {
    let mut d = cfg.dcutr.clone();
    if cfg.policy.abort_after.is_some_and(|n| index >= n) {
        d.cancel_before_attempt = Some(0);
    }
    d
}

/// Setup shared by both modes: identify, reservations, port mapping, AutoNAT.
fn prepare(w: &mut World, pop: &Population, c: &PeerSpec, r: &PeerSpec, cfg: &CampaignConfig) -> Result<Vec<HostId>, crate::world::WorldError> {
    let relay_hosts: Vec<HostId> = r.relays.iter().map(|i| pop.relays[*i].host).collect();
    for h in &relay_hosts {
        w.identify_with(c.host, *h)?;
        w.identify_with(r.host, *h)?;
        // denials and timeouts surface later as NO_CONNECTION
        let _ = w.reserve(r.host, *h);
    }
    if c.port_mapping_active && !w.peer(c.host)?.info.port_mapping_active {
        w.enable_port_mapping(c.host, c.mapping_lies)?;
    }
    w.autonat_check(c.host, &[pop.helper.host])?;
    if c.host != r.host && w.topology().contains(r.host) {
        w.topology_mut().set_hop_distance(c.host, r.host, cfg.latency.hop_distance)?;
    }
    w.topology_mut().set_loss_rate(cfg.latency.loss_rate)?;
    Ok(relay_hosts)
}

pub fn run_trial(pop: &Population, cfg: &CampaignConfig, index: u64) -> Result<Trial, CampaignError> {
    let err = |msg: String| CampaignError::Trial { trial: index, msg };
    let (ci, ri, filter) = plan_trial(pop, cfg, index);
    let (c, r) = (&pop.clients[ci], &pop.remotes[ri]);
    let mut w = World::new(mix_seed(cfg.seed, index));
    for i in &r.relays {
        add_peer(&mut w, &pop.relays[*i], &cfg.relay).map_err(|e| err(e.to_string()))?;
    }
    for p in [&pop.helper, c, r] {
        add_peer(&mut w, p, &cfg.relay).map_err(|e| err(e.to_string()))?;
    }
    let relays = prepare(&mut w, pop, c, r, cfg).map_err(|e| err(e.to_string()))?;
    let result = w.run_hole_punch(c.host, r.peer_id, &relays, filter, &trial_dcutr(cfg, index)).map_err(|e| err(e.to_string()))?;
    Ok(Trial { index, client: ci, remote: ri, filter, result })
}

fn run_persistent(pop: &Population, cfg: &CampaignConfig) -> Result<Vec<Trial>, CampaignError> {
    let err = |trial: u64, msg: String| CampaignError::Trial { trial, msg };
    let mut w = World::new(cfg.seed);
    for p in pop.all() {
        add_peer(&mut w, p, &cfg.relay).map_err(|e| err(0, e.to_string()))?;
    }
    let mut out = Vec::with_capacity(cfg.trials as usize);
    for index in 0..cfg.trials {
        let (ci, ri, filter) = plan_trial(pop, cfg, index);
        let (c, r) = (&pop.clients[ci], &pop.remotes[ri]);
        let relays = prepare(&mut w, pop, c, r, cfg).map_err(|e| err(index, e.to_string()))?;
        let result =
            w.run_hole_punch(c.host, r.peer_id, &relays, filter, &trial_dcutr(cfg, index)).map_err(|e| err(index, e.to_string()))?;
        out.push(Trial { index, client: ci, remote: ri, filter, result });
        w.run_for(cfg.policy.persistent_gap_ms);
    }
    Ok(out)
}

/// Runs `cfg.trials` trials. Output order is trial order in every mode.
pub fn run_campaign(pop: &Population, cfg: &CampaignConfig) -> Result<Vec<Trial>, CampaignError> {
    if cfg.policy.persistent_nat {
        return run_persistent(pop, cfg);
    }
    #[cfg(feature = "parallel")]
    if cfg.policy.parallel {
        use rayon::prelude::*;
        return (0..cfg.trials).into_par_iter().map(|i| run_trial(pop, cfg, i)).collect();
    }
    (0..cfg.trials).map(|i| run_trial(pop, cfg, i)).collect()
}

fn multiaddr(a: &ListenAddr) -> String {
    match a.transport {
        Transport::Tcp => format!("/ip4/{}/tcp/{}", a.endpoint.host, a.endpoint.port),
        Transport::Quic => format!("/ip4/{}/udp/{}/quic-v1", a.endpoint.host, a.endpoint.port),
    }
}

pub fn trial_timestamp(policy: &Policy, trials: u64, index: u64) -> DateTime<Utc> {
    let span_ms = i64::from(policy.days.max(1)) * 86_400_000;
    let step = span_ms / trials.max(1) as i64;
    policy.start + Duration::milliseconds(step * index as i64)
}

pub fn to_record(pop: &Population, cfg: &CampaignConfig, t: &Trial) -> RawRecord {
    let c = &pop.clients[t.client];
    let r = &pop.remotes[t.remote];
    let res = &t.result;
    let proto = if res.transport_used == Some(Transport::Quic) { "udp" } else { "tcp" };
    RawRecord {
        trial: t.index,
        client_id: res.client.to_string(),
        remote_id: res.remote.to_string(),
        timestamp: trial_timestamp(&cfg.policy, cfg.trials, t.index),
        public_addrs: res.listen_endpoints.iter().map(multiaddr).collect(),
        private_addrs: if c.nat.is_some() { vec![c.host.to_string()] } else { Vec::new() },
        asn: c.asn,
        client_nat: c.nat_kind.label().to_owned(),
        remote_nat: r.nat_kind.label().to_owned(),
        outcome: res.outcome,
        attempts: res
            .attempts
            .iter()
            .map(|a| AttemptRecord {
                index: a.index,
                outcome: a.outcome,
                transport: a.transport_used,
                wait_ms: a.wait_ms,
                rtt_ms: a.rtt_relayed.as_ref().map(|s| s.mean_ms),
                duration_ms: a.ended - a.started,
            })
            .collect(),
        protocol_filter: res.protocol_filter,
        transport_used: res.transport_used,
        port_mapping_active: res.port_mapping_active,
        relay_addrs: res.relay_addrs.clone(),
        direct_addrs: res.direct_endpoints_used.iter().map(|e| format!("/ip4/{}/{proto}/{}", e.host, e.port)).collect(),
        rtt_to_relay: res.rtt_to_relay.clone(),
        rtt_relayed: res.rtt_relayed.clone(),
        rtt_direct: res.rtt_direct_after.clone(),
        duration_ms: res.ended - res.started,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub n: u64,
    pub successes: u64,
    pub rate: Option<f64>,
}

impl RateCell {
    pub fn add(&mut self, success: bool) {
        self.n += 1;
        self.successes += u64::from(success);
        self.rate = Some(self.successes as f64 / self.n as f64);
    }
}

/// Metrics computed from records alone, so export → ingest reproduces them exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_results: u64,
    pub outcomes: BTreeMap<OutcomeResult, u64>,
    /// Over results with no port mapping and outcome SUCCESS or FAILED.
    pub success: RateCell,
    pub excluded_port_mapping: u64,
    pub excluded_min_per_client: u64,
    /// Successes by number of attempts used (index 1..=3).
    pub attempt_histogram: BTreeMap<u8, u64>,
    pub first_attempt_share: Option<f64>,
    pub per_filter: BTreeMap<String, RateCell>,
    pub transport_used: BTreeMap<String, u64>,
    pub rtt_ratios: Vec<f64>,
    pub rtt_ratio_median: Option<f64>,
    pub reversed_mapped: RateCell,
    pub reversed_unmapped: RateCell,
    pub relay_path: RelayPathReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub seed: u64,
    pub config_hash: String,
    pub config: Option<serde_json::Value>,
    pub metrics: Aggregates,
}

fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn aggregate(records: &[RawRecord], min_per_client: u64, bin_width: f64) -> Result<Aggregates, CampaignError> {
    if records.is_empty() {
        return Err(CampaignError::Empty);
    }
    let opts = FilterOptions { min_per_client };
    let kept = analysis::apply_filters(records, &opts);
    let mut outcomes: BTreeMap<OutcomeResult, u64> = OutcomeResult::ALL.iter().map(|o| (*o, 0)).collect();
    for r in records {
        *outcomes.entry(r.outcome).or_default() += 1;
    }
    let mut success = RateCell::default();
    let mut per_filter: BTreeMap<String, RateCell> = BTreeMap::new();
    for &i in &kept {
        let r = &records[i];
        let ok = r.outcome == OutcomeResult::Success;
        success.add(ok);
        let label = r.protocol_filter.map_or("none".to_owned(), |t| t.to_string());
        per_filter.entry(label).or_default().add(ok);
    }
    let excluded_port_mapping = records.iter().filter(|r| r.port_mapping_active && analysis::outcome_counts(r.outcome)).count() as u64;
    let stage1 = records.iter().filter(|r| !r.port_mapping_active && analysis::outcome_counts(r.outcome)).count() as u64;

    let mut attempt_histogram: BTreeMap<u8, u64> = (1..=3).map(|i| (i, 0)).collect();
    let mut transport_used = BTreeMap::new();
    let mut rtt_ratios = Vec::new();
    let (mut reversed_mapped, mut reversed_unmapped) = (RateCell::default(), RateCell::default());
    for r in records {
        let reversed = r.outcome == OutcomeResult::ConnectionReversed;
        if r.port_mapping_active {
            reversed_mapped.add(reversed);
        } else {
            reversed_unmapped.add(reversed);
        }
        if r.outcome != OutcomeResult::Success {
            continue;
        }
        *attempt_histogram.entry(r.attempts.len() as u8).or_default() += 1;
        if let Some(t) = r.transport_used {
            *transport_used.entry(t.to_string()).or_default() += 1;
        }
        if let Some(x) = analysis::rtt_ratio(r) {
            rtt_ratios.push(x);
        }
    }
    let successes: u64 = attempt_histogram.values().sum();
    Ok(Aggregates {
        n_results: records.len() as u64,
        outcomes,
        success,
        excluded_port_mapping,
        excluded_min_per_client: stage1 - kept.len() as u64,
        first_attempt_share: (successes > 0).then(|| attempt_histogram[&1] as f64 / successes as f64),
        attempt_histogram,
        per_filter,
        transport_used,
        rtt_ratio_median: median(&rtt_ratios),
        rtt_ratios,
        reversed_mapped,
        reversed_unmapped,
        relay_path: analysis::relay_path_location(records, bin_width).map_err(|e| CampaignError::Trial { trial: 0, msg: e.to_string() })?,
    })
}

/// Everything a `simulate` run produces.
pub struct CampaignOutput {
    pub trials: Vec<Trial>,
    pub results: ResultsFile,
    pub report: CampaignReport,
}

pub fn execute(cfg: &CampaignConfig) -> Result<CampaignOutput, CampaignError> {
    cfg.validate().map_err(|e| CampaignError::Population(e.to_string()))?;
    let pop = generate_population(&cfg.population, &cfg.latency, cfg.seed)?;
    let trials = run_campaign(&pop, cfg)?;
    let records: Vec<RawRecord> = trials.iter().map(|t| to_record(&pop, cfg, t)).collect();
    let metrics = aggregate(&records, cfg.policy.min_per_client, cfg.policy.bin_width)?;
    let config_hash = cfg.hash();
    let report = CampaignReport {
        seed: cfg.seed,
        config_hash: config_hash.clone(),
        config: Some(serde_json::to_value(cfg).expect("config serializes")),
        metrics,
    };
    let results = ResultsFile { schema_version: SCHEMA_VERSION, seed: cfg.seed, config_hash, records };
    Ok(CampaignOutput { trials, results, report })
}

/// Flattens nested JSON into dotted keys.
pub fn flatten(value: &serde_json::Value) -> BTreeMap<String, serde_json::Value> {
    fn go(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
        let key = |k: &str| if prefix.is_empty() { k.to_owned() } else { format!("{prefix}.{k}") };
        match v {
            serde_json::Value::Object(m) if !m.is_empty() => m.iter().for_each(|(k, v)| go(&key(k), v, out)),
            serde_json::Value::Array(a) if !a.is_empty() && a.iter().any(|x| x.is_object()) => {
                a.iter().enumerate().for_each(|(i, v)| go(&key(&i.to_string()), v, out))
            }
            _ => {
                out.insert(prefix.to_owned(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    go("", value, &mut out);
    out
}

/// Writes the report as flat key/value JSON (`.json`) or two-column CSV (`.csv`).
pub fn export_report(report: &CampaignReport, path: &Path) -> Result<(), CampaignError> {
    let flat = flatten(&serde_json::to_value(report).expect("report serializes"));
    let format = crate::record::Format::from_path(path)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(RecordError::from)?);
    match format {
        crate::record::Format::Json => serde_json::to_writer_pretty(&mut f, &flat).map_err(|e| RecordError::Io(e.into()))?,
        crate::record::Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut f);
            w.write_record(["key", "value"]).map_err(|e| RecordError::Io(std::io::Error::other(e)))?;
            for (k, v) in &flat {
                w.write_record([k.as_str(), &v.to_string()]).map_err(|e| RecordError::Io(std::io::Error::other(e)))?;
            }
            w.flush().map_err(RecordError::from)?;
        }
    }
    Ok(())
}

pub fn export_results(results: &ResultsFile, path: &Path) -> Result<(), CampaignError> {
    Ok(crate::record::write_path(results, path)?)
}

/// Hand-built scenario: one client (DCUtR listener), one remote (initiator)
/// holding reservations at `relays` relays, and an AutoNAT helper.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairFixture {
    pub client_nat: Option<NatConfig>,
    pub remote_nat: NatConfig,
    pub client_access: Latency,
    pub remote_access: Latency,
    pub relay_access: Latency,
    pub client_nat_offset_ms: f64,
    pub remote_nat_offset_ms: f64,
    pub relays: u32,
    pub client_port_mapping: bool,
}

impl PairFixture {
    pub const CLIENT: HostId = HostId(0xc0a8_0001);
    pub const CLIENT_NAT: HostId = HostId(0x6440_0001);
    pub const REMOTE: HostId = HostId(0xc0a8_0102);
    pub const REMOTE_NAT: HostId = HostId(0x6480_0001);
    pub const REMOTE_ID: PeerId = PeerId(2);

    pub fn new(client_nat: NatConfig, remote_nat: NatConfig) -> Self {
        PairFixture {
            client_nat: Some(client_nat),
            remote_nat,
            client_access: Latency::fixed(20.0),
            remote_access: Latency::fixed(20.0),
            relay_access: Latency::fixed(10.0),
            client_nat_offset_ms: 2.0,
            remote_nat_offset_ms: 2.0,
            relays: 1,
            client_port_mapping: false,
        }
    }

    /// One-way latency between the two NATs.
    pub fn nat_to_nat_ms(&self) -> f64 {
        self.client_access.mean_ms + self.remote_access.mean_ms - self.client_nat_offset_ms - self.remote_nat_offset_ms
    }

    /// Builds the world and runs identify, reservations and AutoNAT.
    /// Returns the world and the relay hosts.
    pub fn build(&self, seed: u64) -> Result<(World, Vec<HostId>), crate::world::WorldError> {
        let mut w = World::new(seed);
        let relays: Vec<HostId> = (0..self.relays).map(|i| HostId(RELAY_BASE + 1 + i)).collect();
        for (i, r) in relays.iter().enumerate() {
            w.add_relay(*r, PeerId(100 + i as u32), self.relay_access, RelayConfig::default())?;
        }
        w.add_public_peer(HostId(HELPER_HOST), PeerId(99), Latency::fixed(10.0))?;
        match &self.client_nat {
            Some(n) => w.add_private_peer(Self::CLIENT, PeerId(1), self.client_access, Self::CLIENT_NAT, n.clone(), self.client_nat_offset_ms)?,
            None => w.add_public_peer(Self::CLIENT, PeerId(1), self.client_access)?,
        }
        w.add_private_peer(Self::REMOTE, Self::REMOTE_ID, self.remote_access, Self::REMOTE_NAT, self.remote_nat.clone(), self.remote_nat_offset_ms)?;
        for r in &relays {
            w.identify_with(Self::CLIENT, *r)?;
            w.identify_with(Self::REMOTE, *r)?;
            let _ = w.reserve(Self::REMOTE, *r);
        }
        if self.client_port_mapping {
            w.enable_port_mapping(Self::CLIENT, false)?;
        }
        w.autonat_check(Self::CLIENT, &[HostId(HELPER_HOST)])?;
        Ok((w, relays))
    }

    pub fn run(
        &self,
        seed: u64,
        filter: Option<Transport>,
        dcutr: &crate::dcutr::DcutrConfig,
    ) -> Result<HolePunchResult, crate::dcutr::DcutrError> {
        let (mut w, relays) = self.build(seed)?;
        w.run_hole_punch(Self::CLIENT, Self::REMOTE_ID, &relays, filter, dcutr)
    }
}
