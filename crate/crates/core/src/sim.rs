//! Discrete-event kernel: virtual clock, FIFO-stable event queue, seeded
//! random streams and the star latency model every other module runs on.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::ops::{Add, Sub};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum one-way latency returned by [`Topology::sample_latency`].
pub const LATENCY_FLOOR_MS: f64 = 0.01;

/// Hop count between two distinct edge hosts when nothing else is configured.
pub const DEFAULT_HOP_DISTANCE: u8 = 6;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("cannot schedule at {at} ms, clock is already at {now} ms")]
    ScheduleInPast { at: f64, now: f64 },
    #[error("unknown host {0}")]
    UnknownHost(HostId),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
}

/// Simulated time in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    pub fn from_ms(ms: f64) -> Self {
        assert!(ms.is_finite() && ms >= 0.0, "sim time must be finite and non-negative, got {ms}");
        SimTime(ms)
    }

    pub fn as_ms(self) -> f64 {
        self.0
    }
}

impl Eq for SimTime {}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Add<f64> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: f64) -> SimTime {
        SimTime::from_ms(self.0 + rhs)
    }
}

impl Sub for SimTime {
    type Output = f64;
    fn sub(self, rhs: SimTime) -> f64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}ms", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(u64);

struct Entry<E> {
    at: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl<E> Eq for Entry<E> {}
impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Event queue ordered by time, then by insertion order.
pub struct Scheduler<E> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Entry<E>>>,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Self::starting_at(SimTime::ZERO)
    }

    pub fn starting_at(now: SimTime) -> Self {
        Scheduler { now, next_seq: 0, queue: BinaryHeap::new() }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule(&mut self, at: SimTime, event: E) -> Result<EventId, SimError> {
        if at < self.now {
            return Err(SimError::ScheduleInPast { at: at.as_ms(), now: self.now.as_ms() });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Entry { at, seq, event }));
        Ok(EventId(seq))
    }

    /// Schedules `delay_ms` after the current time. Negative delays are clamped to zero.
    pub fn schedule_in(&mut self, delay_ms: f64, event: E) -> EventId {
        let at = self.now + delay_ms.max(0.0);
        self.schedule(at, event).expect("non-negative delay cannot be in the past")
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(e)| e.at)
    }

    pub fn pop(&mut self) -> Option<(SimTime, E)> {
        let Reverse(entry) = self.queue.pop()?;
        debug_assert!(entry.at >= self.now);
        self.now = entry.at;
        Some((entry.at, entry.event))
    }

    /// Moves the clock forward without firing anything. Used when a run stops at a deadline.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn clear(&mut self) {
        self.queue.clear();
    }
}

/// SplitMix64 finaliser. Used to derive independent seeds from `(seed, salt)` pairs.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// A named, seeded random stream. Identical `(seed, label)` pairs yield identical draws.
#[derive(Clone, Debug)]
pub struct RandomStream {
    label: String,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, label: &str) -> Self {
        RandomStream {
            label: label.to_owned(),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, fnv1a(label))),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Host identifier. Rendered as an IPv4 address so records read like real captures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "Ipv4Addr", from = "Ipv4Addr")]
pub struct HostId(pub u32);

impl HostId {
    pub fn addr(self) -> Ipv4Addr {
        Ipv4Addr::from(self.0)
    }
}

impl From<Ipv4Addr> for HostId {
    fn from(a: Ipv4Addr) -> Self {
        HostId(u32::from(a))
    }
}

impl From<HostId> for Ipv4Addr {
    fn from(h: HostId) -> Self {
        h.addr()
    }
}

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.addr())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_ms: f64,
    pub stddev_ms: f64,
}

impl Latency {
    pub fn new(mean_ms: f64, stddev_ms: f64) -> Self {
        Latency { mean_ms, stddev_ms }
    }

    pub fn fixed(mean_ms: f64) -> Self {
        Latency { mean_ms, stddev_ms: 0.0 }
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.mean_ms.is_finite() && self.mean_ms >= 0.0) {
            return Err(SimError::InvalidTopology(format!("latency mean {} must be >= 0", self.mean_ms)));
        }
        if !(self.stddev_ms.is_finite() && self.stddev_ms >= 0.0) {
            return Err(SimError::InvalidTopology(format!("latency stddev {} must be >= 0", self.stddev_ms)));
        }
        Ok(())
    }
}

fn ordered(a: HostId, b: HostId) -> (HostId, HostId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Star topology: every host hangs off a shared core through an access link.
///
/// One-way latency between two hosts is the sum of their access links (means
/// add, standard deviations add in quadrature) unless a pair override exists.
/// A host behind a NAT reaches its NAT after `nat_offset` ms of that budget.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Topology {
    nodes: BTreeSet<HostId>,
    access: BTreeMap<HostId, Latency>,
    nat_offset: BTreeMap<HostId, f64>,
    hops: BTreeMap<(HostId, HostId), u8>,
    overrides: BTreeMap<(HostId, HostId), Latency>,
    loss_rate: f64,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_host(&mut self, host: HostId, access: Latency) -> Result<(), SimError> {
        access.validate()?;
        self.nodes.insert(host);
        self.access.insert(host, access);
        Ok(())
    }

    pub fn contains(&self, host: HostId) -> bool {
        self.nodes.contains(&host)
    }

    pub fn hosts(&self) -> impl Iterator<Item = HostId> + '_ {
        self.nodes.iter().copied()
    }

    pub fn access(&self, host: HostId) -> Result<Latency, SimError> {
        self.access.get(&host).copied().ok_or(SimError::UnknownHost(host))
    }

    /// One-way latency from `host` to its own NAT. Must not exceed the host's access mean.
    pub fn set_nat_offset(&mut self, host: HostId, offset_ms: f64) -> Result<(), SimError> {
        let access = self.access(host)?;
        if !(offset_ms >= 0.0 && offset_ms <= access.mean_ms) {
            return Err(SimError::InvalidTopology(format!(
                "nat offset {offset_ms} of {host} outside [0, {}]",
                access.mean_ms
            )));
        }
        self.nat_offset.insert(host, offset_ms);
        Ok(())
    }

    pub fn nat_offset(&self, host: HostId) -> f64 {
        self.nat_offset.get(&host).copied().unwrap_or(0.0)
    }

    /// Round trip between a host and its own NAT.
    pub fn nat_rtt(&self, host: HostId) -> f64 {
        2.0 * self.nat_offset(host)
    }

    pub fn set_hop_distance(&mut self, a: HostId, b: HostId, hops: u8) -> Result<(), SimError> {
        self.check(a)?;
        self.check(b)?;
        if a != b && hops < 2 {
            return Err(SimError::InvalidTopology(format!("hop distance {a}<->{b} must be >= 2")));
        }
        self.hops.insert(ordered(a, b), hops);
        Ok(())
    }

    pub fn hop_distance(&self, a: HostId, b: HostId) -> Result<u8, SimError> {
        self.check(a)?;
        self.check(b)?;
        if a == b {
            return Ok(0);
        }
        Ok(self.hops.get(&ordered(a, b)).copied().unwrap_or(DEFAULT_HOP_DISTANCE))
    }

    pub fn set_pair_override(&mut self, a: HostId, b: HostId, latency: Latency) -> Result<(), SimError> {
        self.check(a)?;
        self.check(b)?;
        latency.validate()?;
        self.overrides.insert(ordered(a, b), latency);
        Ok(())
    }

    pub fn set_loss_rate(&mut self, loss_rate: f64) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&loss_rate) {
            return Err(SimError::InvalidTopology(format!("loss rate {loss_rate} outside [0, 1]")));
        }
        self.loss_rate = loss_rate;
        Ok(())
    }

    pub fn loss_rate(&self) -> f64 {
        self.loss_rate
    }

    /// Mean and standard deviation of a one-way traversal between `a` and `b`.
    pub fn path_latency(&self, a: HostId, b: HostId) -> Result<Latency, SimError> {
        self.check(a)?;
        self.check(b)?;
        if let Some(l) = self.overrides.get(&ordered(a, b)) {
            return Ok(*l);
        }
        let la = self.access(a)?;
        let lb = self.access(b)?;
        Ok(Latency {
            mean_ms: la.mean_ms + lb.mean_ms,
            stddev_ms: la.stddev_ms.hypot(lb.stddev_ms),
        })
    }

    pub fn sample_latency<R: RngCore + ?Sized>(&self, a: HostId, b: HostId, rng: &mut R) -> Result<f64, SimError> {
        let l = self.path_latency(a, b)?;
        if l.stddev_ms == 0.0 {
            return Ok(l.mean_ms.max(LATENCY_FLOOR_MS));
        }
        let normal = Normal::new(l.mean_ms, l.stddev_ms).expect("validated stddev");
        Ok(normal.sample(rng).max(LATENCY_FLOOR_MS))
    }

    fn check(&self, host: HostId) -> Result<(), SimError> {
        if self.nodes.contains(&host) {
            Ok(())
        } else {
            Err(SimError::UnknownHost(host))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn fires_at_scheduled_time() {
        let mut s = Scheduler::new();
        s.schedule(SimTime::from_ms(5.0), "e").unwrap();
        assert_eq!(s.pop(), Some((SimTime::from_ms(5.0), "e")));
        assert_eq!(s.now(), SimTime::from_ms(5.0));
        assert!(s.pop().is_none());
    }

    #[test]
    fn ties_fire_in_insertion_order() {
        let mut s = Scheduler::new();
        s.schedule(SimTime::from_ms(5.0), 1).unwrap();
        s.schedule(SimTime::from_ms(5.0), 2).unwrap();
        s.schedule(SimTime::from_ms(1.0), 0).unwrap();
        s.schedule(SimTime::from_ms(5.0), 3).unwrap();
        let order: Vec<_> = std::iter::from_fn(|| s.pop().map(|(_, e)| e)).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_past() {
        let mut s = Scheduler::new();
        s.schedule(SimTime::from_ms(2.0), ()).unwrap();
        s.pop();
        assert_eq!(
            s.schedule(SimTime::from_ms(1.0), ()),
            Err(SimError::ScheduleInPast { at: 1.0, now: 2.0 })
        );
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = RandomStream::new(7, "latency");
        let mut b = RandomStream::new(7, "latency");
        let mut c = RandomStream::new(7, "ports");
        let xs: Vec<u64> = (0..8).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.random()).collect();
        let zs: Vec<u64> = (0..8).map(|_| c.random()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    fn two_hosts(a: Latency, b: Latency) -> Topology {
        let mut t = Topology::new();
        t.add_host(HostId(1), a).unwrap();
        t.add_host(HostId(2), b).unwrap();
        t
    }

    #[test]
    fn degenerate_latency_is_sum_of_access() {
        let t = two_hosts(Latency::fixed(10.0), Latency::fixed(20.0));
        let mut rng = RandomStream::new(1, "l");
        for _ in 0..10 {
            assert_eq!(t.sample_latency(HostId(1), HostId(2), &mut rng).unwrap(), 30.0);
        }
    }

    #[test]
    fn pair_override_takes_precedence() {
        let mut t = two_hosts(Latency::new(10.0, 3.0), Latency::new(20.0, 4.0));
        t.set_pair_override(HostId(2), HostId(1), Latency::fixed(50.0)).unwrap();
        let mut rng = RandomStream::new(1, "l");
        assert_eq!(t.sample_latency(HostId(1), HostId(2), &mut rng).unwrap(), 50.0);
    }

    #[test]
    fn sampled_moments_match_configuration() {
        let mut t = two_hosts(Latency::new(100.0, 50.0), Latency::fixed(0.0));
        t.set_pair_override(HostId(1), HostId(2), Latency::new(100.0, 50.0)).unwrap();
        let mut rng = RandomStream::new(42, "moments");
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| t.sample_latency(HostId(1), HostId(2), &mut rng).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Flooring at 0.01 ms touches ~2.3% of draws (2 sigma below the mean), which
        // moves the mean by about +0.4 and the sd by about -1.0.
        assert!((mean - 100.0).abs() < 2.0, "mean {mean}");
        assert!((var.sqrt() - 50.0).abs() < 3.0, "sd {}", var.sqrt());
    }

    #[test]
    fn unknown_host_is_an_error() {
        let t = two_hosts(Latency::fixed(1.0), Latency::fixed(1.0));
        let mut rng = RandomStream::new(1, "l");
        assert_eq!(t.sample_latency(HostId(1), HostId(9), &mut rng), Err(SimError::UnknownHost(HostId(9))));
    }

    #[test]
    fn hop_distance_defaults_and_validates() {
        let mut t = two_hosts(Latency::fixed(1.0), Latency::fixed(1.0));
        assert_eq!(t.hop_distance(HostId(1), HostId(2)).unwrap(), DEFAULT_HOP_DISTANCE);
        t.set_hop_distance(HostId(2), HostId(1), 4).unwrap();
        assert_eq!(t.hop_distance(HostId(1), HostId(2)).unwrap(), 4);
        assert!(t.set_hop_distance(HostId(1), HostId(2), 1).is_err());
        assert!(t.set_loss_rate(1.5).is_err());
    }
}
