//! Analysis over hole-punch records: network identification, filtered
//! success-rate series with a trend line, relay-path location, RTT accuracy
//! and direct/relayed latency ratios.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::campaign::{self, Aggregates, RateCell};
use crate::dcutr::OutcomeResult;
use crate::record::{self, RawRecord, RecordError, ResultsFile};
use crate::transport::RttStats;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("no records survive the filters")]
    NoRecords,
    #[error("bin width must lie in (0, 1], got {0}")]
    BinWidth(f64),
    #[error("window must be positive")]
    Window,
}

/// Reads a `.json` or `.csv` results file; malformed input is rejected with its line number.
pub fn ingest(path: &Path) -> Result<ResultsFile, AnalysisError> {
    Ok(record::read_path(path)?)
}

/// Only SUCCESS and FAILED enter success rates.
pub fn outcome_counts(o: OutcomeResult) -> bool {
    matches!(o, OutcomeResult::Success | OutcomeResult::Failed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOptions {
    /// Clients with fewer surviving records than this are dropped.
    pub min_per_client: u64,
}

/// Indices of records passing the success-rate filters: no port mapping,
/// outcome SUCCESS or FAILED, and a client with at least `min_per_client`
/// such records. Idempotent.
pub fn apply_filters(records: &[RawRecord], opts: &FilterOptions) -> Vec<usize> {
    let stage1: Vec<usize> =
        (0..records.len()).filter(|&i| !records[i].port_mapping_active && outcome_counts(records[i].outcome)).collect();
    let mut per_client: BTreeMap<&str, u64> = BTreeMap::new();
    for &i in &stage1 {
        *per_client.entry(records[i].client_id.as_str()).or_default() += 1;
    }
    stage1.into_iter().filter(|&i| per_client[records[i].client_id.as_str()] >= opts.min_per_client).collect()
}

/// direct RTT mean / relayed RTT mean, for successes carrying both.
pub fn rtt_ratio(r: &RawRecord) -> Option<f64> {
    if r.outcome != OutcomeResult::Success {
        return None;
    }
    let (d, v) = (r.rtt_direct.as_ref()?, r.rtt_relayed.as_ref()?);
    (v.mean_ms > 0.0).then(|| d.mean_ms / v.mean_ms)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NetworkKey {
    pub client_id: String,
    pub index: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkLabel {
    Network(NetworkKey),
    ZeroPublic,
    MultiNetwork,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.0[root] != root {
            root = self.0[root];
        }
        let mut y = x;
        while self.0[y] != root {
            let next = self.0[y];
            self.0[y] = root;
            y = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the earlier node as root
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Assigns every record a network key or an ambiguity label.
///
/// Per client, public IPs are merged when (i) they are the same IP or
/// (ii) single-IP records share the AS and a non-empty private-address set.
/// A record whose IPs fall into more than one network is `MultiNetwork`.
/// Networks are numbered per client in order of first appearance by
/// timestamp.
pub fn identify_networks(records: &[RawRecord]) -> Vec<NetworkLabel> {
    let mut labels = vec![NetworkLabel::ZeroPublic; records.len()];
    let mut by_client: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_client.entry(r.client_id.as_str()).or_default().push(i);
    }
    for (client, mut idx) in by_client {
        idx.sort_by_key(|&i| (records[i].timestamp, i));
        let ips: Vec<Vec<String>> = idx.iter().map(|&i| records[i].public_ips()).collect();
        let mut node: BTreeMap<&str, usize> = BTreeMap::new();
        for set in &ips {
            for ip in set {
                let n = node.len();
                node.entry(ip.as_str()).or_insert(n);
            }
        }
        let mut uf = UnionFind((0..node.len()).collect());
        let mut rule2: BTreeMap<(u32, BTreeSet<&str>), usize> = BTreeMap::new();
        for (k, &i) in idx.iter().enumerate() {
            let r = &records[i];
            if ips[k].len() != 1 || r.private_addrs.is_empty() {
                continue;
            }
            let n = node[ips[k][0].as_str()];
            let key = (r.asn, r.private_addrs.iter().map(String::as_str).collect());
            match rule2.get(&key) {
                Some(&m) => uf.union(m, n),
                None => {
                    rule2.insert(key, n);
                }
            }
        }
        let mut numbering: BTreeMap<usize, u32> = BTreeMap::new();
        for (k, &i) in idx.iter().enumerate() {
            if ips[k].is_empty() {
                continue;
            }
            let roots: BTreeSet<usize> = ips[k].iter().map(|ip| uf.find(node[ip.as_str()])).collect();
            labels[i] = if roots.len() > 1 {
                NetworkLabel::MultiNetwork
            } else {
                let root = *roots.iter().next().expect("non-empty");
                let next = numbering.len() as u32;
                let index = *numbering.entry(root).or_insert(next);
                NetworkLabel::Network(NetworkKey { client_id: client.to_owned(), index })
            };
        }
    }
    labels
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesOptions {
    pub window_secs: i64,
    pub min_per_client: u64,
    /// Weight each point by its record count in the trend fit.
    pub weighted: bool,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        SeriesOptions { window_secs: 86_400, min_per_client: 1000, weighted: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub network: NetworkKey,
    pub window_start: DateTime<Utc>,
    /// Window offset from the earliest window, the trend's x axis.
    pub x: f64,
    pub n: u64,
    pub successes: u64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesReport {
    pub points: Vec<SeriesPoint>,
    pub slope_per_window: f64,
    pub intercept: f64,
    pub weighted: bool,
    pub mean_rate: f64,
    /// Sample stddev of the point rates.
    pub stddev_points: f64,
    /// Sample stddev of the residuals around the trend.
    pub stddev_residuals: f64,
    pub n_networks: usize,
    pub n_records: u64,
}

fn sample_sd(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Least squares `y = a + b x` with weights `w`. Returns `(a, b)`; `b` is 0 when all x coincide.
pub fn weighted_ols(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(x, w)| w * (x - mx) * (x - mx)).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((x, y), w)| w * (x - mx) * (y - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - b * mx, b)
}

pub fn success_rate_series(
    records: &[RawRecord],
    labels: &[NetworkLabel],
    opts: &SeriesOptions,
) -> Result<SeriesReport, AnalysisError> {
    if opts.window_secs <= 0 {
        return Err(AnalysisError::Window);
    }
    let kept = apply_filters(records, &FilterOptions { min_per_client: opts.min_per_client });
    let mut cells: BTreeMap<(NetworkKey, i64), RateCell> = BTreeMap::new();
    for i in kept {
        let NetworkLabel::Network(key) = &labels[i] else { continue };
        let w = records[i].timestamp.timestamp().div_euclid(opts.window_secs);
        cells.entry((key.clone(), w)).or_default().add(records[i].outcome == OutcomeResult::Success);
    }
    let first = cells.keys().map(|(_, w)| *w).min().ok_or(AnalysisError::NoRecords)?;
    let points: Vec<SeriesPoint> = cells
        .into_iter()
        .map(|((network, w), c)| SeriesPoint {
            network,
            window_start: DateTime::from_timestamp(w * opts.window_secs, 0).expect("in range"),
            x: (w - first) as f64,
            n: c.n,
            successes: c.successes,
            rate: c.successes as f64 / c.n as f64,
        })
        .collect();
    let x: Vec<f64> = points.iter().map(|p| p.x).collect();
    let y: Vec<f64> = points.iter().map(|p| p.rate).collect();
    let w: Vec<f64> = points.iter().map(|p| if opts.weighted { p.n as f64 } else { 1.0 }).collect();
    let (intercept, slope) = weighted_ols(&x, &y, &w);
    let residuals = points.iter().map(|p| p.rate - (intercept + slope * p.x));
    Ok(SeriesReport {
        mean_rate: y.iter().sum::<f64>() / y.len() as f64,
        stddev_points: sample_sd(y.iter().copied()),
        stddev_residuals: sample_sd(residuals),
        n_networks: points.iter().map(|p| &p.network).collect::<BTreeSet<_>>().len(),
        n_records: points.iter().map(|p| p.n).sum(),
        slope_per_window: slope,
        intercept,
        weighted: opts.weighted,
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub n: u64,
    pub successes: u64,
    pub rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelayPathReport {
    pub bin_width: f64,
    pub bins: Vec<Bin>,
    pub skipped_zero_relayed: u64,
    pub skipped_missing_rtt: u64,
}

/// rtt_to_relay / rtt_relayed, clipped to [0, 1].
pub fn relay_location(r: &RawRecord) -> Option<f64> {
    let (a, b) = (r.rtt_to_relay.as_ref()?, r.rtt_relayed.as_ref()?);
    (b.mean_ms > 0.0).then(|| (a.mean_ms / b.mean_ms).clamp(0.0, 1.0))
}

/// Bin index for `loc`. Bins are closed on the right, so a location of
/// exactly 0.70 falls in (0.65, 0.70].
pub fn bin_index(loc: f64, width: f64, n_bins: usize) -> usize {
    let i = (loc / width - 1e-9).ceil() as i64 - 1;
    i.clamp(0, n_bins as i64 - 1) as usize
}

fn round12(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

/// Success rate per relay-location bin, over records passing the base filters.
pub fn relay_path_location(records: &[RawRecord], bin_width: f64) -> Result<RelayPathReport, AnalysisError> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(AnalysisError::BinWidth(bin_width));
    }
    let n_bins = (1.0 / bin_width - 1e-9).ceil() as usize;
    let mut bins: Vec<Bin> = (0..n_bins)
        .map(|i| Bin {
            lo: round12(i as f64 * bin_width),
            hi: round12(((i + 1) as f64 * bin_width).min(1.0)),
            n: 0,
            successes: 0,
            rate: None,
        })
        .collect();
    let (mut zero, mut missing) = (0, 0);
    for r in records.iter().filter(|r| !r.port_mapping_active && outcome_counts(r.outcome)) {
        match (&r.rtt_to_relay, &r.rtt_relayed) {
            (Some(_), Some(v)) if v.mean_ms <= 0.0 => zero += 1,
            (Some(_), Some(_)) => {
                let b = &mut bins[bin_index(relay_location(r).expect("checked"), bin_width, n_bins)];
                b.n += 1;
                b.successes += u64::from(r.outcome == OutcomeResult::Success);
                b.rate = Some(b.successes as f64 / b.n as f64);
            }
            _ => missing += 1,
        }
    }
    Ok(RelayPathReport { bin_width, bins, skipped_zero_relayed: zero, skipped_missing_rtt: missing })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cdf {
    /// Sorted sample values.
    pub values: Vec<f64>,
    pub skipped: u64,
}

impl Cdf {
    pub fn from_values(mut values: Vec<f64>, skipped: u64) -> Cdf {
        values.sort_by(f64::total_cmp);
        Cdf { values, skipped }
    }

    /// Empirical P(X <= x).
    pub fn at(&self, x: f64) -> Option<f64> {
        if self.values.is_empty() {
            return None;
        }
        let k = self.values.partition_point(|v| *v <= x);
        Some(k as f64 / self.values.len() as f64)
    }

    /// `(value, cumulative share)` steps.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let n = self.values.len() as f64;
        self.values.iter().enumerate().map(|(i, v)| (*v, (i + 1) as f64 / n)).collect()
    }

    pub fn quantile(&self, p: f64) -> Option<f64> {
        if self.values.is_empty() {
            return None;
        }
        let k = ((p * self.values.len() as f64).ceil() as usize).clamp(1, self.values.len());
        Some(self.values[k - 1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RttAccuracy {
    pub to_relay: Cdf,
    pub via_relay: Cdf,
    pub direct_after: Cdf,
}

fn accuracy_of(records: &[RawRecord], f: impl Fn(&RawRecord) -> Option<&RttStats>) -> Cdf {
    let mut skipped = 0;
    let mut v = Vec::new();
    for s in records.iter().filter_map(f) {
        if s.mean_ms > 0.0 {
            v.push(s.stddev_ms / s.mean_ms);
        } else {
            skipped += 1;
        }
    }
    Cdf::from_values(v, skipped)
}

/// stddev / mean of each RTT measurement class.
pub fn rtt_accuracy(records: &[RawRecord]) -> RttAccuracy {
    RttAccuracy {
        to_relay: accuracy_of(records, |r| r.rtt_to_relay.as_ref()),
        via_relay: accuracy_of(records, |r| r.rtt_relayed.as_ref()),
        direct_after: accuracy_of(records, |r| r.rtt_direct.as_ref()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRatioReport {
    pub cdf: Cdf,
    pub median: Option<f64>,
    /// Share of successes where the direct path was slower than the relay.
    pub frac_above_one: Option<f64>,
}

pub fn latency_ratio_cdf(records: &[RawRecord]) -> LatencyRatioReport {
    let cdf = Cdf::from_values(records.iter().filter_map(rtt_ratio).collect(), 0);
    let n = cdf.values.len();
    let above = cdf.values.iter().filter(|x| **x > 1.0).count();
    LatencyRatioReport {
        median: cdf.quantile(0.5),
        frac_above_one: (n > 0).then(|| above as f64 / n as f64),
        cdf,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub min_per_client: u64,
    pub bin_width: f64,
    pub window_secs: i64,
    pub weighted_trend: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions { min_per_client: 1000, bin_width: 0.05, window_secs: 86_400, weighted_trend: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub keyed: u64,
    pub zero_public: u64,
    pub multi_network: u64,
    pub networks: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub seed: u64,
    pub config_hash: String,
    pub options: AnalyzeOptions,
    pub networks: NetworkSummary,
    pub aggregates: Aggregates,
    /// `None` when no record survives the filters.
    pub series: Option<SeriesReport>,
    pub rtt_accuracy: RttAccuracy,
    pub latency_ratio: LatencyRatioReport,
}

pub fn analyze(file: &ResultsFile, opts: &AnalyzeOptions) -> Result<AnalysisReport, AnalysisError> {
    if file.records.is_empty() {
        return Err(AnalysisError::NoRecords);
    }
    if !(opts.bin_width > 0.0 && opts.bin_width <= 1.0) {
        return Err(AnalysisError::BinWidth(opts.bin_width));
    }
    let records = &file.records;
    let labels = identify_networks(records);
    let mut nets = BTreeSet::new();
    let mut summary = NetworkSummary { keyed: 0, zero_public: 0, multi_network: 0, networks: 0 };
    for l in &labels {
        match l {
            NetworkLabel::Network(k) => {
                summary.keyed += 1;
                nets.insert(k);
            }
            NetworkLabel::ZeroPublic => summary.zero_public += 1,
            NetworkLabel::MultiNetwork => summary.multi_network += 1,
        }
    }
    summary.networks = nets.len() as u64;
    let series_opts =
        SeriesOptions { window_secs: opts.window_secs, min_per_client: opts.min_per_client, weighted: opts.weighted_trend };
    let series = match success_rate_series(records, &labels, &series_opts) {
        Ok(s) => Some(s),
        Err(AnalysisError::NoRecords) => None,
        Err(e) => return Err(e),
    };
    let aggregates = campaign::aggregate(records, opts.min_per_client, opts.bin_width).map_err(|_| AnalysisError::NoRecords)?;
    Ok(AnalysisReport {
        seed: file.seed,
        config_hash: file.config_hash.clone(),
        options: *opts,
        networks: summary,
        aggregates,
        series,
        rtt_accuracy: rtt_accuracy(records),
        latency_ratio: latency_ratio_cdf(records),
    })
}
