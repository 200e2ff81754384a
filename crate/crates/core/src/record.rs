//! Flat hole-punch record: what campaign export writes and analysis ingests.
//!
//! JSON files hold a [`ResultsFile`]. CSV files hold one row per record with
//! the columns in [`CSV_COLUMNS`]; list-valued fields are space separated and
//! the attempts column holds a compact JSON array.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dcutr::{OutcomeAttempt, OutcomeResult};
use crate::transport::{RttStats, Transport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub index: u8,
    pub outcome: OutcomeAttempt,
    pub transport: Option<Transport>,
    pub wait_ms: Option<f64>,
    pub rtt_ms: Option<f64>,
    pub duration_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub trial: u64,
    pub client_id: String,
    pub remote_id: String,
    pub timestamp: DateTime<Utc>,
    /// Multiaddrs the client listens on, as seen from outside.
    pub public_addrs: Vec<String>,
    pub private_addrs: Vec<String>,
    pub asn: u32,
    pub client_nat: String,
    pub remote_nat: String,
    pub outcome: OutcomeResult,
    pub attempts: Vec<AttemptRecord>,
    pub protocol_filter: Option<Transport>,
    pub transport_used: Option<Transport>,
    pub port_mapping_active: bool,
    pub relay_addrs: Vec<String>,
    pub direct_addrs: Vec<String>,
    pub rtt_to_relay: Option<RttStats>,
    pub rtt_relayed: Option<RttStats>,
    pub rtt_direct: Option<RttStats>,
    pub duration_ms: f64,
}

impl RawRecord {
    /// IPv4 addresses appearing in `public_addrs`, sorted and deduplicated.
    pub fn public_ips(&self) -> Vec<String> {
        let mut ips: Vec<String> = self.public_addrs.iter().filter_map(|a| multiaddr_ip(a)).map(str::to_owned).collect();
        ips.sort();
        ips.dedup();
        ips
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.client_id.is_empty() {
            return Err("empty client_id".into());
        }
        for a in &self.public_addrs {
            if multiaddr_ip(a).is_none() {
                return Err(format!("unparseable public address {a:?}"));
            }
        }
        for s in [&self.rtt_to_relay, &self.rtt_relayed, &self.rtt_direct].into_iter().flatten() {
            if !(s.mean_ms.is_finite() && s.stddev_ms.is_finite()) || s.mean_ms < 0.0 || s.stddev_ms < 0.0 {
                return Err("negative or non-finite rtt".into());
            }
        }
        Ok(())
    }
}

/// `/ip4/<addr>/...` → `<addr>`.
pub fn multiaddr_ip(addr: &str) -> Option<&str> {
    let rest = addr.strip_prefix("/ip4/")?;
    let ip = rest.split('/').next()?;
    ip.parse::<std::net::Ipv4Addr>().ok().map(|_| ip)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<RawRecord>,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("unsupported schema version {0}")]
    Schema(u32),
    #[error("unknown file format for {0} (expected .json or .csv)")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Format, RecordError> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("json") => Ok(Format::Json),
            Some("csv") => Ok(Format::Csv),
            _ => Err(RecordError::Format(path.display().to_string())),
        }
    }
}

pub const CSV_COLUMNS: [&str; 31] = [
    "seed",
    "config_hash",
    "trial",
    "client_id",
    "remote_id",
    "timestamp",
    "public_addrs",
    "private_addrs",
    "asn",
    "client_nat",
    "remote_nat",
    "outcome",
    "attempts",
    "protocol_filter",
    "transport_used",
    "port_mapping_active",
    "relay_addrs",
    "direct_addrs",
    "rtt_to_relay_mean_ms",
    "rtt_to_relay_stddev_ms",
    "rtt_to_relay_samples",
    "rtt_relayed_mean_ms",
    "rtt_relayed_stddev_ms",
    "rtt_relayed_samples",
    "rtt_direct_mean_ms",
    "rtt_direct_stddev_ms",
    "rtt_direct_samples",
    "duration_ms",
    "n_attempts",
    "first_attempt_outcome",
    "schema_version",
];

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    seed: u64,
    config_hash: String,
    trial: u64,
    client_id: String,
    remote_id: String,
    timestamp: DateTime<Utc>,
    public_addrs: String,
    private_addrs: String,
    asn: u32,
    client_nat: String,
    remote_nat: String,
    outcome: OutcomeResult,
    attempts: String,
    protocol_filter: Option<Transport>,
    transport_used: Option<Transport>,
    port_mapping_active: bool,
    relay_addrs: String,
    direct_addrs: String,
    rtt_to_relay_mean_ms: Option<f64>,
    rtt_to_relay_stddev_ms: Option<f64>,
    rtt_to_relay_samples: Option<u32>,
    rtt_relayed_mean_ms: Option<f64>,
    rtt_relayed_stddev_ms: Option<f64>,
    rtt_relayed_samples: Option<u32>,
    rtt_direct_mean_ms: Option<f64>,
    rtt_direct_stddev_ms: Option<f64>,
    rtt_direct_samples: Option<u32>,
    duration_ms: f64,
    // redundant, for spreadsheet users
    n_attempts: usize,
    first_attempt_outcome: Option<OutcomeAttempt>,
    schema_version: u32,
}

fn join(xs: &[String]) -> String {
    xs.join(" ")
}

fn split(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn rtt_cols(s: &Option<RttStats>) -> (Option<f64>, Option<f64>, Option<u32>) {
    match s {
        Some(s) => (Some(s.mean_ms), Some(s.stddev_ms), Some(s.samples)),
        None => (None, None, None),
    }
}

fn rtt_from(mean: Option<f64>, sd: Option<f64>, n: Option<u32>) -> Result<Option<RttStats>, String> {
    match (mean, sd, n) {
        (Some(mean_ms), Some(stddev_ms), Some(samples)) => Ok(Some(RttStats { mean_ms, stddev_ms, samples })),
        (None, None, None) => Ok(None),
        _ => Err("rtt columns must be all present or all empty".into()),
    }
}

impl CsvRow {
    fn from_record(r: &RawRecord, seed: u64, config_hash: &str) -> CsvRow {
        let (a, b, c) = rtt_cols(&r.rtt_to_relay);
        let (d, e, f) = rtt_cols(&r.rtt_relayed);
        let (g, h, i) = rtt_cols(&r.rtt_direct);
        CsvRow {
            seed,
            config_hash: config_hash.to_owned(),
            trial: r.trial,
            client_id: r.client_id.clone(),
            remote_id: r.remote_id.clone(),
            timestamp: r.timestamp,
            public_addrs: join(&r.public_addrs),
            private_addrs: join(&r.private_addrs),
            asn: r.asn,
            client_nat: r.client_nat.clone(),
            remote_nat: r.remote_nat.clone(),
            outcome: r.outcome,
            attempts: serde_json::to_string(&r.attempts).expect("attempts serialize"),
            protocol_filter: r.protocol_filter,
            transport_used: r.transport_used,
            port_mapping_active: r.port_mapping_active,
            relay_addrs: join(&r.relay_addrs),
            direct_addrs: join(&r.direct_addrs),
            rtt_to_relay_mean_ms: a,
            rtt_to_relay_stddev_ms: b,
            rtt_to_relay_samples: c,
            rtt_relayed_mean_ms: d,
            rtt_relayed_stddev_ms: e,
            rtt_relayed_samples: f,
            rtt_direct_mean_ms: g,
            rtt_direct_stddev_ms: h,
            rtt_direct_samples: i,
            duration_ms: r.duration_ms,
            n_attempts: r.attempts.len(),
            first_attempt_outcome: r.attempts.first().map(|a| a.outcome),
            schema_version: SCHEMA_VERSION,
        }
    }

    fn into_record(self) -> Result<(RawRecord, u64, String), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!("unsupported schema version {}", self.schema_version));
        }
        let attempts: Vec<AttemptRecord> = serde_json::from_str(&self.attempts).map_err(|e| format!("attempts: {e}"))?;
        let r = RawRecord {
            trial: self.trial,
            client_id: self.client_id,
            remote_id: self.remote_id,
            timestamp: self.timestamp,
            public_addrs: split(&self.public_addrs),
            private_addrs: split(&self.private_addrs),
            asn: self.asn,
            client_nat: self.client_nat,
            remote_nat: self.remote_nat,
            outcome: self.outcome,
            attempts,
            protocol_filter: self.protocol_filter,
            transport_used: self.transport_used,
            port_mapping_active: self.port_mapping_active,
            relay_addrs: split(&self.relay_addrs),
            direct_addrs: split(&self.direct_addrs),
            rtt_to_relay: rtt_from(self.rtt_to_relay_mean_ms, self.rtt_to_relay_stddev_ms, self.rtt_to_relay_samples)?,
            rtt_relayed: rtt_from(self.rtt_relayed_mean_ms, self.rtt_relayed_stddev_ms, self.rtt_relayed_samples)?,
            rtt_direct: rtt_from(self.rtt_direct_mean_ms, self.rtt_direct_stddev_ms, self.rtt_direct_samples)?,
            duration_ms: self.duration_ms,
        };
        if self.n_attempts != r.attempts.len() {
            return Err("n_attempts does not match attempts".into());
        }
        Ok((r, self.seed, self.config_hash))
    }
}

pub fn write_json<W: Write>(file: &ResultsFile, out: W) -> Result<(), RecordError> {
    serde_json::to_writer_pretty(out, file).map_err(|e| RecordError::Io(e.into()))
}

pub fn write_csv<W: Write>(file: &ResultsFile, out: W) -> Result<(), RecordError> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(out);
    if file.records.is_empty() {
        w.write_record(CSV_COLUMNS).map_err(csv_io)?;
    }
    for r in &file.records {
        w.serialize(CsvRow::from_record(r, file.seed, &file.config_hash)).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> RecordError {
    RecordError::Io(std::io::Error::other(e.to_string()))
}

pub fn read_json<R: Read>(input: R) -> Result<ResultsFile, RecordError> {
    let file: ResultsFile =
        serde_json::from_reader(input).map_err(|e| RecordError::Malformed { line: e.line() as u64, msg: e.to_string() })?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(RecordError::Schema(file.schema_version));
    }
    Ok(file)
}

pub fn read_csv<R: Read>(input: R) -> Result<ResultsFile, RecordError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rd.headers().map_err(|e| RecordError::Malformed { line: 1, msg: e.to_string() })?;
    if header.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(RecordError::Malformed { line: 1, msg: "header does not match the documented column order".into() });
    }
    let mut records = Vec::new();
    let mut meta: Option<(u64, String)> = None;
    for row in rd.deserialize::<CsvRow>() {
        let row = row.map_err(|e| RecordError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = records.len() as u64 + 2;
        let (r, seed, hash) = row.into_record().map_err(|msg| RecordError::Malformed { line, msg })?;
        match &meta {
            None => meta = Some((seed, hash)),
            Some((s, h)) if *s == seed && *h == hash => {}
            Some(_) => return Err(RecordError::Malformed { line, msg: "seed/config_hash differ from earlier rows".into() }),
        }
        records.push(r);
    }
    let (seed, config_hash) = meta.unwrap_or_default();
    Ok(ResultsFile { schema_version: SCHEMA_VERSION, seed, config_hash, records })
}

pub fn write_path(file: &ResultsFile, path: &Path) -> Result<(), RecordError> {
    let format = Format::from_path(path)?;
    let out = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        Format::Json => write_json(file, out),
        Format::Csv => write_csv(file, out),
    }
}

/// Reads a results file and validates every record. Errors carry the
/// 1-based line (CSV) or the parser's line (JSON).
pub fn read_path(path: &Path) -> Result<ResultsFile, RecordError> {
    let format = Format::from_path(path)?;
    let input = std::io::BufReader::new(std::fs::File::open(path)?);
    let file = match format {
        Format::Json => read_json(input)?,
        Format::Csv => read_csv(input)?,
    };
    for (i, r) in file.records.iter().enumerate() {
        r.validate().map_err(|msg| RecordError::Malformed {
            line: match format {
                Format::Csv => i as u64 + 2,
                Format::Json => 0,
            },
            msg: format!("record {i}: {msg}"),
        })?;
    }
    Ok(file)
}
