//! Reader-log CSV parsing and tumbling-window segmentation.
//!
//! Log format, one row per read, header required:
//!
//! ```text
//! timestamp_ms,tag_id,antenna_port,rssi_dbm,phase,distance_m,label
//! ```
//!
//! `distance_m` and `label` may be empty.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{MaterialClass, ReadWindow, TagRead};
use crate::error::{Error, Result};

pub const LOG_HEADER: [&str; 7] = [
    "timestamp_ms",
    "tag_id",
    "antenna_port",
    "rssi_dbm",
    "phase",
    "distance_m",
    "label",
];

/// Full-circle count of Impinj phase units.
const IMPINJ_PHASE_UNITS: f64 = 4096.0;

/// How the `phase` column is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseUnit {
    #[default]
    Radians,
    /// Quantized reader units, 0..4095 per full cycle.
    ImpinjUnits,
}

impl std::str::FromStr for PhaseUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radians" | "rad" => Ok(PhaseUnit::Radians),
            "impinj" | "impinj_units" => Ok(PhaseUnit::ImpinjUnits),
            other => Err(Error::domain(format!("unknown phase unit '{other}'"))),
        }
    }
}

/// A read plus the container label recorded with it, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub read: TagRead,
    pub label: Option<MaterialClass>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReaderLog {
    pub source: String,
    pub entries: Vec<LogEntry>,
}

impl ReaderLog {
    pub fn new(source: impl Into<String>) -> Self {
        ReaderLog {
            source: source.into(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn reads(&self) -> impl Iterator<Item = &TagRead> {
        self.entries.iter().map(|e| &e.read)
    }

    /// Tag ids in order of first appearance.
    pub fn tag_ids(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.entries
            .iter()
            .map(|e| e.read.tag_id.as_str())
            .filter(|t| seen.insert(*t))
            .collect()
    }

    /// Appends entries, keeping per-tag timestamps non-decreasing.
    pub fn extend_checked(&mut self, entries: impl IntoIterator<Item = LogEntry>) -> Result<()> {
        let mut last: HashMap<String, i64> = HashMap::new();
        for e in &self.entries {
            last.insert(e.read.tag_id.clone(), e.read.timestamp_ms);
        }
        for e in entries {
            if let Some(&prev) = last.get(&e.read.tag_id) {
                if e.read.timestamp_ms < prev {
                    return Err(Error::domain(format!(
                        "tag {} goes back in time ({} < {prev})",
                        e.read.tag_id, e.read.timestamp_ms
                    )));
                }
            }
            last.insert(e.read.tag_id.clone(), e.read.timestamp_ms);
            self.entries.push(e);
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(LOG_HEADER)?;
        for e in &self.entries {
            let r = &e.read;
            w.write_record([
                r.timestamp_ms.to_string(),
                r.tag_id.clone(),
                r.antenna_port.to_string(),
                r.rssi_dbm.to_string(),
                r.phase_rad.to_string(),
                r.distance_m.map(|d| d.to_string()).unwrap_or_default(),
                e.label.map(|l| l.name().to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_header(header: &csv::StringRecord) -> Result<bool> {
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Ok(false);
    }
    if header.iter().map(str::trim).collect::<Vec<_>>() != LOG_HEADER {
        return Err(Error::parse(1, format!("expected header '{}'", LOG_HEADER.join(","))));
    }
    Ok(true)
}

fn parse_record(rec: &csv::StringRecord, phase_unit: PhaseUnit) -> Result<LogEntry> {
    let line = rec.position().map_or(0, |p| p.line());
    if rec.len() != LOG_HEADER.len() {
        return Err(Error::parse(
            line,
            format!("expected {} fields, found {}", LOG_HEADER.len(), rec.len()),
        ));
    }
    let field = |i: usize| rec[i].trim();
    let bad = |i: usize| Error::parse(line, format!("bad {} '{}'", LOG_HEADER[i], field(i)));

    let timestamp_ms: i64 = field(0).parse().map_err(|_| bad(0))?;
    let tag_id = field(1).to_string();
    let antenna_port: u16 = field(2).parse().map_err(|_| bad(2))?;
    let rssi_dbm: f64 = field(3).parse().map_err(|_| bad(3))?;
    let raw_phase: f64 = field(4).parse().map_err(|_| bad(4))?;
    let phase_rad = match phase_unit {
        PhaseUnit::Radians => raw_phase,
        PhaseUnit::ImpinjUnits => {
            if !(0.0..IMPINJ_PHASE_UNITS).contains(&raw_phase) {
                return Err(Error::parse(
                    line,
                    format!("phase {raw_phase} outside 0..4095 reader units"),
                ));
            }
            raw_phase * TAU / IMPINJ_PHASE_UNITS
        }
    };
    let distance_m = match field(5) {
        "" => None,
        s => Some(s.parse::<f64>().map_err(|_| bad(5))?),
    };
    let label = match field(6) {
        "" => None,
        s => Some(
            s.parse::<MaterialClass>()
                .map_err(|e| Error::parse(line, e.to_string()))?,
        ),
    };
    let read = TagRead::new(timestamp_ms, tag_id, antenna_port, rssi_dbm, phase_rad, distance_m)
        .map_err(|e| Error::parse(line, e.to_string()))?;
    Ok(LogEntry { read, label })
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input)
}

fn record_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::parse(line, e.to_string())
}

/// Parses a reader-log CSV. Line numbers in errors count the header as line 1.
pub fn parse_reader_log<R: Read>(input: R, phase_unit: PhaseUnit, source: &str) -> Result<ReaderLog> {
    let mut rdr = csv_reader(input);
    let mut log = ReaderLog::new(source);
    if !check_header(rdr.headers()?)? {
        return Ok(log);
    }
    let mut last_ts: HashMap<String, i64> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(record_error)?;
        let entry = parse_record(&rec, phase_unit)?;
        let read = &entry.read;
        if let Some(&prev) = last_ts.get(&read.tag_id) {
            if read.timestamp_ms < prev {
                let line = rec.position().map_or(0, |p| p.line());
                return Err(Error::parse(
                    line,
                    format!("timestamp {} precedes {prev} for tag {}", read.timestamp_ms, read.tag_id),
                ));
            }
        }
        last_ts.insert(read.tag_id.clone(), read.timestamp_ms);
        log.entries.push(entry);
    }
    Ok(log)
}

/// Reads a log row by row without holding it in memory.
///
/// Unlike [`parse_reader_log`], time order is not checked; consumers such
/// as the monitor deal with late reads themselves.
pub fn stream_reader_log<R: Read>(input: R, phase_unit: PhaseUnit) -> Result<impl Iterator<Item = Result<LogEntry>>> {
    let mut rdr = csv_reader(input);
    let has_rows = check_header(rdr.headers()?)?;
    Ok(rdr
        .into_records()
        .take_while(move |_| has_rows)
        .map(move |rec| parse_record(&rec.map_err(record_error)?, phase_unit)))
}

pub fn load_reader_log(path: &Path, phase_unit: PhaseUnit) -> Result<ReaderLog> {
    let file = std::fs::File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    parse_reader_log(std::io::BufReader::new(file), phase_unit, &path.display().to_string())
}

/// Groups one tag's entry indices into tumbling windows aligned to its first read.
fn window_indices(log: &ReaderLog, tag: &str, window_ms: i64, min_reads: usize) -> Result<Vec<(i64, Vec<usize>)>> {
    if window_ms <= 0 {
        return Err(Error::domain(format!("window length {window_ms} ms must be positive")));
    }
    let mut out: Vec<(i64, Vec<usize>)> = Vec::new();
    let mut origin = None;
    for (i, e) in log.entries.iter().enumerate() {
        if e.read.tag_id != tag {
            continue;
        }
        let t = e.read.timestamp_ms;
        let t0 = *origin.get_or_insert(t);
        let start = t0 + (t - t0).div_euclid(window_ms) * window_ms;
        match out.last_mut() {
            Some((s, idx)) if *s == start => idx.push(i),
            _ => out.push((start, vec![i])),
        }
    }
    out.retain(|(_, idx)| idx.len() >= min_reads);
    Ok(out)
}

/// Splits one tag's reads into non-overlapping windows of `window_ms`.
///
/// Windows holding fewer than `min_reads` reads are discarded. An unknown
/// tag yields no windows.
pub fn window_reads(log: &ReaderLog, tag: &str, window_ms: i64, min_reads: usize) -> Result<Vec<ReadWindow>> {
    window_indices(log, tag, window_ms, min_reads)?
        .into_iter()
        .map(|(start, idx)| {
            let reads = idx.iter().map(|&i| log.entries[i].read.clone()).collect();
            ReadWindow::new(reads, start, start + window_ms)
        })
        .collect()
}

/// Like [`window_reads`], pairing each window with the label shared by its reads.
///
/// A window whose reads carry different labels is an error.
pub fn labeled_windows(
    log: &ReaderLog,
    tag: &str,
    window_ms: i64,
    min_reads: usize,
) -> Result<Vec<(ReadWindow, Option<MaterialClass>)>> {
    window_indices(log, tag, window_ms, min_reads)?
        .into_iter()
        .map(|(start, idx)| {
            let label = log.entries[idx[0]].label;
            if idx.iter().any(|&i| log.entries[i].label != label) {
                return Err(Error::domain(format!(
                    "window at {start} ms for tag {tag} mixes labels"
                )));
            }
            let reads = idx.iter().map(|&i| log.entries[i].read.clone()).collect();
            Ok((ReadWindow::new(reads, start, start + window_ms)?, label))
        })
        .collect()
}
