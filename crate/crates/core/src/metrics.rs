//! Communication and time accounting, run reports and curve CSVs.
//!
//! `report.txt` holds one `key = value` datum per line; lines starting with
//! `#` are comments. Energy is not measured: bytes on the wire and wall time
//! are the reported cost proxies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use crate::error::{CoreError, Result};
use crate::wire::MsgType;

pub const CSV_HEADER: &str = "round,algorithm,alpha,accuracy,cum_bytes,cum_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub round: usize,
    pub algorithm: String,
    pub alpha: f64,
    pub accuracy: f64,
    pub cum_bytes: u64,
    pub cum_seconds: f64,
}

pub fn curve_to_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{},{:.6}",
            r.round, r.algorithm, r.alpha, r.accuracy, r.cum_bytes, r.cum_seconds
        )
        .unwrap();
    }
    out
}

pub fn curve_from_csv(text: &str) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(CoreError::Format(format!("curve CSV must start with `{CSV_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |what: &str| CoreError::Format(format!("curve CSV line {}: bad {what}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("field count"));
            }
            Ok(CurveRow {
                round: f[0].parse().map_err(|_| bad("round"))?,
                algorithm: f[1].to_string(),
                alpha: f[2].parse().map_err(|_| bad("alpha"))?,
                accuracy: f[3].parse().map_err(|_| bad("accuracy"))?,
                cum_bytes: f[4].parse().map_err(|_| bad("cum_bytes"))?,
                cum_seconds: f[5].parse().map_err(|_| bad("cum_seconds"))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// Client to coordinator.
    Up,
    /// Coordinator to clients.
    Down,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub messages: u64,
    pub bytes: u64,
}

/// Thread-safe byte counts keyed by direction and message type. Totals are
/// meant to be read once traffic has stopped.
#[derive(Debug, Default)]
pub struct ByteLedger {
    entries: Mutex<BTreeMap<(Direction, MsgType), Tally>>,
}

impl ByteLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, direction: Direction, msg_type: MsgType, bytes: usize) {
        let mut map = self.entries.lock().expect("ledger poisoned");
        let t = map.entry((direction, msg_type)).or_default();
        t.messages += 1;
        t.bytes += bytes as u64;
    }

    pub fn get(&self, direction: Direction, msg_type: MsgType) -> Tally {
        self.entries.lock().expect("ledger poisoned").get(&(direction, msg_type)).copied().unwrap_or_default()
    }

    pub fn total(&self, direction: Direction) -> u64 {
        let map = self.entries.lock().expect("ledger poisoned");
        map.iter().filter(|((d, _), _)| *d == direction).map(|(_, t)| t.bytes).sum()
    }

    pub fn snapshot(&self) -> BTreeMap<(Direction, MsgType), Tally> {
        self.entries.lock().expect("ledger poisoned").clone()
    }
}

/// One transmitted envelope, as captured at the transport boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub direction: Direction,
    pub msg_type: MsgType,
    pub round: u32,
    pub sender: u32,
    pub bytes: u64,
    pub topic: String,
}

/// Append-only record of transmitted envelopes, rendered as `messages.log`:
/// tab-separated `direction msg_type round sender bytes topic` per line.
#[derive(Debug, Default)]
pub struct MessageLog {
    entries: Mutex<Vec<LogEntry>>,
}

impl MessageLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, entry: LogEntry) {
        self.entries.lock().expect("log poisoned").push(entry);
    }

    pub fn entries(&self) -> Vec<LogEntry> {
        self.entries.lock().expect("log poisoned").clone()
    }

    pub fn to_text(&self) -> String {
        entries_to_text(&self.entries())
    }
}

pub fn entries_to_text(entries: &[LogEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let dir = match e.direction {
            Direction::Up => "up",
            Direction::Down => "down",
        };
        writeln!(out, "{dir}\t{}\t{}\t{}\t{}\t{}", e.msg_type.name(), e.round, e.sender, e.bytes, e.topic).unwrap();
    }
    out
}

pub fn entries_from_text(text: &str) -> Result<Vec<LogEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || CoreError::Format(format!("message log line {}: malformed", n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let direction = match f[0] {
                "up" => Direction::Up,
                "down" => Direction::Down,
                _ => return Err(bad()),
            };
            let msg_type = match f[1] {
                "UPDATE" => MsgType::Update,
                "MODEL" => MsgType::Model,
                "ABORT" => MsgType::Abort,
                _ => return Err(bad()),
            };
            Ok(LogEntry {
                direction,
                msg_type,
                round: f[2].parse().map_err(|_| bad())?,
                sender: f[3].parse().map_err(|_| bad())?,
                bytes: f[4].parse().map_err(|_| bad())?,
                topic: f[5].to_string(),
            })
        })
        .collect()
}

/// Byte totals `(up, down)` recounted from log entries.
pub fn recount(entries: &[LogEntry]) -> (u64, u64) {
    entries.iter().fold((0, 0), |(up, down), e| match e.direction {
        Direction::Up => (up + e.bytes, down),
        Direction::Down => (up, down + e.bytes),
    })
}

/// Wall seconds per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub client_compute: f64,
    pub encryption: f64,
    pub aggregate: f64,
    pub solve: f64,
    pub transport: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub run_id: String,
    pub algorithm: String,
    pub dataset: String,
    pub clients: usize,
    pub partition: String,
    /// Echo of the effective configuration, in order.
    pub config: Vec<(String, String)>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub phases: PhaseTimes,
    pub wall_seconds: f64,
    pub test_accuracy: f64,
    pub inflation_ratio: Option<f64>,
    /// Encryption time per client as a fraction of its plaintext compute time.
    pub encryption_overhead: Option<f64>,
    pub curve: Vec<CurveRow>,
}

impl RunReport {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_up + self.bytes_down
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# FedHENet run report\n");
        out.push_str("# cost proxies: exact wire bytes (envelopes included) and wall seconds; energy is not measured\n");
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("run_id", self.run_id.clone());
        kv("algorithm", self.algorithm.clone());
        kv("dataset", self.dataset.clone());
        kv("clients", self.clients.to_string());
        kv("partition", self.partition.clone());
        for (k, v) in &self.config {
            kv(&format!("config.{k}"), v.clone());
        }
        kv("bytes_up", self.bytes_up.to_string());
        kv("bytes_down", self.bytes_down.to_string());
        kv("bytes_total", self.total_bytes().to_string());
        kv("seconds.client_compute", fmt_f(self.phases.client_compute));
        kv("seconds.encryption", fmt_f(self.phases.encryption));
        kv("seconds.aggregate", fmt_f(self.phases.aggregate));
        kv("seconds.solve", fmt_f(self.phases.solve));
        kv("seconds.transport", fmt_f(self.phases.transport));
        kv("seconds.wall", fmt_f(self.wall_seconds));
        kv("test_accuracy", fmt_f(self.test_accuracy));
        if let Some(r) = self.inflation_ratio {
            kv("he.inflation_ratio", fmt_f(r));
        }
        if let Some(o) = self.encryption_overhead {
            kv("he.encryption_overhead", fmt_f(o));
        }
        kv("rounds", self.curve.len().to_string());
        out
    }

    /// Parses [`RunReport::to_text`] output; the curve is stored separately.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map: Vec<(String, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| CoreError::Format(format!("report line {}: expected `key = value`", n + 1)))?;
            map.push((k.to_string(), v.to_string()));
        }
        let get = |k: &str| -> Result<&str> {
            map.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| CoreError::Format(format!("report is missing `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| CoreError::Format(format!("report field `{k}` is not a number")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| CoreError::Format(format!("report field `{k}` is not an integer")))
        };
        let opt = |k: &str| -> Result<Option<f64>> { get(k).ok().map(|_| num(k)).transpose() };
        Ok(Self {
            run_id: get("run_id")?.to_string(),
            algorithm: get("algorithm")?.to_string(),
            dataset: get("dataset")?.to_string(),
            clients: int("clients")? as usize,
            partition: get("partition")?.to_string(),
            config: map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
                .collect(),
            bytes_up: int("bytes_up")?,
            bytes_down: int("bytes_down")?,
            phases: PhaseTimes {
                client_compute: num("seconds.client_compute")?,
                encryption: num("seconds.encryption")?,
                aggregate: num("seconds.aggregate")?,
                solve: num("seconds.solve")?,
                transport: num("seconds.transport")?,
            },
            wall_seconds: num("seconds.wall")?,
            test_accuracy: num("test_accuracy")?,
            inflation_ratio: opt("he.inflation_ratio")?,
            encryption_overhead: opt("he.encryption_overhead")?,
            curve: Vec::new(),
        })
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

/// Writes `report.txt` and `curve.csv` into `dir`.
pub fn emit_report(report: &RunReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.txt"), report.to_text())?;
    std::fs::write(dir.join("curve.csv"), curve_to_csv(&report.curve))?;
    Ok(())
}

pub fn load_report(dir: impl AsRef<Path>) -> Result<RunReport> {
    let dir = dir.as_ref();
    let mut report = RunReport::from_text(&std::fs::read_to_string(dir.join("report.txt"))?)?;
    report.curve = curve_from_csv(&std::fs::read_to_string(dir.join("curve.csv"))?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_sums_by_direction() {
        let l = ByteLedger::new();
        assert_eq!(l.total(Direction::Up), 0);
        l.record(Direction::Up, MsgType::Update, 10);
        l.record(Direction::Up, MsgType::Update, 5);
        l.record(Direction::Down, MsgType::Model, 7);
        assert_eq!(l.get(Direction::Up, MsgType::Update), Tally { messages: 2, bytes: 15 });
        assert_eq!((l.total(Direction::Up), l.total(Direction::Down)), (15, 7));
    }
}
