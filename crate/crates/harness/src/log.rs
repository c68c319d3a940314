//! Per-node CSV event logs and their merge.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER: [&str; 12] = [
    "ts_us",
    "node_id",
    "event",
    "search_seq",
    "mode",
    "nonce_hex",
    "q_hex",
    "hop_count",
    "latency_us",
    "msg_bytes",
    "compute_us",
    "detail",
];

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("header mismatch: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("record {line}: {reason}")]
    Record { line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for SchemaError {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map_or(0, |p| p.line());
        match e.into_kind() {
            csv::ErrorKind::Io(io) => SchemaError::Io(io),
            other => SchemaError::Record { line, reason: format!("{other:?}") },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Register,
    JoinDone,
    GuardsDone,
    SearchStart,
    SearchDone,
    Hop,
    Cosign,
    Verify,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "AUTH")]
    Auth,
    #[serde(rename = "PLAIN")]
    Plain,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Auth => "AUTH",
            Mode::Plain => "PLAIN",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "AUTH" => Ok(Mode::Auth),
            "PLAIN" => Ok(Mode::Plain),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

/// One CSV row. Fields that do not apply to an event are left empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub ts_us: u64,
    pub node_id: String,
    pub event: EventKind,
    pub search_seq: Option<u64>,
    pub mode: Option<Mode>,
    pub nonce_hex: String,
    pub q_hex: String,
    pub hop_count: Option<u64>,
    pub latency_us: Option<u64>,
    pub msg_bytes: Option<u64>,
    pub compute_us: Option<u64>,
    pub detail: String,
}

impl LogRecord {
    pub fn new(ts_us: u64, node_id: impl Into<String>, event: EventKind) -> Self {
        LogRecord {
            ts_us,
            node_id: node_id.into(),
            event,
            search_seq: None,
            mode: None,
            nonce_hex: String::new(),
            q_hex: String::new(),
            hop_count: None,
            latency_us: None,
            msg_bytes: None,
            compute_us: None,
            detail: String::new(),
        }
    }

    /// Value of `key` in a `k=v;k=v` detail string.
    pub fn detail_field(&self, key: &str) -> Option<&str> {
        self.detail.split(';').find_map(|kv| kv.split_once('=').filter(|(k, _)| *k == key).map(|(_, v)| v))
    }
}

pub fn write_csv<W: Write>(out: W, records: &[LogRecord]) -> Result<(), SchemaError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(path: &Path, records: &[LogRecord]) -> Result<(), SchemaError> {
    write_csv(File::create(path)?, records)
}

/// Parses a CSV whose header must match [`HEADER`] exactly.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<LogRecord>, SchemaError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let found = r.headers()?.clone();
    if found.iter().ne(HEADER.iter().copied()) {
        return Err(SchemaError::Header { expected: HEADER.join(","), found: found.iter().collect::<Vec<_>>().join(",") });
    }
    r.deserialize().map(|rec| rec.map_err(SchemaError::from)).collect()
}

pub fn read_csv_file(path: &Path) -> Result<Vec<LogRecord>, SchemaError> {
    read_csv(File::open(path)?)
}

/// Stable merge of per-node logs ordered by `(ts_us, node_id)`.
pub fn merge_records(logs: impl IntoIterator<Item = Vec<LogRecord>>) -> Vec<LogRecord> {
    let mut all: Vec<LogRecord> = logs.into_iter().flatten().collect();
    all.sort_by(|a, b| (a.ts_us, &a.node_id).cmp(&(b.ts_us, &b.node_id)));
    all
}

/// Reads every file in `paths`, merges and writes the result to `out`.
pub fn merge_logs(paths: &[impl AsRef<Path>], out: &Path) -> Result<usize, SchemaError> {
    let logs = paths.iter().map(|p| read_csv_file(p.as_ref())).collect::<Result<Vec<_>, _>>()?;
    let merged = merge_records(logs);
    write_csv_file(out, &merged)?;
    Ok(merged.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ts: u64, node: &str, event: EventKind) -> LogRecord {
        LogRecord::new(ts, node, event)
    }

    #[test]
    fn header_row_is_exact() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "ts_us,node_id,event,search_seq,mode,nonce_hex,q_hex,hop_count,latency_us,msg_bytes,compute_us,detail\n"
        );
    }

    #[test]
    fn roundtrip_with_empty_fields() {
        let mut r = rec(12, "00000000000000ff", EventKind::SearchDone);
        r.mode = Some(Mode::Auth);
        r.search_seq = Some(3);
        r.latency_us = Some(4400);
        r.detail = "outcome=accept;path=a/b".into();
        let recs = vec![r, rec(13, "00000000000000ff", EventKind::JoinDone)];
        let mut buf = Vec::new();
        write_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("12,00000000000000ff,SEARCH_DONE,3,AUTH,,,,4400,,,outcome=accept;path=a/b\n"));
        assert_eq!(read_csv(buf.as_slice()).unwrap(), recs);
        assert_eq!(recs[0].detail_field("path"), Some("a/b"));
        assert_eq!(recs[0].detail_field("result"), None);
    }

    #[test]
    fn wrong_header_is_schema_error() {
        let err = read_csv("ts,node\n1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, SchemaError::Header { .. }));
        let bad_event = format!("{}\n1,a,EXPLODE,,,,,,,,,\n", HEADER.join(","));
        assert!(matches!(read_csv(bad_event.as_bytes()).unwrap_err(), SchemaError::Record { .. }));
    }

    #[test]
    fn merge_keeps_every_record_once() {
        let a = vec![rec(5, "b", EventKind::Hop), rec(9, "b", EventKind::Hop), rec(9, "b", EventKind::Verify)];
        let b = vec![rec(1, "a", EventKind::Hop), rec(9, "a", EventKind::Cosign)];
        let merged = merge_records([a.clone(), b.clone()]);
        assert_eq!(merged.len(), 5);
        let keys: Vec<_> = merged.iter().map(|r| (r.ts_us, r.node_id.as_str(), r.event)).collect();
        assert_eq!(
            keys,
            [
                (1, "a", EventKind::Hop),
                (5, "b", EventKind::Hop),
                (9, "a", EventKind::Cosign),
                (9, "b", EventKind::Hop),
                (9, "b", EventKind::Verify)
            ]
        );
        for r in a.iter().chain(&b) {
            assert_eq!(merged.iter().filter(|m| *m == r).count(), 1);
        }
    }

    #[test]
    fn merge_files() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("1.csv");
        let p2 = dir.path().join("2.csv");
        write_csv_file(&p1, &[rec(2, "x", EventKind::Register)]).unwrap();
        write_csv_file(&p2, &[rec(1, "y", EventKind::Register)]).unwrap();
        let out = dir.path().join("merged.csv");
        assert_eq!(merge_logs(&[&p1, &p2], &out).unwrap(), 2);
        let got = read_csv_file(&out).unwrap();
        assert_eq!(got[0].node_id, "y");
    }
}
