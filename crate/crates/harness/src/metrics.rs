//! Aggregates computed from a merged log.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::log::{EventKind, LogRecord, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsQuery {
    Latency,
    Compute,
    MsgSize,
    Hops,
    Rejects,
}

impl FromStr for MetricsQuery {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "latency" => MetricsQuery::Latency,
            "compute" => MetricsQuery::Compute,
            "msgsize" => MetricsQuery::MsgSize,
            "hops" => MetricsQuery::Hops,
            "rejects" => MetricsQuery::Rejects,
            _ => return Err(format!("unknown query {s:?} (latency, compute, msgsize, hops, rejects)")),
        })
    }
}

/// Running mean.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Mean {
    pub count: u64,
    pub sum: u64,
}

impl Mean {
    fn add(&mut self, v: u64) {
        self.count += 1;
        self.sum += v;
    }

    pub fn value(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum as f64 / self.count as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModeSummary {
    /// Over SEARCH_DONE records.
    pub latency_us: Mean,
    /// Over HOP records (one per routed message).
    pub compute_us: Mean,
    pub msg_bytes: Mean,
    pub hops: BTreeMap<u64, u64>,
    pub accepts: u64,
    pub rejects: u64,
    pub failures: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsSummary {
    pub modes: BTreeMap<Mode, ModeSummary>,
}

impl MetricsSummary {
    pub fn mode(&self, mode: Mode) -> ModeSummary {
        self.modes.get(&mode).cloned().unwrap_or_default()
    }
}

pub fn summarize(records: &[LogRecord]) -> MetricsSummary {
    let mut s = MetricsSummary::default();
    for r in records {
        let Some(mode) = r.mode else { continue };
        let m = s.modes.entry(mode).or_default();
        match r.event {
            EventKind::SearchDone => {
                if let Some(l) = r.latency_us {
                    m.latency_us.add(l);
                }
                if let Some(h) = r.hop_count {
                    *m.hops.entry(h).or_default() += 1;
                }
                match r.detail_field("outcome") {
                    Some("accept") => m.accepts += 1,
                    Some("rejected") => m.rejects += 1,
                    Some("failed") => m.failures += 1,
                    _ => {}
                }
            }
            EventKind::Hop => {
                if let Some(c) = r.compute_us {
                    m.compute_us.add(c);
                }
                if let Some(b) = r.msg_bytes {
                    m.msg_bytes.add(b);
                }
            }
            _ => {}
        }
    }
    s
}

fn fmt_mean(m: &Mean) -> String {
    m.value().map_or_else(|| "-".to_string(), |v| format!("{v:.1}"))
}

/// Text table for one query.
pub struct Report<'a> {
    pub summary: &'a MetricsSummary,
    pub query: MetricsQuery,
}

impl fmt::Display for Report<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = &self.summary.modes;
        match self.query {
            MetricsQuery::Latency => {
                writeln!(f, "mode,searches,avg_latency_us")?;
                for (mode, m) in rows {
                    writeln!(f, "{mode},{},{}", m.latency_us.count, fmt_mean(&m.latency_us))?;
                }
            }
            MetricsQuery::Compute => {
                writeln!(f, "mode,hops,avg_compute_us")?;
                for (mode, m) in rows {
                    writeln!(f, "{mode},{},{}", m.compute_us.count, fmt_mean(&m.compute_us))?;
                }
            }
            MetricsQuery::MsgSize => {
                writeln!(f, "mode,hops,avg_msg_bytes")?;
                for (mode, m) in rows {
                    writeln!(f, "{mode},{},{}", m.msg_bytes.count, fmt_mean(&m.msg_bytes))?;
                }
            }
            MetricsQuery::Hops => {
                writeln!(f, "mode,hop_count,searches")?;
                for (mode, m) in rows {
                    for (h, c) in &m.hops {
                        writeln!(f, "{mode},{h},{c}")?;
                    }
                }
            }
            MetricsQuery::Rejects => {
                writeln!(f, "mode,accepted,rejected,failed")?;
                for (mode, m) in rows {
                    writeln!(f, "{mode},{},{},{}", m.accepts, m.rejects, m.failures)?;
                }
            }
        }
        Ok(())
    }
}
