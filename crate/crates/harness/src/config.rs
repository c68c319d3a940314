//! Flat `key=value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use guard_core::ids::Address;
use guard_net::LatencyModel;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("missing required field `{0}`")]
    Missing(&'static str),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("unknown field `{0}`")]
    Unknown(String),
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Behavior {
    Drop,
    Misdirect,
    Manipulate,
    Falsify,
}

impl Behavior {
    pub const ALL: [Behavior; 4] = [Behavior::Drop, Behavior::Misdirect, Behavior::Manipulate, Behavior::Falsify];

    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::Drop => "drop",
            Behavior::Misdirect => "misdirect",
            Behavior::Manipulate => "manipulate",
            Behavior::Falsify => "falsify",
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Behavior::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown behavior {s:?}"))
    }
}

/// Deviations of one node. Each behavior fires on its fraction of the
/// queries routed through the node; the first one that fires applies.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarySpec {
    pub node: usize,
    pub behaviors: Vec<(Behavior, f64)>,
}

/// Which ids the workload searches for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryTargets {
    /// Ids of live nodes.
    #[default]
    Live,
    /// Uniform over the whole id space.
    Any,
}

/// Faults injected during Guard initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitFault {
    /// Submit the lookup table with one attestation removed.
    BadTableProof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub node_count: usize,
    pub message_count: usize,
    pub wait_time_max_s: u64,
    pub message_length: usize,
    pub controller: Address,
    pub seed: u64,
    pub m: usize,
    pub latency: LatencyModel,
    pub adversaries: Vec<AdversarySpec>,
    /// Configured seconds are divided by this to get virtual seconds.
    pub time_scale: u64,
    pub output_dir: PathBuf,
    pub query_targets: QueryTargets,
    pub init_faults: BTreeMap<usize, InitFault>,
}

impl SimConfig {
    /// Defaults for everything but the node count and seed.
    pub fn new(node_count: usize, seed: u64) -> Self {
        SimConfig {
            node_count,
            message_count: 1000,
            wait_time_max_s: 5,
            message_length: 300,
            controller: Address::new("controller", 5000),
            seed,
            m: 32,
            latency: LatencyModel::new(1000, 200),
            adversaries: Vec::new(),
            time_scale: 1000,
            output_dir: PathBuf::from("guard-out"),
            query_targets: QueryTargets::Live,
            init_faults: BTreeMap::new(),
        }
    }

    /// Virtual microseconds for `seconds` of configured time.
    pub fn scaled_us(&self, seconds: f64) -> u64 {
        (seconds * 1e6 / self.time_scale as f64).round() as u64
    }

    pub fn adversary(&self, node: usize) -> Option<&AdversarySpec> {
        self.adversaries.iter().find(|a| a.node == node)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("node_count", self.node_count as u64),
            ("message_count", self.message_count as u64),
            ("wait_time_max_s", self.wait_time_max_s),
            ("message_length", self.message_length as u64),
            ("m", self.m as u64),
            ("time_scale", self.time_scale),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if self.m > 64 {
            return Err(invalid("m", "at most 64 bits"));
        }
        if self.adversaries.len() >= self.node_count {
            return Err(invalid("adv", "adversary count must be below node_count"));
        }
        for a in &self.adversaries {
            if a.node >= self.node_count {
                return Err(invalid(&format!("adv.{}", a.node), "node index out of range"));
            }
        }
        for &i in self.init_faults.keys() {
            if i >= self.node_count {
                return Err(invalid(&format!("init_fault.{i}"), "node index out of range"));
            }
        }
        Ok(())
    }
}

fn num<T: FromStr>(field: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e: T::Err| invalid(field, e.to_string()))
}

fn parse_adversary(field: &str, node: usize, v: &str) -> Result<AdversarySpec, ConfigError> {
    let mut behaviors = Vec::new();
    for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (b, frac) = part.split_once(':').unwrap_or((part, "1.0"));
        let b: Behavior = b.trim().parse().map_err(|e: String| invalid(field, e))?;
        let frac: f64 = num(field, frac.trim())?;
        if !(0.0..=1.0).contains(&frac) {
            return Err(invalid(field, "fraction must lie in [0, 1]"));
        }
        behaviors.push((b, frac));
    }
    if behaviors.is_empty() {
        return Err(invalid(field, "no behavior given"));
    }
    Ok(AdversarySpec { node, behaviors })
}

pub fn parse_config(text: &str) -> Result<SimConfig, ConfigError> {
    let mut cfg = SimConfig::new(0, 0);
    let mut node_count = None;
    let mut seed = None;
    let mut host = None;
    let mut port = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "node_count" => node_count = Some(num(k, v)?),
            "message_count" => cfg.message_count = num(k, v)?,
            "wait_time_max_s" => cfg.wait_time_max_s = num(k, v)?,
            "message_length" => cfg.message_length = num(k, v)?,
            "controller_host" => host = Some(v.to_string()),
            "controller_port" => port = Some(num::<u16>(k, v)?),
            "seed" => seed = Some(num(k, v)?),
            "m" => cfg.m = num(k, v)?,
            "latency_base_us" => cfg.latency.base_us = num(k, v)?,
            "latency_jitter_us" => cfg.latency.jitter_us = num(k, v)?,
            "time_scale" => cfg.time_scale = num(k, v)?,
            "output_dir" => cfg.output_dir = PathBuf::from(v),
            "query_targets" => {
                cfg.query_targets = match v {
                    "live" => QueryTargets::Live,
                    "any" => QueryTargets::Any,
                    _ => return Err(invalid(k, "expected `live` or `any`")),
                }
            }
            _ => {
                if let Some(idx) = k.strip_prefix("adv.") {
                    let node = num(k, idx)?;
                    if cfg.adversary(node).is_some() {
                        return Err(invalid(k, "duplicate adversary entry"));
                    }
                    cfg.adversaries.push(parse_adversary(k, node, v)?);
                } else if let Some(idx) = k.strip_prefix("init_fault.") {
                    let fault = match v {
                        "bad_table_proof" => InitFault::BadTableProof,
                        _ => return Err(invalid(k, "unknown fault")),
                    };
                    cfg.init_faults.insert(num(k, idx)?, fault);
                } else {
                    return Err(ConfigError::Unknown(k.to_string()));
                }
            }
        }
    }
    cfg.node_count = node_count.ok_or(ConfigError::Missing("node_count"))?;
    cfg.seed = seed.ok_or(ConfigError::Missing("seed"))?;
    if let Some(h) = host {
        cfg.controller.host = h;
    }
    if let Some(p) = port {
        cfg.controller.port = p;
    }
    cfg.adversaries.sort_by_key(|a| a.node);
    cfg.validate()?;
    Ok(cfg)
}

/// Relative `output_dir` values resolve against the config file's directory.
pub fn load_config(path: &Path) -> Result<SimConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })?;
    let mut cfg = parse_config(&text)?;
    if cfg.output_dir.is_relative() {
        if let Some(dir) = path.parent() {
            cfg.output_dir = dir.join(&cfg.output_dir);
        }
    }
    Ok(cfg)
}
