//! Simulated deployment of the guarded overlay: a controller, a TTP actor
//! and one task per node over the in-process network, plus log tooling.

pub mod adversary;
pub mod collusion;
pub mod config;
pub mod controller;
pub mod log;
pub mod messages;
pub mod metrics;
pub mod node;
pub mod ttp_actor;

/// Virtual compute charged per operation, in microseconds.
pub mod cost {
    pub const ROUTE_US: u64 = 20;
    pub const SIGN_US: u64 = 200;
    /// Per signature checked.
    pub const VERIFY_US: u64 = 1000;
    pub const PARTIAL_US: u64 = 200;
    pub const COMBINE_US: u64 = 50;
    pub const KEYGEN_US: u64 = 300;
}

pub use collusion::{collusion_mc, CollusionError, CollusionReport};
pub use config::{load_config, parse_config, AdversarySpec, Behavior, ConfigError, SimConfig};
pub use controller::{controller_run, HarnessError, Phase, PhaseError, RunOutput};
pub use log::{merge_logs, read_csv, read_csv_file, write_csv, EventKind, LogRecord, Mode, SchemaError};
pub use metrics::{summarize, MetricsQuery, MetricsSummary, Report};
