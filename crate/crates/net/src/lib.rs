//! Deterministic discrete-event network: virtual clock, seeded latency and
//! loss, addressed endpoints with one-way and request/response messaging,
//! and a single-threaded executor for actor tasks.

mod executor;
mod sim;
pub mod wire;

pub use sim::{
    account, Endpoint, Envelope, LatencyModel, LinkModel, LogEntry, NetError, Recv, Response, Sim, SizeRecord, Sleep,
    HEADER_BYTES,
};
