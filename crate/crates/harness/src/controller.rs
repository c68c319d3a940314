//! The experiment controller: spawns the TTP and the nodes, drives the
//! phases by message and collects the logs.

use std::cell::RefCell;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use guard_core::auth::{ChainFile, Verifier};
use guard_core::codec::{Reader, Writer};
use guard_core::crypto::{MasterSecret, PermutationKey, PublicParams};
use guard_core::fixture::{fixture_address, fixture_phys};
use guard_core::ids::NumericalId;
use guard_core::ttp::Ttp;
use guard_net::{Endpoint, Envelope, Sim};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::adversary::Adversary;
use crate::config::{ConfigError, SimConfig};
use crate::log::{merge_logs, read_csv, LogRecord, SchemaError};
use crate::messages::{kind, open_reply};
use crate::metrics::{summarize, MetricsSummary};
use crate::node::{Node, NodeSetup};
use crate::ttp_actor::spawn_ttp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Setup,
    Join,
    Initialization,
    Experiment,
    Collection,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Setup => "Setup",
            Phase::Join => "Join",
            Phase::Initialization => "Initialization",
            Phase::Experiment => "Experiment",
            Phase::Collection => "Collection",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("node {node} failed in phase {phase}: {reason}")]
pub struct PhaseError {
    pub node: usize,
    pub phase: Phase,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
}

/// Files and aggregates of one finished run.
#[derive(Debug)]
pub struct RunOutput {
    pub merged_csv: PathBuf,
    pub node_csvs: Vec<PathBuf>,
    pub params_file: PathBuf,
    pub chain_files: Vec<PathBuf>,
    /// Numerical ids in node-index order.
    pub ids: Vec<NumericalId>,
    pub records: Vec<LogRecord>,
    pub summary: MetricsSummary,
    pub virtual_end_us: u64,
}

/// Independent random streams derived from the run seed.
fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream((purpose << 32) | index);
    r
}

const STREAM_TTP: u64 = 1;
const STREAM_WORKLOAD: u64 = 2;
const STREAM_ADVERSARY: u64 = 3;

struct Collected {
    ids: Vec<NumericalId>,
    logs: Vec<Vec<u8>>,
    chains: Vec<Option<String>>,
}

/// Where the controller task currently is, for diagnosing stalls.
#[derive(Debug, Clone, Copy)]
struct Progress {
    phase: Phase,
    node: usize,
}

struct Controller {
    ep: Endpoint,
    cfg: Rc<SimConfig>,
    progress: Rc<RefCell<Progress>>,
    timeout: u64,
}

impl Controller {
    fn at(&self, phase: Phase, node: usize) {
        *self.progress.borrow_mut() = Progress { phase, node };
    }

    /// Next message of kind `k`; anything else is dropped.
    async fn expect(&self, k: u8) -> Envelope {
        loop {
            let env = self.ep.recv().await;
            if env.kind == k {
                return env;
            }
        }
    }

    fn status(body: &[u8], phase: Phase) -> Result<(usize, Reader<'_>), PhaseError> {
        let mut r = Reader::new(body);
        let bad = |reason: String| PhaseError { node: usize::MAX, phase, reason };
        let node = r.u32().map_err(|e| bad(e.to_string()))? as usize;
        match r.u8().map_err(|e| bad(e.to_string()))? {
            0 => Ok((node, r)),
            _ => Err(PhaseError { node, phase, reason: r.str().unwrap_or("malformed status").to_string() }),
        }
    }

    async fn run(
        &self,
        sim: &Sim,
        params: &PublicParams,
        verifier: Rc<RefCell<Verifier>>,
    ) -> Result<Collected, PhaseError> {
        let n = self.cfg.node_count;
        let mut nodes = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);

        // (1) nodes come up one at a time; each joins through node 0
        for i in 0..n {
            self.at(Phase::Join, i);
            let adversary = self.cfg.adversary(i).map(|spec| {
                Adversary::new(spec.clone(), stream(self.cfg.seed, STREAM_ADVERSARY, i as u64))
            });
            let setup = NodeSetup {
                index: i,
                phys: fixture_phys(i),
                address: fixture_address(i),
                introducer: (i > 0).then(|| fixture_address(0)),
                controller: self.ep.address().clone(),
                cfg: self.cfg.clone(),
                rng: stream(self.cfg.seed, STREAM_WORKLOAD, i as u64),
                adversary,
                verifier: verifier.clone(),
            };
            let node = Node::spawn(sim, setup)
                .map_err(|e| PhaseError { node: i, phase: Phase::Setup, reason: e.to_string() })?;
            nodes.push(node);
            let env = self.expect(kind::CTRL_REGISTER).await;
            let (who, mut r) = Self::status(&env.body, Phase::Join)?;
            let id = r.id().map_err(|e| PhaseError { node: who, phase: Phase::Join, reason: e.to_string() })?;
            ids.push(id);
        }
        let _ = params;

        // (2) Guard initialization, serialized
        for i in 0..n {
            self.at(Phase::Initialization, i);
            self.ep.send(&fixture_address(i), kind::INIT_START, Vec::new());
            let env = self.expect(kind::INIT_DONE).await;
            Self::status(&env.body, Phase::Initialization)?;
        }

        // (3) experiment request to everyone, (4) wait for all workloads
        self.at(Phase::Experiment, 0);
        let mut live = ids.clone();
        live.sort();
        let mut w = Writer::new();
        w.u32(live.len() as u32);
        for id in &live {
            w.id(*id);
        }
        let body = w.finish();
        for i in 0..n {
            self.ep.send(&fixture_address(i), kind::EXPERIMENT_REQUEST, body.clone());
        }
        let mut done = vec![false; n];
        while done.iter().any(|d| !d) {
            let env = self.expect(kind::WORKLOAD_DONE).await;
            let who = Reader::new(&env.body).u32().unwrap_or(u32::MAX) as usize;
            if let Some(d) = done.get_mut(who) {
                *d = true;
            }
            if let Some(next) = done.iter().position(|d| !d) {
                self.at(Phase::Experiment, next);
            }
        }

        // (5) log collection
        let mut logs = Vec::with_capacity(n);
        let mut chains = Vec::with_capacity(n);
        for i in 0..n {
            self.at(Phase::Collection, i);
            let fail = |reason: String| PhaseError { node: i, phase: Phase::Collection, reason };
            let env = self
                .ep
                .request(&fixture_address(i), kind::LOG_UPLOAD, Vec::new(), self.timeout)
                .await
                .map_err(|e| fail(e.to_string()))?;
            let mut r = open_reply(&env.body).map_err(fail)?;
            logs.push(r.bytes().map_err(|e| fail(e.to_string()))?.to_vec());
            let chain = if r.bool().map_err(|e| fail(e.to_string()))? {
                Some(r.str().map_err(|e| fail(e.to_string()))?.to_string())
            } else {
                None
            };
            chains.push(chain);
        }
        drop(nodes);
        Ok(Collected { ids, logs, chains })
    }
}

/// Runs the whole experiment and writes its outputs under
/// `cfg.output_dir`: `nodes/node_NNNN.csv`, `merged.csv`, `params.txt` and
/// one sample accepted chain per node under `chains/`.
pub fn controller_run(cfg: &SimConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let cfg = Rc::new(cfg.clone());
    let sim = Sim::new(cfg.seed, cfg.latency.clone());

    let mut trng = stream(cfg.seed, STREAM_TTP, 0);
    let mut master_seed = [0u8; 32];
    trng.fill_bytes(&mut master_seed);
    let setup_err = |reason: String| PhaseError { node: 0, phase: Phase::Setup, reason };
    let master = MasterSecret::new(&master_seed).map_err(|e| setup_err(e.to_string()))?;
    let perm = PermutationKey::random(&mut trng, cfg.m).map_err(|e| setup_err(e.to_string()))?;
    let ttp = Ttp::new(master, perm, trng.next_u64()).map_err(|e| setup_err(e.to_string()))?;
    let params = ttp.publish_params();
    let timeout = 100 * cfg.latency.default_timeout_us() + 1_000_000;
    spawn_ttp(&sim, ttp, timeout).map_err(|e| setup_err(e.to_string()))?;

    let ep = sim.bind(cfg.controller.clone()).map_err(|e| setup_err(e.to_string()))?;
    let progress = Rc::new(RefCell::new(Progress { phase: Phase::Setup, node: 0 }));
    let controller = Controller { ep, cfg: cfg.clone(), progress: progress.clone(), timeout };
    let verifier = Rc::new(RefCell::new(Verifier::new(params.clone())));
    let result: Rc<RefCell<Option<Result<Collected, PhaseError>>>> = Rc::default();
    {
        let result = result.clone();
        let sim2 = sim.clone();
        let params = params.clone();
        sim.spawn(async move {
            let r = controller.run(&sim2, &params, verifier).await;
            *result.borrow_mut() = Some(r);
        });
    }
    sim.run_until(|| result.borrow().is_some());
    let collected = match result.borrow_mut().take() {
        Some(r) => r?,
        None => {
            let p = *progress.borrow();
            return Err(PhaseError { node: p.node, phase: p.phase, reason: "stalled with no pending events".into() }.into());
        }
    };
    let virtual_end_us = sim.now();
    write_outputs(&cfg.output_dir, &params, collected, virtual_end_us)
}

fn write_outputs(
    dir: &Path,
    params: &PublicParams,
    collected: Collected,
    virtual_end_us: u64,
) -> Result<RunOutput, HarnessError> {
    let nodes_dir = dir.join("nodes");
    let chains_dir = dir.join("chains");
    fs::create_dir_all(&nodes_dir)?;
    fs::create_dir_all(&chains_dir)?;
    let mut node_csvs = Vec::new();
    for (i, bytes) in collected.logs.iter().enumerate() {
        // reject malformed uploads before they reach the merge
        read_csv(bytes.as_slice())?;
        let p = nodes_dir.join(format!("node_{i:04}.csv"));
        fs::write(&p, bytes)?;
        node_csvs.push(p);
    }
    let merged_csv = dir.join("merged.csv");
    merge_logs(&node_csvs, &merged_csv)?;
    let params_file = dir.join("params.txt");
    fs::write(&params_file, params.to_text())?;
    let mut chain_files = Vec::new();
    for (i, c) in collected.chains.iter().enumerate() {
        if let Some(text) = c {
            debug_assert!(ChainFile::from_text(text).is_ok());
            let p = chains_dir.join(format!("node_{i:04}.chain"));
            fs::write(&p, text)?;
            chain_files.push(p);
        }
    }
    let records = crate::log::read_csv_file(&merged_csv)?;
    let summary = summarize(&records);
    Ok(RunOutput {
        merged_csv,
        node_csvs,
        params_file,
        chain_files,
        ids: collected.ids,
        records,
        summary,
        virtual_end_us,
    })
}
