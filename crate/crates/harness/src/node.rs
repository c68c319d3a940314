//! An overlay node as a network actor.
//!
//! Cheap requests (table reads, attestations, cosigning) are answered
//! inline by the receive loop, with their compute cost charged as reply
//! delay. Anything that has to wait on other nodes runs as its own task.
//! Node state is never borrowed across an await.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::pin::pin;
use std::rc::Rc;

use futures::channel::oneshot;
use futures::future::{join_all, select, Either};
use guard_core::auth::{
    make_hop_transcript, self_sign, ChainFile, Expectation, NonceLedger, RouterCredentials, RoutingTranscript, Tail, Verdict, Verifier,
};
use guard_core::codec::{Reader, Writer};
use guard_core::crypto::{combine_partials, random_nonce, sign, Certificate, Nonce, PartialSignature, PublicParams};
use guard_core::ids::{Address, NumericalId};
use guard_core::skipgraph::{
    build_table_proof, join, local_next_hop, make_attestation_message, search_by_name_id, LookupTable, NeighborEntry,
    OverlayRemote, RemoteError, RoutingDecision, Side, SignedAttestation,
};
use guard_core::ttp::{answer_challenge, GuardNames, GuardProvision, GuardRole, PhysicalIdentity, RegistrationGrant};
use guard_net::{Endpoint, Envelope, NetError, Sim, HEADER_BYTES};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::adversary::{self, Adversary};
use crate::config::{Behavior, InitFault, QueryTargets, SimConfig};
use crate::cost;
use crate::log::{EventKind, LogRecord, Mode};
use crate::messages::{err_reply, kind, ok_reply, open_reply, Answer, Outcome, Query};
use crate::ttp_actor::{challenge_request, read_challenge, ttp_address, write_signatures};

/// Routers a query may visit before it is abandoned.
pub const MAX_HOPS: usize = 128;
/// Virtual time an initiator waits for a search to come back.
pub const SEARCH_TIMEOUT_US: u64 = 2_000_000;

/// Everything a node is handed at spawn time.
pub struct NodeSetup {
    pub index: usize,
    pub phys: PhysicalIdentity,
    pub address: Address,
    pub introducer: Option<Address>,
    pub controller: Address,
    pub cfg: Rc<SimConfig>,
    pub rng: ChaCha20Rng,
    pub adversary: Option<Adversary>,
    /// Memo of positive certificate and signature checks shared by all
    /// nodes. Verdicts do not depend on it and compute time is charged per
    /// signature regardless, so it only saves wall time.
    pub verifier: Rc<RefCell<Verifier>>,
}

struct State {
    grant: Option<RegistrationGrant>,
    params: Option<PublicParams>,
    table: Option<LookupTable>,
    credentials: Option<RouterCredentials>,
    guards: Option<[NeighborEntry; 3]>,
    authenticated: bool,
    /// Provisions held as a guard, by (subject, role).
    provisions: BTreeMap<(NumericalId, GuardRole), GuardProvision>,
    ledger: NonceLedger,
    log: Vec<LogRecord>,
    /// Open searches by (mode, seq); lookups only, never iterated.
    pending: HashMap<(Mode, u64), oneshot::Sender<Outcome>>,
    next_seq: u64,
    rng: ChaCha20Rng,
    adversary: Option<Adversary>,
    sample_chain: Option<ChainFile>,
}

pub struct Node {
    index: usize,
    phys: PhysicalIdentity,
    ep: Endpoint,
    sim: Sim,
    cfg: Rc<SimConfig>,
    controller: Address,
    verifier: Rc<RefCell<Verifier>>,
    control_timeout_us: u64,
    st: RefCell<State>,
}

/// Per-hop facts the router logs.
struct HopLog {
    compute_us: u64,
    msg_bytes: Option<usize>,
    detail: String,
}

fn hex_or_empty(id: Option<NumericalId>) -> String {
    id.map(NumericalId::to_hex).unwrap_or_default()
}

fn path_string(path: &[NumericalId]) -> String {
    path.iter().map(|id| id.to_hex()).collect::<Vec<_>>().join("/")
}

fn net_to_remote(e: NetError, addr: &Address) -> RemoteError {
    match e {
        NetError::Timeout(_) => RemoteError::Timeout(addr.clone()),
        _ => RemoteError::Unreachable(addr.clone()),
    }
}

/// Overlay access over the simulated network.
struct NetRemote<'a> {
    ep: &'a Endpoint,
    timeout: u64,
}

impl OverlayRemote for NetRemote<'_> {
    async fn fetch_table(&mut self, addr: &Address) -> Result<LookupTable, RemoteError> {
        let env = self.ep.request(addr, kind::FETCH_TABLE, Vec::new(), self.timeout).await.map_err(|e| net_to_remote(e, addr))?;
        let mut r = open_reply(&env.body).map_err(|e| RemoteError::BadReply(addr.clone(), e))?;
        LookupTable::read(&mut r).map_err(|e| RemoteError::BadReply(addr.clone(), e.to_string()))
    }

    async fn set_neighbor(
        &mut self,
        addr: &Address,
        level: usize,
        side: Side,
        entry: NeighborEntry,
    ) -> Result<(), RemoteError> {
        let mut w = Writer::new();
        w.u32(level as u32).u8(side_code(side));
        entry.write(&mut w);
        let env =
            self.ep.request(addr, kind::SET_NEIGHBOR, w.finish(), self.timeout).await.map_err(|e| net_to_remote(e, addr))?;
        open_reply(&env.body).map(|_| ()).map_err(|e| RemoteError::BadReply(addr.clone(), e))
    }
}

fn side_code(s: Side) -> u8 {
    match s {
        Side::Left => 0,
        Side::Right => 1,
    }
}

fn side_from(code: u8) -> Option<Side> {
    match code {
        0 => Some(Side::Left),
        1 => Some(Side::Right),
        _ => None,
    }
}

fn role_code(r: GuardRole) -> u8 {
    r.index() as u8
}

impl Node {
    pub fn spawn(sim: &Sim, setup: NodeSetup) -> Result<Rc<Node>, NetError> {
        let ep = sim.bind(setup.address.clone())?;
        let control_timeout_us = 100 * sim.latency().default_timeout_us() + 1_000_000;
        let node = Rc::new(Node {
            index: setup.index,
            phys: setup.phys,
            ep,
            sim: sim.clone(),
            cfg: setup.cfg,
            controller: setup.controller,
            verifier: setup.verifier,
            control_timeout_us,
            st: RefCell::new(State {
                grant: None,
                params: None,
                table: None,
                credentials: None,
                guards: None,
                authenticated: false,
                provisions: BTreeMap::new(),
                ledger: NonceLedger::default(),
                log: Vec::new(),
                pending: HashMap::new(),
                next_seq: 0,
                rng: setup.rng,
                adversary: setup.adversary,
                sample_chain: None,
            }),
        });
        let n = node.clone();
        sim.spawn(async move {
            loop {
                let env = n.ep.recv().await;
                n.dispatch(env);
            }
        });
        let n = node.clone();
        let introducer = setup.introducer;
        sim.spawn(async move {
            let res = n.start(introducer).await;
            let mut w = Writer::new();
            w.u32(n.index as u32);
            match res {
                Ok(id) => w.u8(0).id(id),
                Err(e) => w.u8(1).str(&e),
            };
            n.ep.send(&n.controller, kind::CTRL_REGISTER, w.finish());
        });
        Ok(node)
    }

    pub fn id(&self) -> Option<NumericalId> {
        self.st.borrow().grant.as_ref().map(|g| g.numerical_id)
    }

    fn me(&self) -> NumericalId {
        self.id().expect("registered")
    }

    fn log(&self, rec: LogRecord) {
        self.st.borrow_mut().log.push(rec);
    }

    fn record(&self, event: EventKind) -> LogRecord {
        LogRecord::new(self.sim.now(), hex_or_empty(self.id()), event)
    }

    async fn call(&self, dst: &Address, k: u8, body: Vec<u8>) -> Result<Vec<u8>, String> {
        let env = self.ep.request(dst, k, body, self.control_timeout_us).await.map_err(|e| e.to_string())?;
        Ok(env.body)
    }

    /// Registration with the TTP, then the overlay join.
    async fn start(&self, introducer: Option<Address>) -> Result<NumericalId, String> {
        let mut w = Writer::new();
        w.bytes(&self.phys.0).address(self.ep.address());
        let body = self.call(&ttp_address(), kind::TTP_REGISTER, w.finish()).await?;
        let mut r = open_reply(&body)?;
        let grant = RegistrationGrant::read(&mut r).map_err(|e| e.to_string())?;
        let params = PublicParams::read(&mut r).map_err(|e| e.to_string())?;
        let entry = grant.entry(self.ep.address().clone());
        let id = grant.numerical_id;
        {
            let mut st = self.st.borrow_mut();
            st.grant = Some(grant);
            st.params = Some(params);
        }
        self.log(self.record(EventKind::Register));

        let mut remote = NetRemote { ep: &self.ep, timeout: self.control_timeout_us };
        let table = join(&mut remote, entry, introducer.as_ref()).await.map_err(|e| e.to_string())?;
        let height = table.height();
        self.st.borrow_mut().table = Some(table);
        let mut rec = self.record(EventKind::JoinDone);
        rec.detail = format!("levels={height}");
        self.log(rec);
        Ok(id)
    }

    fn dispatch(self: &Rc<Self>, env: Envelope) {
        match env.kind {
            kind::FETCH_TABLE => {
                let body = match &self.st.borrow().table {
                    Some(t) => ok_reply(|w| t.write(w)),
                    None => err_reply("not joined"),
                };
                self.ep.reply(&env, env.kind, body, cost::ROUTE_US);
            }
            kind::SET_NEIGHBOR => {
                let body = self.set_neighbor(&env.body).map_or_else(|e| err_reply(&e), |()| ok_reply(|_| {}));
                self.ep.reply(&env, env.kind, body, cost::ROUTE_US);
            }
            kind::ATTEST => {
                let body = self.attest(&env.body).unwrap_or_else(|e| err_reply(&e));
                self.ep.reply(&env, env.kind, body, cost::SIGN_US);
            }
            kind::PROVISION => {
                let body = match GuardProvision::read(&mut Reader::new(&env.body)) {
                    Ok(p) => {
                        let key = (p.subject().numerical_id, p.role);
                        self.st.borrow_mut().provisions.insert(key, p);
                        ok_reply(|_| {})
                    }
                    Err(e) => err_reply(&e.to_string()),
                };
                self.ep.reply(&env, env.kind, body, cost::ROUTE_US);
            }
            kind::COSIGN => {
                let body = self.cosign_as_guard(&env.body).unwrap_or_else(|e| err_reply(&e));
                self.ep.reply(&env, env.kind, body, cost::ROUTE_US + cost::PARTIAL_US);
            }
            kind::GUARD_REQUEST => {
                let n = self.clone();
                self.sim.spawn(async move {
                    let body = match n.ensure_authenticated().await {
                        Ok(()) => ok_reply(|_| {}),
                        Err(e) => err_reply(&e),
                    };
                    n.ep.reply(&env, env.kind, body, cost::ROUTE_US);
                });
            }
            kind::QUERY => {
                if let Ok(q) = Query::decode(&env.body) {
                    self.sim.spawn(self.clone().route(q));
                }
            }
            kind::RESULT | kind::QUERY_REJECTED | kind::QUERY_FAILED => {
                if let Ok(a) = Answer::decode(env.kind, &env.body) {
                    let tx = self.st.borrow_mut().pending.remove(&(a.mode, a.seq));
                    if let Some(tx) = tx {
                        let _ = tx.send(a.outcome);
                    }
                }
            }
            kind::INIT_START => {
                let n = self.clone();
                self.sim.spawn(async move {
                    let res = n.initialize().await;
                    let mut w = Writer::new();
                    w.u32(n.index as u32);
                    match res {
                        Ok(()) => w.u8(0),
                        Err(e) => w.u8(1).str(&e),
                    };
                    n.ep.send(&n.controller, kind::INIT_DONE, w.finish());
                });
            }
            kind::EXPERIMENT_REQUEST => {
                let mut r = Reader::new(&env.body);
                let live = r.u32().ok().and_then(|n| (0..n).map(|_| r.id().ok()).collect::<Option<Vec<_>>>());
                if let Some(live) = live {
                    self.sim.spawn(self.clone().workload(live));
                }
            }
            kind::LOG_UPLOAD => {
                let body = self.upload();
                self.ep.reply(&env, env.kind, body, 0);
            }
            _ => {}
        }
    }

    fn set_neighbor(&self, body: &[u8]) -> Result<(), String> {
        let mut r = Reader::new(body);
        let level = r.u32().map_err(|e| e.to_string())? as usize;
        let side = side_from(r.u8().map_err(|e| e.to_string())?).ok_or("bad side")?;
        let entry = NeighborEntry::read(&mut r).map_err(|e| e.to_string())?;
        let mut st = self.st.borrow_mut();
        let table = st.table.as_mut().ok_or("not joined")?;
        table.set(level, side, Some(entry));
        Ok(())
    }

    /// Signs "`owner` has me at (level, side)" if my own table agrees.
    fn attest(&self, body: &[u8]) -> Result<Vec<u8>, String> {
        let mut r = Reader::new(body);
        let owner = r.id().map_err(|e| e.to_string())?;
        let level = r.u32().map_err(|e| e.to_string())? as usize;
        let side = side_from(r.u8().map_err(|e| e.to_string())?).ok_or("bad side")?;
        let st = self.st.borrow();
        let table = st.table.as_ref().ok_or("not joined")?;
        if table.neighbor(level, side.opposite()).map(|e| e.numerical_id) != Some(owner) {
            return Err(format!("{owner} is not my {} neighbor at level {level}", side.opposite()));
        }
        let grant = st.grant.as_ref().ok_or("not registered")?;
        let sig = sign(&grant.signing_key, &make_attestation_message(owner, level, side));
        Ok(ok_reply(|w| {
            w.raw(sig.as_bytes());
            grant.certificate.write(w);
        }))
    }

    fn cosign_as_guard(&self, body: &[u8]) -> Result<Vec<u8>, String> {
        let mut r = Reader::new(body);
        let subject = r.id().map_err(|e| e.to_string())?;
        let role = GuardRole::from_index(r.u8().map_err(|e| e.to_string())?).ok_or("bad role")?;
        let t = RoutingTranscript::decode(r.bytes().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let st = self.st.borrow();
        let p = st.provisions.get(&(subject, role)).ok_or_else(|| format!("not the {role} guard of {subject}"))?;
        let partial = guard_core::auth::guard_evaluate(p, &t).map_err(|e| e.to_string())?;
        Ok(ok_reply(|w| partial.write(w)))
    }

    async fn ensure_authenticated(&self) -> Result<(), String> {
        if self.st.borrow().authenticated {
            return Ok(());
        }
        let ch = read_challenge(&self.call(&ttp_address(), kind::CHALLENGE, challenge_request(&self.phys)).await?)?;
        let sigs = {
            let st = self.st.borrow();
            answer_challenge(&st.grant.as_ref().ok_or("not registered")?.signing_key, &ch)
        };
        self.sim.sleep(cost::SIGN_US * sigs.len() as u64).await;
        let mut w = Writer::new();
        w.u64(ch.session);
        write_signatures(&mut w, &sigs);
        open_reply(&self.call(&ttp_address(), kind::CHALLENGE_RESPONSE, w.finish()).await?)?;
        self.st.borrow_mut().authenticated = true;
        Ok(())
    }

    /// Guard initialization: table proof, authentication, guard lookup and
    /// provisioning.
    async fn initialize(&self) -> Result<(), String> {
        let (table, me) = {
            let st = self.st.borrow();
            (st.table.clone().ok_or("not joined")?, st.grant.as_ref().ok_or("not registered")?.numerical_id)
        };
        let mut atts = BTreeMap::new();
        for (level, side, e) in table.entries() {
            let mut w = Writer::new();
            w.id(me).u32(level as u32).u8(side_code(side));
            let body = self.call(&e.address, kind::ATTEST, w.finish()).await?;
            let mut r = open_reply(&body).map_err(|err| format!("attestation from {}: {err}", e.numerical_id))?;
            let signature = guard_core::crypto::Signature(r.array().map_err(|e| e.to_string())?);
            let certificate = Certificate::read(&mut r).map_err(|e| e.to_string())?;
            atts.insert((level, side), SignedAttestation { signature, certificate });
        }
        let mut proof = build_table_proof(&table, |l, s, _, _| atts.get(&(l, s)).cloned()).map_err(|e| e.to_string())?;
        if self.cfg.init_faults.get(&self.index) == Some(&InitFault::BadTableProof) {
            proof.remove(0, Side::Right);
        }

        self.ensure_authenticated().await?;
        let mut w = Writer::new();
        table.write(&mut w);
        proof.write(&mut w);
        let body = self.call(&ttp_address(), kind::TABLE_SUBMIT, w.finish()).await?;
        let names = GuardNames::read(&mut open_reply(&body).map_err(|e| format!("table rejected: {e}"))?)
            .map_err(|e| e.to_string())?;

        let mut remote = NetRemote { ep: &self.ep, timeout: self.control_timeout_us };
        let mut guards = Vec::with_capacity(3);
        for role in GuardRole::ALL {
            let g = search_by_name_id(&mut remote, &table, names.get(role)).await.map_err(|e| e.to_string())?;
            guards.push(g);
        }
        let guards: [NeighborEntry; 3] = guards.try_into().expect("three roles");
        for g in &guards {
            let mut w = Writer::new();
            w.id(me);
            open_reply(&self.call(&g.address, kind::GUARD_REQUEST, w.finish()).await?)
                .map_err(|e| format!("guard {}: {e}", g.numerical_id))?;
        }
        let mut w = Writer::new();
        w.id(me);
        for g in &guards {
            g.write(&mut w);
        }
        let body = self.call(&ttp_address(), kind::GUARD_CONNECT, w.finish()).await?;
        let name_cert = Certificate::read(&mut open_reply(&body)?).map_err(|e| e.to_string())?;
        {
            let mut st = self.st.borrow_mut();
            let grant = st.grant.as_ref().expect("registered");
            st.credentials = Some(RouterCredentials {
                numerical_key: grant.signing_key.clone(),
                numerical_cert: grant.certificate.clone(),
                name_cert,
            });
            st.guards = Some(guards.clone());
        }
        let mut rec = self.record(EventKind::GuardsDone);
        rec.detail = format!(
            "main={};left={};right={}",
            guards[0].numerical_id.to_hex(),
            guards[1].numerical_id.to_hex(),
            guards[2].numerical_id.to_hex()
        );
        self.log(rec);
        Ok(())
    }

    async fn workload(self: Rc<Self>, live: Vec<NumericalId>) {
        let count = self.cfg.message_count;
        for k in 0..count {
            let q = {
                let mut st = self.st.borrow_mut();
                match self.cfg.query_targets {
                    QueryTargets::Live => live[st.rng.random_range(0..live.len())],
                    QueryTargets::Any => NumericalId(st.rng.random()),
                }
            };
            self.search(Mode::Plain, q).await;
            self.search(Mode::Auth, q).await;
            if k + 1 < count {
                let secs = {
                    let mut st = self.st.borrow_mut();
                    st.rng.random_range(1.0..=self.cfg.wait_time_max_s as f64)
                };
                self.sim.sleep(self.cfg.scaled_us(secs)).await;
            }
        }
        let mut w = Writer::new();
        w.u32(self.index as u32);
        self.ep.send(&self.controller, kind::WORKLOAD_DONE, w.finish());
    }

    /// Runs one search from this node and logs its outcome.
    async fn search(self: &Rc<Self>, mode: Mode, q: NumericalId) {
        let me = self.me();
        let (seq, nonce, rx) = {
            let mut st = self.st.borrow_mut();
            st.next_seq += 1;
            let seq = st.next_seq;
            let nonce = match mode {
                Mode::Auth => random_nonce(&mut st.rng),
                Mode::Plain => Nonce([0; 16]),
            };
            let (tx, rx) = oneshot::channel();
            st.pending.insert((mode, seq), tx);
            (seq, nonce, rx)
        };
        let nonce_hex = if mode == Mode::Auth { nonce.to_hex() } else { String::new() };
        let base = |event| {
            let mut r = self.record(event);
            r.search_seq = Some(seq);
            r.mode = Some(mode);
            r.nonce_hex = nonce_hex.clone();
            r.q_hex = q.to_hex();
            r
        };
        self.log(base(EventKind::SearchStart));
        let start = self.sim.now();
        let query = Query {
            mode,
            seq,
            initiator: me,
            reply_to: self.ep.address().clone(),
            q,
            nonce,
            from: None,
            path: Vec::new(),
            chain: Default::default(),
            payload: vec![0; self.cfg.message_length],
        };
        self.sim.spawn(self.clone().route(query));

        let timeout = pin!(self.sim.sleep(SEARCH_TIMEOUT_US));
        let outcome = match select(rx, timeout).await {
            Either::Left((Ok(o), _)) => Some(o),
            _ => None,
        };
        self.st.borrow_mut().pending.remove(&(mode, seq));

        let (status, path, reason) = match outcome {
            None => (if mode == Mode::Auth { "failed" } else { "timeout" }, Vec::new(), "timeout".to_string()),
            Some(Outcome::Rejected { hop, reason }) => ("rejected", Vec::new(), format!("hop{hop}:{reason}")),
            Some(Outcome::Failed { hop, reason }) => ("failed", Vec::new(), format!("hop{hop}:{reason}")),
            Some(Outcome::Result { path, chain }) => match mode {
                Mode::Plain => ("ok", path, String::new()),
                Mode::Auth => {
                    let routers = chain.routers();
                    self.sim.sleep(cost::VERIFY_US * 2 * chain.len() as u64).await;
                    let exp = Expectation { initiator: me, query: q, nonce };
                    let verdict = {
                        let mut st = self.st.borrow_mut();
                        self.verifier.borrow_mut().verify_chain(&chain, &exp, &mut st.ledger)
                    };
                    let mut v = base(EventKind::Verify);
                    v.hop_count = Some(chain.len() as u64);
                    v.compute_us = Some(cost::VERIFY_US * 2 * chain.len() as u64);
                    v.detail = verdict.to_string();
                    self.log(v);
                    match verdict {
                        Verdict::Accept => {
                            let mut st = self.st.borrow_mut();
                            if st.sample_chain.is_none() {
                                st.sample_chain = Some(ChainFile { initiator: me, query: q, nonce, chain });
                            }
                            ("accept", routers, String::new())
                        }
                        Verdict::Reject { reason, index } => ("rejected", routers, format!("hop{index}:{reason}")),
                    }
                }
            },
        };
        let mut done = base(EventKind::SearchDone);
        done.latency_us = Some(self.sim.now() - start);
        if !path.is_empty() {
            done.hop_count = Some(path.len() as u64 - 1);
        }
        let result = path.last().map(|id| id.to_hex()).unwrap_or_default();
        done.detail = format!("outcome={status};result={result};path={}", path_string(&path));
        if !reason.is_empty() {
            done.detail.push_str(&format!(";reason={reason}"));
        }
        self.log(done);
        if mode == Mode::Auth && status != "accept" {
            let mut rej = base(EventKind::Reject);
            rej.detail = if status == "failed" {
                format!("AuthSearchFailed;reason={reason}")
            } else {
                format!("QueryRejected;reason={reason}")
            };
            self.log(rej);
        }
    }

    fn answer(&self, q: &Query, outcome: Outcome) -> usize {
        let a = Answer { mode: q.mode, seq: q.seq, outcome };
        let body = a.encode();
        let size = body.len() + HEADER_BYTES;
        self.ep.send(&q.reply_to, a.kind(), body);
        size
    }

    fn log_hop(&self, q: &Query, hop: HopLog) {
        let mut r = self.record(EventKind::Hop);
        r.search_seq = Some(q.seq);
        r.mode = Some(q.mode);
        if q.mode == Mode::Auth {
            r.nonce_hex = q.nonce.to_hex();
        }
        r.q_hex = q.q.to_hex();
        r.hop_count = Some(q.hops() as u64);
        r.compute_us = Some(hop.compute_us);
        r.msg_bytes = hop.msg_bytes.map(|b| b as u64);
        r.detail = format!("init={}", q.initiator.to_hex());
        if !hop.detail.is_empty() {
            r.detail.push(';');
            r.detail.push_str(&hop.detail);
        }
        self.log(r);
    }

    fn adversary_fires(&self) -> Option<Behavior> {
        self.st.borrow_mut().adversary.as_mut().and_then(Adversary::fire)
    }

    /// One routing step for `q` at this node.
    async fn route(self: Rc<Self>, mut q: Query) {
        let me = self.me();
        let hop = q.hops() as u32;
        if q.hops() >= MAX_HOPS {
            self.answer(&q, Outcome::Failed { hop, reason: "hop limit".into() });
            return;
        }
        let behavior = if q.initiator != me { self.adversary_fires() } else { None };
        let mut tag = behavior.map(|b| format!("adv:{b}")).unwrap_or_default();
        if behavior == Some(Behavior::Drop) {
            self.log_hop(&q, HopLog { compute_us: 0, msg_bytes: None, detail: tag });
            return;
        }

        let mut compute = 0;
        let first = q.initiator == me && q.from.is_none() && q.chain.is_empty();
        if q.mode == Mode::Auth && !first {
            let exp = Expectation { initiator: q.initiator, query: q.q, nonce: q.nonce };
            let verdict = {
                let mut st = self.st.borrow_mut();
                self.verifier.borrow_mut().verify_with_tail(&q.chain, &exp, Tail::ForwardedTo(me), &mut st.ledger)
            };
            compute += cost::VERIFY_US * 2 * q.chain.len() as u64;
            if let Verdict::Reject { reason, index } = verdict {
                self.sim.sleep(compute).await;
                let mut v = self.record(EventKind::Verify);
                v.search_seq = Some(q.seq);
                v.mode = Some(q.mode);
                v.nonce_hex = q.nonce.to_hex();
                v.q_hex = q.q.to_hex();
                v.compute_us = Some(compute);
                v.detail = format!("init={};{verdict}", q.initiator.to_hex());
                self.log(v);
                let size = self.answer(&q, Outcome::Rejected { hop, reason: format!("{reason}@{index}") });
                self.log_hop(&q, HopLog { compute_us: compute, msg_bytes: Some(size), detail: "rejected".into() });
                return;
            }
        }

        if behavior == Some(Behavior::Manipulate) {
            match q.mode {
                Mode::Auth => {
                    let mut st = self.st.borrow_mut();
                    let rng = st.adversary.as_mut().expect("adversary").rng();
                    if let Some((i, field)) = adversary::manipulate(&mut q.chain, rng) {
                        tag.push_str(&format!(";altered={field}@{i}"));
                    }
                }
                Mode::Plain => {
                    let bit = {
                        let mut st = self.st.borrow_mut();
                        st.adversary.as_mut().expect("adversary").rng().random_range(0..64)
                    };
                    q.q = NumericalId(q.q.0 ^ (1u64 << bit));
                    tag.push_str(&format!(";altered=Q@{bit}"));
                }
            }
        }

        let (table, creds, guards, m) = {
            let st = self.st.borrow();
            (
                st.table.clone().expect("joined"),
                st.credentials.clone(),
                st.guards.clone(),
                st.params.as_ref().expect("registered").m,
            )
        };
        let honest = match local_next_hop(&table, me, q.q) {
            Ok(d) => d,
            Err(e) => {
                self.answer(&q, Outcome::Failed { hop, reason: e.to_string() });
                return;
            }
        };
        compute += cost::ROUTE_US;
        let decision = if behavior == Some(Behavior::Misdirect) {
            let mut st = self.st.borrow_mut();
            adversary::misdirect(&table, &honest, st.adversary.as_mut().expect("adversary").rng()).unwrap_or(honest)
        } else {
            honest
        };

        if behavior == Some(Behavior::Falsify) {
            let fake = {
                let mut st = self.st.borrow_mut();
                NumericalId(st.adversary.as_mut().expect("adversary").rng().random())
            };
            tag.push_str(&format!(";fake={}", fake.to_hex()));
            match q.mode {
                Mode::Plain => q.path.extend([me, fake]),
                Mode::Auth => {
                    let template = make_hop_transcript(me, q.from, &decision, q.initiator, q.q, q.nonce);
                    let proof = {
                        let mut st = self.st.borrow_mut();
                        adversary::falsify(&template, fake, m, st.adversary.as_mut().expect("adversary").rng())
                    };
                    compute += 2 * cost::SIGN_US;
                    q.chain.push(proof);
                }
            }
            self.sim.sleep(compute).await;
            let size = self.answer(&q, Outcome::Result { path: q.path.clone(), chain: q.chain.clone() });
            self.log_hop(&q, HopLog { compute_us: compute, msg_bytes: Some(size), detail: tag });
            return;
        }

        match q.mode {
            Mode::Plain => {
                q.path.push(me);
                self.sim.sleep(compute).await;
            }
            Mode::Auth => {
                let (Some(creds), Some(guards)) = (creds, guards) else {
                    self.answer(&q, Outcome::Failed { hop, reason: "no guards".into() });
                    return;
                };
                let t = make_hop_transcript(me, q.from, &decision, q.initiator, q.q, q.nonce);
                compute += cost::SIGN_US;
                self.sim.sleep(compute).await;
                let asked = self.sim.now();
                let cosigned = self.cosign(me, &guards, &t).await;
                self.sim.sleep(cost::COMBINE_US).await;
                compute += cost::COMBINE_US;
                let mut c = self.record(EventKind::Cosign);
                c.search_seq = Some(q.seq);
                c.mode = Some(Mode::Auth);
                c.nonce_hex = q.nonce.to_hex();
                c.q_hex = q.q.to_hex();
                c.latency_us = Some(self.sim.now() - asked);
                c.compute_us = Some(cost::COMBINE_US);
                c.detail = format!(
                    "init={};{}",
                    q.initiator.to_hex(),
                    cosigned.as_ref().map_or_else(|e| format!("refused:{e}"), |_| "ok".to_string())
                );
                self.log(c);
                let sig_name = match cosigned {
                    Ok(s) => s,
                    // a misdirecting router has no honest name signature and
                    // forwards a made-up one
                    Err(_) if behavior == Some(Behavior::Misdirect) => self_sign(&creds.numerical_key, &t),
                    Err(reason) => {
                        let size = self.answer(&q, Outcome::Failed { hop, reason });
                        self.log_hop(&q, HopLog { compute_us: compute, msg_bytes: Some(size), detail: tag });
                        return;
                    }
                };
                q.chain.push(creds.proof(t, sig_name));
            }
        }

        let size = match decision {
            RoutingDecision::Forward(next) => {
                q.from = Some(me);
                let body = q.encode();
                let size = body.len() + HEADER_BYTES;
                self.ep.send_accounted(&next.address, kind::QUERY, body, self.cfg.message_length);
                size
            }
            RoutingDecision::Terminate => {
                self.answer(&q, Outcome::Result { path: q.path.clone(), chain: q.chain.clone() })
            }
        };
        self.log_hop(&q, HopLog { compute_us: compute, msg_bytes: Some(size), detail: tag });
    }

    /// Asks the three guards concurrently and combines their partials.
    async fn cosign(&self, me: NumericalId, guards: &[NeighborEntry; 3], t: &RoutingTranscript) -> Result<guard_core::crypto::Signature, String> {
        let msg = t.encode();
        let timeout = self.sim.latency().default_timeout_us() + cost::PARTIAL_US + cost::ROUTE_US;
        let requests = GuardRole::ALL.iter().zip(guards).map(|(&role, g)| {
            let mut w = Writer::new();
            w.id(me).u8(role_code(role)).bytes(&msg);
            self.ep.request(&g.address, kind::COSIGN, w.finish(), timeout)
        });
        let replies = join_all(requests.collect::<Vec<_>>()).await;
        let mut partials = Vec::with_capacity(3);
        for (role, reply) in GuardRole::ALL.iter().zip(replies) {
            let env = reply.map_err(|e| format!("{role} guard: {e}"))?;
            let mut r = open_reply(&env.body).map_err(|e| format!("{role} guard: {e}"))?;
            partials.push(PartialSignature::read(&mut r).map_err(|e| e.to_string())?);
        }
        combine_partials(&partials).map_err(|e| e.to_string())
    }

    fn upload(&self) -> Vec<u8> {
        let st = self.st.borrow();
        let mut csv = Vec::new();
        if let Err(e) = crate::log::write_csv(&mut csv, &st.log) {
            return err_reply(&e.to_string());
        }
        ok_reply(|w| {
            w.bytes(&csv);
            match &st.sample_chain {
                Some(c) => w.bool(true).str(&c.to_text()),
                None => w.bool(false),
            };
        })
    }
}
