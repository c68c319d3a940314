use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use guard_core::ids::Address;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::executor::{poll_task, Executor};

/// Bytes of fixed envelope header counted in every size record.
pub const HEADER_BYTES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("address {0} already bound")]
    AddressInUse(Address),
    #[error("request to {0} timed out")]
    Timeout(Address),
    #[error("{0} is not bound to any endpoint")]
    Undeliverable(Address),
}

/// Per-link delay and loss. Delay is `base_us + U[0, jitter_us]`, at least 1 µs.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyModel {
    pub base_us: u64,
    pub jitter_us: u64,
    pub loss_prob: f64,
    overrides: HashMap<(Address, Address), LinkModel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub base_us: u64,
    pub jitter_us: u64,
    pub loss_prob: f64,
}

impl LatencyModel {
    pub fn new(base_us: u64, jitter_us: u64) -> Self {
        LatencyModel { base_us, jitter_us, loss_prob: 0.0, overrides: HashMap::new() }
    }

    /// Overrides the directed link `src -> dst`.
    pub fn set_link(&mut self, src: Address, dst: Address, link: LinkModel) {
        self.overrides.insert((src, dst), link);
    }

    fn link(&self, src: &Address, dst: &Address) -> LinkModel {
        self.overrides.get(&(src.clone(), dst.clone())).copied().unwrap_or(LinkModel {
            base_us: self.base_us,
            jitter_us: self.jitter_us,
            loss_prob: self.loss_prob,
        })
    }

    /// Default request timeout: five worst-case one-way delays.
    pub fn default_timeout_us(&self) -> u64 {
        5 * (self.base_us + self.jitter_us).max(1)
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::new(1000, 200)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub src: Address,
    pub dst: Address,
    pub kind: u8,
    /// Zero for one-way messages; requests and their responses share one id.
    pub correlation: u64,
    pub is_response: bool,
    pub body: Vec<u8>,
    pub size_bytes: usize,
    /// Bytes of `body` that are application payload rather than routing data.
    pub payload_bytes: usize,
    pub send_time: u64,
    pub deliver_time: u64,
}

/// One line of the delivery log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub deliver_time: u64,
    pub src: Address,
    pub dst: Address,
    pub kind: u8,
    pub size: usize,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.deliver_time, self.src, self.dst, self.kind, self.size)
    }
}

/// Size split of one sent envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeRecord {
    pub kind: u8,
    pub payload_bytes: usize,
    pub overhead_bytes: usize,
}

impl SizeRecord {
    pub fn total(&self) -> usize {
        self.payload_bytes + self.overhead_bytes
    }
}

pub fn account(env: &Envelope) -> SizeRecord {
    SizeRecord { kind: env.kind, payload_bytes: env.payload_bytes, overhead_bytes: env.size_bytes - env.payload_bytes }
}

enum Event {
    Deliver(Envelope),
    Timer(u64),
    RequestTimeout(u64),
}

struct Mailbox {
    inbox: VecDeque<Envelope>,
    waker: Option<Waker>,
}

struct Pending {
    requester: Address,
    target: Address,
    outcome: Option<Result<Envelope, NetError>>,
    undeliverable: bool,
    waker: Option<Waker>,
}

struct Timer {
    fired: bool,
    waker: Option<Waker>,
}

struct State {
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    events: HashMap<u64, Event>,
    rng: ChaCha20Rng,
    latency: LatencyModel,
    mailboxes: HashMap<Address, Mailbox>,
    pending: HashMap<u64, Pending>,
    timers: HashMap<u64, Timer>,
    next_id: u64,
    log: Vec<LogEntry>,
    sizes: Vec<SizeRecord>,
    lost: u64,
}

impl State {
    fn schedule(&mut self, at: u64, ev: Event) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse((at, seq)));
        self.events.insert(seq, ev);
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }
}

/// Handle on a deterministic simulated network. Cheap to clone; all clones
/// share one clock, event queue and RNG stream.
#[derive(Clone)]
pub struct Sim {
    state: Rc<RefCell<State>>,
    exec: Rc<RefCell<Executor>>,
}

impl fmt::Debug for Sim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Sim").field("now", &self.now()).finish_non_exhaustive()
    }
}

impl Sim {
    pub fn new(seed: u64, latency: LatencyModel) -> Self {
        Sim {
            state: Rc::new(RefCell::new(State {
                now: 0,
                seq: 0,
                queue: BinaryHeap::new(),
                events: HashMap::new(),
                rng: ChaCha20Rng::seed_from_u64(seed),
                latency,
                mailboxes: HashMap::new(),
                pending: HashMap::new(),
                timers: HashMap::new(),
                next_id: 0,
                log: Vec::new(),
                sizes: Vec::new(),
                lost: 0,
            })),
            exec: Rc::new(RefCell::new(Executor::new())),
        }
    }

    pub fn now(&self) -> u64 {
        self.state.borrow().now
    }

    pub fn latency(&self) -> LatencyModel {
        self.state.borrow().latency.clone()
    }

    pub fn set_latency(&self, latency: LatencyModel) {
        self.state.borrow_mut().latency = latency;
    }

    pub fn bind(&self, addr: Address) -> Result<Endpoint, NetError> {
        let mut st = self.state.borrow_mut();
        if st.mailboxes.contains_key(&addr) {
            return Err(NetError::AddressInUse(addr));
        }
        st.mailboxes.insert(addr.clone(), Mailbox { inbox: VecDeque::new(), waker: None });
        Ok(Endpoint { sim: self.clone(), addr })
    }

    pub fn spawn(&self, fut: impl Future<Output = ()> + 'static) {
        self.exec.borrow_mut().spawn(Box::pin(fut));
    }

    pub fn live_tasks(&self) -> usize {
        self.exec.borrow().live_tasks()
    }

    /// Resolves after `us` virtual microseconds.
    pub fn sleep(&self, us: u64) -> Sleep {
        let mut st = self.state.borrow_mut();
        let id = st.fresh_id();
        let at = st.now + us;
        st.timers.insert(id, Timer { fired: false, waker: None });
        st.schedule(at, Event::Timer(id));
        Sleep { sim: self.clone(), id }
    }

    /// Delivery log so far, in delivery order.
    pub fn log(&self) -> Vec<LogEntry> {
        self.state.borrow().log.clone()
    }

    /// Size records of every sent envelope, in send order.
    pub fn size_records(&self) -> Vec<SizeRecord> {
        self.state.borrow().sizes.clone()
    }

    pub fn lost_count(&self) -> u64 {
        self.state.borrow().lost
    }

    fn run_ready(&self) {
        loop {
            let next = self.exec.borrow_mut().next_ready();
            let Some((id, mut task, waker)) = next else { return };
            match poll_task(&mut task, &waker) {
                Poll::Ready(()) => self.exec.borrow_mut().retire(id),
                Poll::Pending => self.exec.borrow_mut().restore(id, task),
            }
        }
    }

    /// Processes the earliest event if it is due no later than `limit`.
    fn step(&self, limit: u64) -> bool {
        let ev = {
            let mut st = self.state.borrow_mut();
            let Some(&Reverse((at, seq))) = st.queue.peek() else { return false };
            if at > limit {
                return false;
            }
            st.queue.pop();
            st.now = st.now.max(at);
            st.events.remove(&seq).expect("scheduled event")
        };
        match ev {
            Event::Deliver(env) => self.deliver(env),
            Event::Timer(id) => {
                let mut st = self.state.borrow_mut();
                if let Some(t) = st.timers.get_mut(&id) {
                    t.fired = true;
                    if let Some(w) = t.waker.take() {
                        w.wake();
                    }
                }
            }
            Event::RequestTimeout(id) => {
                let mut st = self.state.borrow_mut();
                if let Some(p) = st.pending.get_mut(&id) {
                    if p.outcome.is_none() {
                        let err = if p.undeliverable {
                            NetError::Undeliverable(p.target.clone())
                        } else {
                            NetError::Timeout(p.target.clone())
                        };
                        p.outcome = Some(Err(err));
                        if let Some(w) = p.waker.take() {
                            w.wake();
                        }
                    }
                }
            }
        }
        true
    }

    fn deliver(&self, env: Envelope) {
        let mut st = self.state.borrow_mut();
        if env.is_response {
            if let Some(p) = st.pending.get_mut(&env.correlation) {
                if p.requester == env.dst && p.target == env.src && p.outcome.is_none() {
                    st.log.push(LogEntry {
                        deliver_time: env.deliver_time,
                        src: env.src.clone(),
                        dst: env.dst.clone(),
                        kind: env.kind,
                        size: env.size_bytes,
                    });
                    let p = st.pending.get_mut(&env.correlation).expect("present");
                    p.outcome = Some(Ok(env));
                    if let Some(w) = p.waker.take() {
                        w.wake();
                    }
                }
            }
            return;
        }
        if !st.mailboxes.contains_key(&env.dst) {
            if env.correlation != 0 {
                if let Some(p) = st.pending.get_mut(&env.correlation) {
                    p.undeliverable = true;
                }
            }
            return;
        }
        st.log.push(LogEntry {
            deliver_time: env.deliver_time,
            src: env.src.clone(),
            dst: env.dst.clone(),
            kind: env.kind,
            size: env.size_bytes,
        });
        let mb = st.mailboxes.get_mut(&env.dst).expect("checked");
        mb.inbox.push_back(env);
        if let Some(w) = mb.waker.take() {
            w.wake();
        }
    }

    /// Runs tasks and events until nothing is runnable and no event is queued.
    pub fn run_until_idle(&self) {
        loop {
            self.run_ready();
            if !self.step(u64::MAX) {
                self.run_ready();
                return;
            }
        }
    }

    /// Runs until virtual time `now + duration`; the clock ends there.
    pub fn run_for(&self, duration: u64) {
        let limit = self.now() + duration;
        loop {
            self.run_ready();
            if !self.step(limit) {
                break;
            }
        }
        self.run_ready();
        let mut st = self.state.borrow_mut();
        st.now = st.now.max(limit);
    }

    /// Runs until `done` holds after a scheduling round, or the queue empties.
    pub fn run_until(&self, mut done: impl FnMut() -> bool) -> bool {
        loop {
            self.run_ready();
            if done() {
                return true;
            }
            if !self.step(u64::MAX) {
                self.run_ready();
                return done();
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn transmit(
        &self,
        src: &Address,
        dst: &Address,
        kind: u8,
        correlation: u64,
        is_response: bool,
        body: Vec<u8>,
        payload_bytes: usize,
        extra_delay: u64,
    ) {
        let mut st = self.state.borrow_mut();
        let link = st.latency.link(src, dst);
        let jitter = if link.jitter_us > 0 { st.rng.random_range(0..=link.jitter_us) } else { 0 };
        let lost = link.loss_prob > 0.0 && st.rng.random::<f64>() < link.loss_prob;
        let size_bytes = body.len() + HEADER_BYTES;
        let send_time = st.now + extra_delay;
        let env = Envelope {
            src: src.clone(),
            dst: dst.clone(),
            kind,
            correlation,
            is_response,
            body,
            size_bytes,
            payload_bytes: payload_bytes.min(size_bytes),
            send_time,
            deliver_time: send_time + (link.base_us + jitter).max(1),
        };
        st.sizes.push(account(&env));
        if lost {
            st.lost += 1;
            return;
        }
        st.schedule(env.deliver_time, Event::Deliver(env));
    }
}

/// A bound address.
#[derive(Clone)]
pub struct Endpoint {
    sim: Sim,
    addr: Address,
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Endpoint({})", self.addr)
    }
}

impl Endpoint {
    pub fn address(&self) -> &Address {
        &self.addr
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    /// One-way message.
    pub fn send(&self, dst: &Address, kind: u8, body: Vec<u8>) {
        self.send_accounted(dst, kind, body, 0);
    }

    /// One-way message whose first `payload_bytes` of body count as payload.
    pub fn send_accounted(&self, dst: &Address, kind: u8, body: Vec<u8>, payload_bytes: usize) {
        self.sim.transmit(&self.addr, dst, kind, 0, false, body, payload_bytes, 0);
    }

    /// Sends now and returns a future for the correlated response.
    pub fn request(&self, dst: &Address, kind: u8, body: Vec<u8>, timeout_us: u64) -> Response {
        let id = {
            let mut st = self.sim.state.borrow_mut();
            let id = st.fresh_id();
            st.pending.insert(
                id,
                Pending {
                    requester: self.addr.clone(),
                    target: dst.clone(),
                    outcome: None,
                    undeliverable: false,
                    waker: None,
                },
            );
            let at = st.now + timeout_us;
            st.schedule(at, Event::RequestTimeout(id));
            id
        };
        self.sim.transmit(&self.addr, dst, kind, id, false, body, 0, 0);
        Response { sim: self.sim.clone(), id }
    }

    /// Answers `req` after `delay_us` of local processing.
    pub fn reply(&self, req: &Envelope, kind: u8, body: Vec<u8>, delay_us: u64) {
        self.sim.transmit(&self.addr, &req.src, kind, req.correlation, true, body, 0, delay_us);
    }

    /// Next envelope addressed to this endpoint.
    pub fn recv(&self) -> Recv<'_> {
        Recv { ep: self }
    }

    pub fn try_recv(&self) -> Option<Envelope> {
        self.sim.state.borrow_mut().mailboxes.get_mut(&self.addr)?.inbox.pop_front()
    }
}

pub struct Recv<'a> {
    ep: &'a Endpoint,
}

impl Future for Recv<'_> {
    type Output = Envelope;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Envelope> {
        let mut st = self.ep.sim.state.borrow_mut();
        let mb = st.mailboxes.get_mut(&self.ep.addr).expect("bound endpoint");
        match mb.inbox.pop_front() {
            Some(env) => Poll::Ready(env),
            None => {
                mb.waker = Some(cx.waker().clone());
                Poll::Pending
            }
        }
    }
}

pub struct Response {
    sim: Sim,
    id: u64,
}

impl Future for Response {
    type Output = Result<Envelope, NetError>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        let mut st = self.sim.state.borrow_mut();
        let p = st.pending.get_mut(&self.id).expect("pending request");
        match p.outcome.take() {
            Some(out) => {
                st.pending.remove(&self.id);
                Poll::Ready(out)
            }
            None => {
                p.waker = Some(cx.waker().clone());
                Poll::Pending
            }
        }
    }
}

impl Drop for Response {
    fn drop(&mut self) {
        if let Ok(mut st) = self.sim.state.try_borrow_mut() {
            st.pending.remove(&self.id);
        }
    }
}

pub struct Sleep {
    sim: Sim,
    id: u64,
}

impl Future for Sleep {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        let mut st = self.sim.state.borrow_mut();
        let t = st.timers.get_mut(&self.id).expect("live timer");
        if t.fired {
            st.timers.remove(&self.id);
            Poll::Ready(())
        } else {
            t.waker = Some(cx.waker().clone());
            Poll::Pending
        }
    }
}

impl Drop for Sleep {
    fn drop(&mut self) {
        if let Ok(mut st) = self.sim.state.try_borrow_mut() {
            st.timers.remove(&self.id);
        }
    }
}
