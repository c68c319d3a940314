//! An in-process overlay with a global view of every table. Built with the
//! real join protocol; used by tests, fixtures and the collusion experiment.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::pin::pin;
use std::task::{Context, Poll, Waker};

use super::join::{join, search_by_name_id, JoinError, OverlayRemote, RemoteError};
use super::routing::{local_next_hop, RoutingDecision};
use super::{LookupTable, NeighborEntry, Side, TableError};
use crate::crypto::hash_name_id;
use crate::ids::{Address, NameId, NumericalId};

/// Route of one search: `hops[0]` is the initiator and the last hop is `result`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchPath {
    pub hops: Vec<NumericalId>,
    pub result: NeighborEntry,
}

#[derive(Debug, Clone, Default)]
pub struct Overlay {
    tables: BTreeMap<NumericalId, LookupTable>,
    by_address: HashMap<Address, NumericalId>,
}

struct LocalRemote<'a> {
    tables: &'a mut BTreeMap<NumericalId, LookupTable>,
    by_address: &'a HashMap<Address, NumericalId>,
}

impl LocalRemote<'_> {
    fn id_of(&self, addr: &Address) -> Result<NumericalId, RemoteError> {
        self.by_address.get(addr).copied().ok_or_else(|| RemoteError::Unreachable(addr.clone()))
    }
}

impl OverlayRemote for LocalRemote<'_> {
    async fn fetch_table(&mut self, addr: &Address) -> Result<LookupTable, RemoteError> {
        let id = self.id_of(addr)?;
        self.tables.get(&id).cloned().ok_or_else(|| RemoteError::Unreachable(addr.clone()))
    }

    async fn set_neighbor(
        &mut self,
        addr: &Address,
        level: usize,
        side: Side,
        entry: NeighborEntry,
    ) -> Result<(), RemoteError> {
        let id = self.id_of(addr)?;
        let table = self.tables.get_mut(&id).ok_or_else(|| RemoteError::Unreachable(addr.clone()))?;
        table.set(level, side, Some(entry));
        Ok(())
    }
}

struct ReadRemote<'a> {
    tables: &'a BTreeMap<NumericalId, LookupTable>,
    by_address: &'a HashMap<Address, NumericalId>,
}

impl OverlayRemote for ReadRemote<'_> {
    async fn fetch_table(&mut self, addr: &Address) -> Result<LookupTable, RemoteError> {
        self.by_address
            .get(addr)
            .and_then(|id| self.tables.get(id))
            .cloned()
            .ok_or_else(|| RemoteError::Unreachable(addr.clone()))
    }

    async fn set_neighbor(&mut self, addr: &Address, _: usize, _: Side, _: NeighborEntry) -> Result<(), RemoteError> {
        Err(RemoteError::BadReply(addr.clone(), "read-only overlay".into()))
    }
}

/// Drives a future that never actually waits; local remotes answer inline.
fn run_local<F: Future>(fut: F) -> F::Output {
    let mut fut = pin!(fut);
    let mut cx = Context::from_waker(Waker::noop());
    match fut.as_mut().poll(&mut cx) {
        Poll::Ready(v) => v,
        Poll::Pending => unreachable!("local overlay operations complete synchronously"),
    }
}

/// Synthetic address used for overlays built from bare ids.
pub fn synthetic_address(id: NumericalId) -> Address {
    Address::new(format!("n{}", id.to_hex()), 7000)
}

impl Overlay {
    pub fn new() -> Self {
        Self::default()
    }

    /// Joins `members` one at a time, each introduced by the first member.
    pub fn build(members: impl IntoIterator<Item = NeighborEntry>) -> Result<Self, JoinError> {
        let mut overlay = Overlay::new();
        for entry in members {
            overlay.join(entry)?;
        }
        Ok(overlay)
    }

    /// Overlay over `ids`, with name ids from [`hash_name_id`] at width `m`.
    pub fn from_ids(ids: &[u64], m: usize) -> Result<Self, JoinError> {
        Overlay::build(ids.iter().map(|&v| {
            let id = NumericalId(v);
            NeighborEntry::new(id, hash_name_id(id, m).expect("valid width"), synthetic_address(id))
        }))
    }

    /// Overlay with explicitly chosen name ids.
    pub fn with_names(members: &[(u64, NameId)]) -> Result<Self, JoinError> {
        Overlay::build(members.iter().map(|(v, name)| {
            let id = NumericalId(*v);
            NeighborEntry::new(id, *name, synthetic_address(id))
        }))
    }

    pub fn join(&mut self, entry: NeighborEntry) -> Result<(), JoinError> {
        if self.tables.contains_key(&entry.numerical_id) {
            return Err(JoinError::DuplicateId(entry.numerical_id));
        }
        let introducer = self.tables.values().next().map(|t| t.owner().address.clone());
        let mut remote = LocalRemote { tables: &mut self.tables, by_address: &self.by_address };
        let table = run_local(join(&mut remote, entry.clone(), introducer.as_ref()))?;
        self.by_address.insert(entry.address.clone(), entry.numerical_id);
        self.tables.insert(entry.numerical_id, table);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = NumericalId> + '_ {
        self.tables.keys().copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = &NeighborEntry> + '_ {
        self.tables.values().map(|t| t.owner())
    }

    pub fn tables(&self) -> impl Iterator<Item = &LookupTable> + '_ {
        self.tables.values()
    }

    pub fn table(&self, id: NumericalId) -> Option<&LookupTable> {
        self.tables.get(&id)
    }

    pub fn table_mut(&mut self, id: NumericalId) -> Option<&mut LookupTable> {
        self.tables.get_mut(&id)
    }

    pub fn entry(&self, id: NumericalId) -> Option<&NeighborEntry> {
        self.table(id).map(|t| t.owner())
    }

    /// Follows [`local_next_hop`] from `initiator` until a node terminates.
    pub fn search_by_numerical_id(&self, initiator: NumericalId, q: NumericalId) -> Result<SearchPath, TableError> {
        let mut cur = self.tables.get(&initiator).ok_or(TableError::MissingRing(Side::Left))?;
        let mut hops = vec![initiator];
        loop {
            let me = cur.owner().numerical_id;
            match local_next_hop(cur, me, q)? {
                RoutingDecision::Terminate => return Ok(SearchPath { hops, result: cur.owner().clone() }),
                RoutingDecision::Forward(next) => {
                    hops.push(next.numerical_id);
                    cur = self.tables.get(&next.numerical_id).ok_or(TableError::MissingRing(Side::Right))?;
                }
            }
        }
    }

    /// Runs the name-id lookup protocol from `initiator`.
    pub fn search_by_name_id(&self, initiator: NumericalId, target: &NameId) -> Option<NeighborEntry> {
        let start = self.tables.get(&initiator)?;
        let mut remote = ReadRemote { tables: &self.tables, by_address: &self.by_address };
        run_local(search_by_name_id(&mut remote, start, target)).ok()
    }
}
