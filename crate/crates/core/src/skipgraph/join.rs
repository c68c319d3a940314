//! Join and name-id lookup, written against an abstract remote so the same
//! code drives both the in-memory overlay and networked nodes.

use std::collections::HashMap;

use thiserror::Error;

use super::routing::{local_next_hop, RoutingDecision};
use super::{LookupTable, NeighborEntry, Side, TableError};
use crate::ids::{common_prefix_len, Address, NameId, NumericalId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RemoteError {
    #[error("{0} unreachable")]
    Unreachable(Address),
    #[error("request to {0} timed out")]
    Timeout(Address),
    #[error("bad reply from {0}: {1}")]
    BadReply(Address, String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JoinError {
    #[error("introducer {0} unreachable")]
    Unreachable(Address),
    #[error("numerical id {0} already present in the overlay")]
    DuplicateId(NumericalId),
    #[error("remote failure during join: {0}")]
    Remote(#[from] RemoteError),
    #[error("malformed table during join: {0}")]
    Table(#[from] TableError),
}

/// Remote table access used by the overlay protocols.
#[allow(async_fn_in_trait)]
pub trait OverlayRemote {
    async fn fetch_table(&mut self, addr: &Address) -> Result<LookupTable, RemoteError>;

    async fn set_neighbor(
        &mut self,
        addr: &Address,
        level: usize,
        side: Side,
        entry: NeighborEntry,
    ) -> Result<(), RemoteError>;
}

/// Inserts `me` into the overlay reachable through `introducer` and returns
/// the new node's lookup table. Neighbors' tables are updated through
/// `remote`. With no introducer the node forms a ring of one.
///
/// Joins must be serialized; concurrent joins may leave inconsistent lists.
pub async fn join<R: OverlayRemote>(
    remote: &mut R,
    me: NeighborEntry,
    introducer: Option<&Address>,
) -> Result<LookupTable, JoinError> {
    let Some(introducer) = introducer else {
        return Ok(LookupTable::singleton(me));
    };
    let mut cur = remote.fetch_table(introducer).await.map_err(|e| match e {
        RemoteError::Unreachable(a) | RemoteError::Timeout(a) => JoinError::Unreachable(a),
        other => JoinError::Remote(other),
    })?;

    // route to the level-0 predecessor of the new id
    loop {
        let here = cur.owner().numerical_id;
        match local_next_hop(&cur, here, me.numerical_id)? {
            RoutingDecision::Forward(next) => cur = remote.fetch_table(&next.address).await?,
            RoutingDecision::Terminate => break,
        }
    }
    let pred = cur;
    if pred.owner().numerical_id == me.numerical_id {
        return Err(JoinError::DuplicateId(me.numerical_id));
    }
    let succ = pred.right0()?.clone();

    let mut table = LookupTable::singleton(me.clone());
    table.set(0, Side::Left, Some(pred.owner().clone()));
    table.set(0, Side::Right, Some(succ.clone()));
    remote.set_neighbor(&pred.owner().address, 0, Side::Right, me.clone()).await?;
    remote.set_neighbor(&succ.address, 0, Side::Left, me.clone()).await?;

    let width = me.name_id.len();
    for level in 1..=width {
        let left = find_linked(remote, &table, level, Side::Left).await?;
        let right = find_linked(remote, &table, level, Side::Right).await?;
        if left.is_none() && right.is_none() {
            break;
        }
        if let Some(l) = &left {
            remote.set_neighbor(&l.address, level, Side::Right, me.clone()).await?;
        }
        if let Some(r) = &right {
            remote.set_neighbor(&r.address, level, Side::Left, me.clone()).await?;
        }
        table.set(level, Side::Left, left);
        table.set(level, Side::Right, right);
    }
    Ok(table)
}

/// Walks the level-(level-1) list away from the new node until a node
/// sharing `level` prefix bits appears. The walk never crosses the ring's
/// wrap point, so at level 0 it only sees ids on the correct side.
async fn find_linked<R: OverlayRemote>(
    remote: &mut R,
    table: &LookupTable,
    level: usize,
    side: Side,
) -> Result<Option<NeighborEntry>, JoinError> {
    let me = table.owner();
    let below = level - 1;
    let on_side = |from: NumericalId, to: NumericalId| match side {
        Side::Left => to < from,
        Side::Right => to > from,
    };
    let mut cursor = match table.neighbor(below, side) {
        Some(e) if on_side(me.numerical_id, e.numerical_id) => e.clone(),
        _ => return Ok(None),
    };
    loop {
        if common_prefix_len(&cursor.name_id, &me.name_id).unwrap_or(0) >= level {
            return Ok(Some(cursor));
        }
        let t = remote.fetch_table(&cursor.address).await?;
        match t.neighbor(below, side) {
            Some(next) if on_side(cursor.numerical_id, next.numerical_id) => cursor = next.clone(),
            _ => return Ok(None),
        }
    }
}

/// Locates the node whose name id shares the longest prefix with `target`,
/// breaking ties toward the smaller numerical id. Driven by the searching
/// node, which reads neighbors' tables through `remote`.
///
/// At each stage the search sits on a node with `c` matching bits and scans
/// its level-`c` list (all nodes sharing those `c` bits) for a node matching
/// more. If the scan finds none, every node of the list ties and the
/// leftmost one is returned.
pub async fn search_by_name_id<R: OverlayRemote>(
    remote: &mut R,
    start: &LookupTable,
    target: &NameId,
) -> Result<NeighborEntry, RemoteError> {
    let cpl = |e: &NeighborEntry| common_prefix_len(&e.name_id, target).unwrap_or(0);
    let mut cache: HashMap<NumericalId, LookupTable> = HashMap::new();
    cache.insert(start.owner().numerical_id, start.clone());

    let mut cur = start.owner().clone();
    let mut level = cpl(&cur);
    'outer: loop {
        let mut leftmost = cur.clone();
        for side in [Side::Right, Side::Left] {
            let mut x = cur.clone();
            loop {
                let table = match cache.get(&x.numerical_id) {
                    Some(t) => t,
                    None => {
                        let t = remote.fetch_table(&x.address).await?;
                        cache.entry(x.numerical_id).or_insert(t)
                    }
                };
                let Some(next) = table.neighbor(level, side).cloned() else { break };
                let forward = match side {
                    Side::Right => next.numerical_id > x.numerical_id,
                    Side::Left => next.numerical_id < x.numerical_id,
                };
                if !forward {
                    break;
                }
                let c = cpl(&next);
                if c > level {
                    cur = next;
                    level = c;
                    continue 'outer;
                }
                if side == Side::Left {
                    leftmost = next.clone();
                }
                x = next;
            }
        }
        return Ok(leftmost);
    }
}
