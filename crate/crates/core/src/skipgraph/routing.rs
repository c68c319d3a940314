use super::{LookupTable, NeighborEntry, Side, TableError};
use crate::ids::NumericalId;

/// Outcome of one local routing step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoutingDecision {
    Forward(NeighborEntry),
    Terminate,
}

/// Deterministic next hop for a search on `q` at node `me`.
///
/// Following these decisions from any start ends at the greatest id `≤ q`,
/// or at the overlay maximum when `q` is below every id (the level-0 ring
/// wraps from the minimum to the maximum).
///
/// * `q == me`: terminate.
/// * `q > me`: forward to the highest-level right neighbor in `(me, q]`;
///   terminate when there is none.
/// * `q < me`: if `me` is the maximum and `q` lies below the minimum,
///   terminate. Otherwise forward to the highest-level left neighbor in
///   `[q, me)`; when every left neighbor is below `q`, step to the level-0
///   predecessor (which then terminates, or wraps to the maximum).
pub fn local_next_hop(table: &LookupTable, me: NumericalId, q: NumericalId) -> Result<RoutingDecision, TableError> {
    if table.owner().numerical_id != me {
        return Err(TableError::WrongOwner { owner: table.owner().numerical_id, router: me });
    }
    let left0 = table.left0()?;
    let right0 = table.right0()?;
    if q == me || left0.numerical_id == me {
        return Ok(RoutingDecision::Terminate);
    }
    let highest = |side: Side, accept: &dyn Fn(NumericalId) -> bool| {
        (0..table.height())
            .rev()
            .filter_map(|level| table.neighbor(level, side))
            .find(|e| accept(e.numerical_id))
            .cloned()
    };
    if q > me {
        return Ok(match highest(Side::Right, &|id| id > me && id <= q) {
            Some(next) => RoutingDecision::Forward(next),
            None => RoutingDecision::Terminate,
        });
    }
    if right0.numerical_id < me && q < right0.numerical_id {
        return Ok(RoutingDecision::Terminate);
    }
    Ok(match highest(Side::Left, &|id| id < me && id >= q) {
        Some(next) => RoutingDecision::Forward(next),
        None => RoutingDecision::Forward(left0.clone()),
    })
}
