//! Skip Graph overlay: lookup tables, the level-zero ring, routing decisions,
//! the join protocol, name-id lookup and table proofs.

use std::fmt;

use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::ids::{common_prefix_len, Address, NameId, NumericalId};

mod join;
mod overlay;
mod proof;
mod routing;

pub use join::{join, search_by_name_id, JoinError, OverlayRemote, RemoteError};
pub use overlay::{synthetic_address, Overlay, SearchPath};
pub use proof::{build_table_proof, make_attestation_message, ProofError, SignedAttestation, TableProof};
pub use routing::{local_next_hop, RoutingDecision};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TableError {
    #[error("level-0 ring entry missing on the {0} side")]
    MissingRing(Side),
    #[error("table owner {owner} does not match router {router}")]
    WrongOwner { owner: NumericalId, router: NumericalId },
    #[error("level {level} {side} neighbor {neighbor} shares only {shared} prefix bits")]
    PrefixRule { level: usize, side: Side, neighbor: NumericalId, shared: usize },
    #[error("neighbor name id width {0} does not match owner width {1}")]
    Width(usize, usize),
    #[error("table has {levels} levels, more than m+1 = {limit}")]
    TooManyLevels { levels: usize, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn tag(self) -> char {
        match self {
            Side::Left => 'L',
            Side::Right => 'R',
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "Left",
            Side::Right => "Right",
        })
    }
}

/// What a lookup table knows about one neighbor.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NeighborEntry {
    pub numerical_id: NumericalId,
    pub name_id: NameId,
    pub address: Address,
}

impl NeighborEntry {
    pub fn new(numerical_id: NumericalId, name_id: NameId, address: Address) -> Self {
        NeighborEntry { numerical_id, name_id, address }
    }

    pub fn write(&self, w: &mut Writer) {
        w.id(self.numerical_id).name(&self.name_id).address(&self.address);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(NeighborEntry { numerical_id: r.id()?, name_id: r.name()?, address: r.address()? })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Level {
    pub left: Option<NeighborEntry>,
    pub right: Option<NeighborEntry>,
}

impl Level {
    pub fn get(&self, side: Side) -> Option<&NeighborEntry> {
        match side {
            Side::Left => self.left.as_ref(),
            Side::Right => self.right.as_ref(),
        }
    }

    fn slot(&mut self, side: Side) -> &mut Option<NeighborEntry> {
        match side {
            Side::Left => &mut self.left,
            Side::Right => &mut self.right,
        }
    }
}

/// Per-level left/right neighbors of one node. Level 0 is a circular ring
/// over all nodes; higher levels are linear lists of nodes sharing a
/// name-id prefix of at least that length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupTable {
    owner: NeighborEntry,
    levels: Vec<Level>,
}

impl LookupTable {
    /// Table of a lone node: its ring points back to itself.
    pub fn singleton(owner: NeighborEntry) -> Self {
        let ring = Level { left: Some(owner.clone()), right: Some(owner.clone()) };
        LookupTable { owner, levels: vec![ring] }
    }

    pub fn from_levels(owner: NeighborEntry, levels: Vec<Level>) -> Self {
        LookupTable { owner, levels }
    }

    pub fn owner(&self) -> &NeighborEntry {
        &self.owner
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn height(&self) -> usize {
        self.levels.len()
    }

    pub fn neighbor(&self, level: usize, side: Side) -> Option<&NeighborEntry> {
        self.levels.get(level).and_then(|l| l.get(side))
    }

    pub fn left0(&self) -> Result<&NeighborEntry, TableError> {
        self.neighbor(0, Side::Left).ok_or(TableError::MissingRing(Side::Left))
    }

    pub fn right0(&self) -> Result<&NeighborEntry, TableError> {
        self.neighbor(0, Side::Right).ok_or(TableError::MissingRing(Side::Right))
    }

    pub fn set(&mut self, level: usize, side: Side, entry: Option<NeighborEntry>) {
        if self.levels.len() <= level {
            self.levels.resize_with(level + 1, Level::default);
        }
        *self.levels[level].slot(side) = entry;
        while self.levels.len() > 1 && self.levels.last().is_some_and(|l| l.left.is_none() && l.right.is_none()) {
            self.levels.pop();
        }
    }

    /// All present entries as `(level, side, entry)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, Side, &NeighborEntry)> {
        self.levels.iter().enumerate().flat_map(|(i, l)| {
            [(Side::Left, l.left.as_ref()), (Side::Right, l.right.as_ref())]
                .into_iter()
                .filter_map(move |(side, e)| e.map(|e| (i, side, e)))
        })
    }

    /// Checks the structural invariants: ring present, prefix rule, widths
    /// and the `m + 1` level bound.
    pub fn validate(&self) -> Result<(), TableError> {
        self.left0()?;
        self.right0()?;
        let width = self.owner.name_id.len();
        if self.levels.len() > width + 1 {
            return Err(TableError::TooManyLevels { levels: self.levels.len(), limit: width + 1 });
        }
        for (level, side, entry) in self.entries() {
            let shared = common_prefix_len(&entry.name_id, &self.owner.name_id)
                .map_err(|_| TableError::Width(entry.name_id.len(), width))?;
            if shared < level {
                return Err(TableError::PrefixRule { level, side, neighbor: entry.numerical_id, shared });
            }
        }
        Ok(())
    }

    pub fn write(&self, w: &mut Writer) {
        self.owner.write(w);
        w.u16(self.levels.len() as u16);
        for level in &self.levels {
            for e in [&level.left, &level.right] {
                match e {
                    Some(e) => {
                        w.u8(1);
                        e.write(w);
                    }
                    None => {
                        w.u8(0);
                    }
                }
            }
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let owner = NeighborEntry::read(r)?;
        let n = r.u16()? as usize;
        let mut levels = Vec::with_capacity(n);
        for _ in 0..n {
            let mut pair = [None, None];
            for slot in &mut pair {
                *slot = match r.u8()? {
                    0 => None,
                    1 => Some(NeighborEntry::read(r)?),
                    _ => return Err(DecodeError::Invalid("table entry tag")),
                };
            }
            let [left, right] = pair;
            levels.push(Level { left, right });
        }
        Ok(LookupTable { owner, levels })
    }
}
