//! Table proofs: one neighbor-issued signature per lookup-table entry.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{LookupTable, NeighborEntry, Side};
use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::{hash_name_id, verify, Certificate, Identity, PublicParams, Signature, SIGNATURE_LEN};
use crate::ids::NumericalId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProofError {
    #[error("no attestation for entries {0:?}")]
    Missing(Vec<(usize, Side)>),
}

/// Canonical message a neighbor signs to attest it sits at `(level, side)`
/// in `owner`'s table: `atst||<owner hex16>||<level>||<R|L>`.
pub fn make_attestation_message(owner: NumericalId, level: usize, side: Side) -> Vec<u8> {
    format!("atst||{}||{}||{}", owner.to_hex(), level, side.tag()).into_bytes()
}

/// A neighbor's signature plus the certificate of its numerical-id key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedAttestation {
    pub signature: Signature,
    pub certificate: Certificate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TableProof {
    entries: BTreeMap<(usize, Side), SignedAttestation>,
}

impl TableProof {
    pub fn get(&self, level: usize, side: Side) -> Option<&SignedAttestation> {
        self.entries.get(&(level, side))
    }

    pub fn insert(&mut self, level: usize, side: Side, att: SignedAttestation) {
        self.entries.insert((level, side), att);
    }

    pub fn remove(&mut self, level: usize, side: Side) -> Option<SignedAttestation> {
        self.entries.remove(&(level, side))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `true` iff every present entry of `table` carries a valid attestation
    /// from exactly that neighbor and the proof has no extra entries. Entry
    /// and owner name ids must also match the published name hash.
    pub fn verify(&self, table: &LookupTable, params: &PublicParams) -> bool {
        let owner = table.owner();
        let named_right = |e: &NeighborEntry| {
            hash_name_id(e.numerical_id, params.m).is_ok_and(|n| n == e.name_id)
        };
        if !named_right(owner) {
            return false;
        }
        let mut count = 0;
        for (level, side, entry) in table.entries() {
            count += 1;
            let Some(att) = self.get(level, side) else { return false };
            let msg = make_attestation_message(owner.numerical_id, level, side);
            let signer = Identity::numerical(entry.numerical_id);
            if !named_right(entry) || !verify(&signer, &att.certificate, params, &msg, &att.signature) {
                return false;
            }
        }
        count == self.entries.len()
    }

    pub fn write(&self, w: &mut Writer) {
        w.u32(self.entries.len() as u32);
        for ((level, side), att) in &self.entries {
            w.u16(*level as u16).u8(side.tag() as u8).raw(att.signature.as_bytes());
            att.certificate.write(w);
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let level = r.u16()? as usize;
            let side = match r.u8()? {
                b'L' => Side::Left,
                b'R' => Side::Right,
                _ => return Err(DecodeError::Invalid("attestation side")),
            };
            let signature = Signature(r.array::<SIGNATURE_LEN>()?);
            let certificate = Certificate::read(r)?;
            entries.insert((level, side), SignedAttestation { signature, certificate });
        }
        Ok(TableProof { entries })
    }
}

/// Collects one attestation per present entry through `attest`, which is
/// handed `(level, side, neighbor, message)` and returns the neighbor's
/// signed attestation, or `None` if the neighbor did not respond.
pub fn build_table_proof<F>(table: &LookupTable, mut attest: F) -> Result<TableProof, ProofError>
where
    F: FnMut(usize, Side, &NeighborEntry, &[u8]) -> Option<SignedAttestation>,
{
    let owner = table.owner().numerical_id;
    let mut proof = TableProof::default();
    let mut missing = Vec::new();
    for (level, side, entry) in table.entries() {
        let msg = make_attestation_message(owner, level, side);
        match attest(level, side, entry, &msg) {
            Some(att) => proof.insert(level, side, att),
            None => missing.push((level, side)),
        }
    }
    if missing.is_empty() {
        Ok(proof)
    } else {
        Err(ProofError::Missing(missing))
    }
}
