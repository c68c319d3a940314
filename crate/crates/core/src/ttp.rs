//! The trusted third party: registration, challenge-response
//! authentication, table-proof gatekeeping and guard provisioning.

use std::collections::{BTreeMap, HashMap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::{
    derive_identity_keypair, hash_name_id, keyed_permutation, public_params, split_3of3, verify_with_key,
    Certificate, CryptoError, Identity, KeyShare, MasterSecret, PermutationKey, PublicKey, PublicParams, Signature,
    SigningKey,
};
use crate::ids::{common_prefix_len, Address, NameId, NumericalId};
use crate::skipgraph::{LookupTable, NeighborEntry, TableProof};

pub const CHALLENGE_COUNT: usize = 3;
pub const CHALLENGE_LEN: usize = 16;

const CHALLENGE_TAG: &[u8] = b"guard-challenge-v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TtpError {
    #[error("physical identity is already bound to {bound}")]
    Binding { bound: Address },
    #[error("unknown physical identity")]
    UnknownIdentity,
    #[error("unknown node {0}")]
    UnknownNode(NumericalId),
    #[error("challenge response rejected")]
    Auth,
    #[error("no open challenge session {0}")]
    UnknownSession(u64),
    #[error("node {0} has not authenticated")]
    NotAuthenticated(NumericalId),
    #[error("table proof of {0} rejected")]
    ProofRejected(NumericalId),
    #[error("node {0} has no verified table")]
    NoTable(NumericalId),
    #[error("guard {role} of {subject} should be {expected}, got {got}")]
    WrongGuard { subject: NumericalId, role: GuardRole, expected: NumericalId, got: NumericalId },
    #[error("numerical id space exhausted")]
    Exhausted,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Opaque physical identity of a peer, such as a MAC address.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhysicalIdentity(pub Vec<u8>);

impl PhysicalIdentity {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        PhysicalIdentity(bytes.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistrationGrant {
    pub numerical_id: NumericalId,
    pub name_id: NameId,
    pub signing_key: SigningKey,
    pub public_key: PublicKey,
    pub certificate: Certificate,
}

impl RegistrationGrant {
    pub fn entry(&self, address: Address) -> NeighborEntry {
        NeighborEntry::new(self.numerical_id, self.name_id, address)
    }

    pub fn write(&self, w: &mut Writer) {
        w.id(self.numerical_id).name(&self.name_id).raw(&self.signing_key.to_bytes());
        self.certificate.write(w);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let numerical_id = r.id()?;
        let name_id = r.name()?;
        let secret = r.array::<32>()?;
        let certificate = Certificate::read(r)?;
        let signing_key = SigningKey::from_bytes(Identity::numerical(numerical_id), &secret)
            .map_err(|_| DecodeError::Invalid("grant signing key"))?;
        let public_key = certificate.public_key.clone();
        Ok(RegistrationGrant { numerical_id, name_id, signing_key, public_key, certificate })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GuardRole {
    Main = 0,
    SideLeft = 1,
    SideRight = 2,
}

impl GuardRole {
    pub const ALL: [GuardRole; 3] = [GuardRole::Main, GuardRole::SideLeft, GuardRole::SideRight];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Self> {
        GuardRole::ALL.get(i as usize).copied()
    }
}

impl std::fmt::Display for GuardRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GuardRole::Main => "main",
            GuardRole::SideLeft => "side-left",
            GuardRole::SideRight => "side-right",
        })
    }
}

/// Name ids of a subject's three guards, in role order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuardNames {
    pub main: NameId,
    pub side_left: NameId,
    pub side_right: NameId,
}

impl GuardNames {
    pub fn get(&self, role: GuardRole) -> &NameId {
        match role {
            GuardRole::Main => &self.main,
            GuardRole::SideLeft => &self.side_left,
            GuardRole::SideRight => &self.side_right,
        }
    }

    pub fn write(&self, w: &mut Writer) {
        w.name(&self.main).name(&self.side_left).name(&self.side_right);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(GuardNames { main: r.name()?, side_left: r.name()?, side_right: r.name()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardAssignment {
    pub subject: NumericalId,
    pub names: GuardNames,
    pub guards: [NeighborEntry; 3],
}

/// What one guard holds for one subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardProvision {
    pub role: GuardRole,
    pub share: KeyShare,
    pub subject_table: LookupTable,
    pub subject_table_proof: TableProof,
}

impl GuardProvision {
    pub fn subject(&self) -> &NeighborEntry {
        self.subject_table.owner()
    }

    pub fn write(&self, w: &mut Writer) {
        w.u8(self.role as u8);
        self.share.write(w);
        self.subject_table.write(w);
        self.subject_table_proof.write(w);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let role = GuardRole::from_index(r.u8()?).ok_or(DecodeError::Invalid("guard role"))?;
        Ok(GuardProvision {
            role,
            share: KeyShare::read(r)?,
            subject_table: LookupTable::read(r)?,
            subject_table_proof: TableProof::read(r)?,
        })
    }
}

/// Outcome of provisioning one subject: the three guard provisions (to be
/// delivered to `assignment.guards` in role order) and the certificate the
/// subject attaches to its name-id signatures.
#[derive(Debug, Clone)]
pub struct Provisioning {
    pub assignment: GuardAssignment,
    pub provisions: [GuardProvision; 3],
    pub name_certificate: Certificate,
}

/// Challenge strings of one authentication session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    pub session: u64,
    pub strings: [[u8; CHALLENGE_LEN]; CHALLENGE_COUNT],
}

impl Challenge {
    pub fn write(&self, w: &mut Writer) {
        w.u64(self.session);
        for s in &self.strings {
            w.raw(s);
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let session = r.u64()?;
        let mut strings = [[0u8; CHALLENGE_LEN]; CHALLENGE_COUNT];
        for s in &mut strings {
            *s = r.array()?;
        }
        Ok(Challenge { session, strings })
    }
}

/// Message a node signs to answer one challenge string.
pub fn challenge_message(string: &[u8; CHALLENGE_LEN]) -> Vec<u8> {
    [CHALLENGE_TAG, string.as_slice()].concat()
}

/// Signs every string of `challenge` with `key`.
pub fn answer_challenge(key: &SigningKey, challenge: &Challenge) -> Vec<Signature> {
    challenge.strings.iter().map(|s| crate::crypto::sign(key, &challenge_message(s))).collect()
}

pub fn verify_table_proof(table: &LookupTable, proof: &TableProof, params: &PublicParams) -> bool {
    proof.verify(table, params)
}

/// `(perm(subject), perm(left0), perm(right0))`.
pub fn compute_guard_name_ids(
    subject: &NameId,
    level0_left: &NameId,
    level0_right: &NameId,
    key: &PermutationKey,
) -> Result<GuardNames, CryptoError> {
    Ok(GuardNames {
        main: keyed_permutation(key, subject)?,
        side_left: keyed_permutation(key, level0_left)?,
        side_right: keyed_permutation(key, level0_right)?,
    })
}

/// Longest-prefix owner of `target` among `entries`, ties to the smaller id.
pub fn resolve_name<'a>(entries: impl IntoIterator<Item = &'a NeighborEntry>, target: &NameId) -> Option<&'a NeighborEntry> {
    let mut best: Option<(usize, &NeighborEntry)> = None;
    for e in entries {
        let c = common_prefix_len(&e.name_id, target).unwrap_or(0);
        match best {
            Some((bc, b)) if bc > c || (bc == c && b.numerical_id <= e.numerical_id) => {}
            _ => best = Some((c, e)),
        }
    }
    best.map(|(_, e)| e)
}

struct Registered {
    phys: PhysicalIdentity,
    entry: NeighborEntry,
    grant: RegistrationGrant,
}

#[derive(Default)]
struct NodeState {
    authenticated: bool,
    table: Option<(LookupTable, TableProof)>,
}

/// Serial TTP state machine. The permutation key and master secret never
/// leave this value.
pub struct Ttp {
    master: MasterSecret,
    perm: PermutationKey,
    params: PublicParams,
    id_bits: u32,
    rng: ChaCha20Rng,
    by_phys: HashMap<PhysicalIdentity, NumericalId>,
    nodes: BTreeMap<NumericalId, Registered>,
    state: HashMap<NumericalId, NodeState>,
    sessions: HashMap<u64, (NumericalId, Challenge)>,
    next_session: u64,
}

impl std::fmt::Debug for Ttp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ttp").field("m", &self.params.m).field("nodes", &self.nodes.len()).finish_non_exhaustive()
    }
}

impl Ttp {
    /// `seed` drives challenge generation.
    pub fn new(master: MasterSecret, perm: PermutationKey, seed: u64) -> Result<Self, TtpError> {
        let params = public_params(&master, perm.width())?;
        Ok(Ttp {
            master,
            perm,
            params,
            id_bits: 64,
            rng: ChaCha20Rng::seed_from_u64(seed),
            by_phys: HashMap::new(),
            nodes: BTreeMap::new(),
            state: HashMap::new(),
            sessions: HashMap::new(),
            next_session: 1,
        })
    }

    /// Truncates issued ids to `bits` bits. Only meaningful for fixtures that
    /// need to provoke digest collisions.
    pub fn with_id_bits(mut self, bits: u32) -> Self {
        assert!((1..=64).contains(&bits));
        self.id_bits = bits;
        self
    }

    pub fn publish_params(&self) -> PublicParams {
        self.params.clone()
    }

    pub fn registered(&self) -> impl Iterator<Item = &NeighborEntry> + '_ {
        self.nodes.values().map(|r| &r.entry)
    }

    fn id_for(&self, addr: &Address) -> Result<NumericalId, TtpError> {
        let digest = Sha256::digest(addr.to_string().as_bytes());
        let full = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
        let mask = if self.id_bits == 64 { u64::MAX } else { (1u64 << self.id_bits) - 1 };
        let start = full >> (64 - self.id_bits);
        let mut id = start;
        while self.nodes.contains_key(&NumericalId(id)) {
            id = id.wrapping_add(1) & mask;
            if id == start {
                return Err(TtpError::Exhausted);
            }
        }
        Ok(NumericalId(id))
    }

    pub fn register(&mut self, phys: &PhysicalIdentity, addr: &Address) -> Result<RegistrationGrant, TtpError> {
        if let Some(id) = self.by_phys.get(phys) {
            let reg = &self.nodes[id];
            if reg.entry.address != *addr {
                return Err(TtpError::Binding { bound: reg.entry.address.clone() });
            }
            return Ok(reg.grant.clone());
        }
        let id = self.id_for(addr)?;
        self.issue(phys, addr, id)
    }

    /// Issues a chosen id instead of the address digest. Fixtures use this
    /// to reproduce hand-drawn topologies.
    pub fn register_as(
        &mut self,
        phys: &PhysicalIdentity,
        addr: &Address,
        id: NumericalId,
    ) -> Result<RegistrationGrant, TtpError> {
        if self.by_phys.contains_key(phys) {
            return self.register(phys, addr);
        }
        if self.nodes.contains_key(&id) {
            return Err(TtpError::Binding { bound: self.nodes[&id].entry.address.clone() });
        }
        self.issue(phys, addr, id)
    }

    fn issue(&mut self, phys: &PhysicalIdentity, addr: &Address, id: NumericalId) -> Result<RegistrationGrant, TtpError> {
        let name_id = hash_name_id(id, self.params.m)?;
        let (signing_key, public_key, certificate) = derive_identity_keypair(&self.master, &Identity::numerical(id))?;
        let grant = RegistrationGrant { numerical_id: id, name_id, signing_key, public_key, certificate };
        let entry = NeighborEntry::new(id, name_id, addr.clone());
        self.by_phys.insert(phys.clone(), id);
        self.nodes.insert(id, Registered { phys: phys.clone(), entry, grant: grant.clone() });
        self.state.insert(id, NodeState::default());
        Ok(grant)
    }

    pub fn begin_auth(&mut self, phys: &PhysicalIdentity) -> Result<Challenge, TtpError> {
        let id = *self.by_phys.get(phys).ok_or(TtpError::UnknownIdentity)?;
        let mut strings = [[0u8; CHALLENGE_LEN]; CHALLENGE_COUNT];
        for s in &mut strings {
            self.rng.fill_bytes(s);
        }
        let session = self.next_session;
        self.next_session += 1;
        let challenge = Challenge { session, strings };
        self.sessions.insert(session, (id, challenge.clone()));
        Ok(challenge)
    }

    /// Closes `session`. Every string must carry a valid signature under the
    /// node's numerical-id key; sessions are single-use either way.
    pub fn finish_auth(&mut self, session: u64, responses: &[Signature]) -> Result<NumericalId, TtpError> {
        let (id, challenge) = self.sessions.remove(&session).ok_or(TtpError::UnknownSession(session))?;
        let pk = &self.nodes[&id].grant.public_key;
        let ok = responses.len() == CHALLENGE_COUNT
            && challenge.strings.iter().zip(responses).all(|(s, sig)| verify_with_key(pk, &challenge_message(s), sig));
        if !ok {
            return Err(TtpError::Auth);
        }
        self.state.get_mut(&id).expect("registered").authenticated = true;
        Ok(id)
    }

    /// Full challenge-response round with a local signer.
    pub fn authenticate(&mut self, phys: &PhysicalIdentity, key: &SigningKey) -> Result<NumericalId, TtpError> {
        let challenge = self.begin_auth(phys)?;
        let responses = answer_challenge(key, &challenge);
        self.finish_auth(challenge.session, &responses)
    }

    pub fn is_authenticated(&self, id: NumericalId) -> bool {
        self.state.get(&id).is_some_and(|s| s.authenticated)
    }

    /// Accepts an authenticated node's table and proof and returns the name
    /// ids of its guards.
    pub fn submit_table(&mut self, table: LookupTable, proof: TableProof) -> Result<GuardNames, TtpError> {
        let owner = table.owner().clone();
        let reg = self.nodes.get(&owner.numerical_id).ok_or(TtpError::UnknownNode(owner.numerical_id))?;
        if !self.is_authenticated(owner.numerical_id) {
            return Err(TtpError::NotAuthenticated(owner.numerical_id));
        }
        let consistent = reg.entry == owner
            && table.validate().is_ok()
            && table.entries().all(|(_, _, e)| self.nodes.get(&e.numerical_id).is_some_and(|r| r.entry == *e));
        if !consistent || !verify_table_proof(&table, &proof, &self.params) {
            return Err(TtpError::ProofRejected(owner.numerical_id));
        }
        let left = table.left0().map_err(|_| TtpError::ProofRejected(owner.numerical_id))?.name_id;
        let right = table.right0().map_err(|_| TtpError::ProofRejected(owner.numerical_id))?.name_id;
        let names = compute_guard_name_ids(&owner.name_id, &left, &right, &self.perm)?;
        self.state.get_mut(&owner.numerical_id).expect("registered").table = Some((table, proof));
        Ok(names)
    }

    /// Takes the guards the subject located, checks each against the TTP's
    /// own registry and that each authenticated, then deals the subject's
    /// name-id key as three shares.
    pub fn guard_connect(&mut self, subject: NumericalId, guards: [NeighborEntry; 3]) -> Result<Provisioning, TtpError> {
        let reg = self.nodes.get(&subject).ok_or(TtpError::UnknownNode(subject))?;
        let (table, proof) = self.state[&subject].table.clone().ok_or(TtpError::NoTable(subject))?;
        let left = table.left0().map_err(|_| TtpError::ProofRejected(subject))?.name_id;
        let right = table.right0().map_err(|_| TtpError::ProofRejected(subject))?.name_id;
        let names = compute_guard_name_ids(&reg.entry.name_id, &left, &right, &self.perm)?;
        for (role, got) in GuardRole::ALL.into_iter().zip(&guards) {
            let expected = resolve_name(self.registered(), names.get(role)).expect("subject is registered");
            if expected != got {
                return Err(TtpError::WrongGuard {
                    subject,
                    role,
                    expected: expected.numerical_id,
                    got: got.numerical_id,
                });
            }
            if !self.is_authenticated(got.numerical_id) {
                return Err(TtpError::NotAuthenticated(got.numerical_id));
            }
        }
        let name_identity = Identity::name(&reg.entry.name_id);
        let (name_key, _, name_certificate) = derive_identity_keypair(&self.master, &name_identity)?;
        let shares = split_3of3(&name_key)?;
        let provisions = shares.map(|share| GuardProvision {
            role: GuardRole::from_index(share.index()).expect("share index below 3"),
            share,
            subject_table: table.clone(),
            subject_table_proof: proof.clone(),
        });
        Ok(Provisioning { assignment: GuardAssignment { subject, names, guards }, provisions, name_certificate })
    }

    /// Physical identity bound to `id`.
    pub fn physical_identity(&self, id: NumericalId) -> Option<&PhysicalIdentity> {
        self.nodes.get(&id).map(|r| &r.phys)
    }
}
