use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use sha2::{Digest, Sha256};

use super::transcript::{ProofChain, RoutingProof};
use crate::crypto::{
    hash_name_id, verify_batch, verify_with_key, BatchItem, Certificate, Identity, Nonce, PublicParams, Signature,
    SIGNATURE_LEN,
};
use crate::ids::NumericalId;

pub const NONCE_LEDGER_CAPACITY: usize = 65_536;
const SIGNATURE_CACHE_CAPACITY: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RejectReason {
    BadNumericalSig,
    BadNameSig,
    BrokenLink,
    FieldMismatch,
    BadHead,
    BadTail,
    ReplayedNonce,
    WrongTermination,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::BadNumericalSig => "BadNumericalSig",
            RejectReason::BadNameSig => "BadNameSig",
            RejectReason::BrokenLink => "BrokenLink",
            RejectReason::FieldMismatch => "FieldMismatch",
            RejectReason::BadHead => "BadHead",
            RejectReason::BadTail => "BadTail",
            RejectReason::ReplayedNonce => "ReplayedNonce",
            RejectReason::WrongTermination => "WrongTermination",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    /// `index` is the earliest proof at which verification failed.
    Reject { reason: RejectReason, index: usize },
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }

    fn reject(reason: RejectReason, index: usize) -> Self {
        Verdict::Reject { reason, index }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Accept => f.write_str("Accept"),
            Verdict::Reject { reason, index } => write!(f, "Reject({reason}) at proof {index}"),
        }
    }
}

/// Bounded set of seen `(I, N)` pairs; the oldest pair is evicted first.
#[derive(Debug, Clone)]
pub struct NonceLedger {
    capacity: usize,
    order: VecDeque<(NumericalId, Nonce)>,
    seen: HashSet<(NumericalId, Nonce)>,
}

impl Default for NonceLedger {
    fn default() -> Self {
        NonceLedger::with_capacity(NONCE_LEDGER_CAPACITY)
    }
}

impl NonceLedger {
    pub fn with_capacity(capacity: usize) -> Self {
        assert!(capacity > 0);
        NonceLedger { capacity, order: VecDeque::new(), seen: HashSet::new() }
    }

    pub fn contains(&self, initiator: NumericalId, nonce: Nonce) -> bool {
        self.seen.contains(&(initiator, nonce))
    }

    pub fn record(&mut self, initiator: NumericalId, nonce: Nonce) {
        if !self.seen.insert((initiator, nonce)) {
            return;
        }
        self.order.push_back((initiator, nonce));
        if self.order.len() > self.capacity {
            let old = self.order.pop_front().expect("non-empty");
            self.seen.remove(&old);
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// What the verifier expects of a chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expectation {
    pub initiator: NumericalId,
    pub query: NumericalId,
    pub nonce: Nonce,
}

/// How the last proof must look.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    /// Complete chain: the last transcript terminates.
    Terminated,
    /// Chain still in flight: the last transcript forwards to this node.
    ForwardedTo(NumericalId),
}

/// Proof-chain verifier with memoized positive results.
///
/// Successful certificate checks are cached by digest. Verified signatures
/// are cached per (public key, message); since a BLS signature is unique for
/// its key and message, different bytes for a cached pair are rejected
/// without a pairing.
#[derive(Debug)]
pub struct Verifier {
    params: PublicParams,
    certs: HashSet<[u8; 32]>,
    sigs: HashMap<[u8; 32], [u8; SIGNATURE_LEN]>,
    sig_order: VecDeque<[u8; 32]>,
}

struct SigCheck<'a> {
    index: usize,
    reason: RejectReason,
    cert: &'a Certificate,
    msg: &'a [u8],
    sig: &'a crate::crypto::Signature,
    key: [u8; 32],
}

impl Verifier {
    pub fn new(params: PublicParams) -> Self {
        Verifier { params, certs: HashSet::new(), sigs: HashMap::new(), sig_order: VecDeque::new() }
    }

    pub fn params(&self) -> &PublicParams {
        &self.params
    }

    fn cert_ok(&mut self, cert: &Certificate, expected: &Identity) -> bool {
        if cert.identity != *expected {
            return false;
        }
        let d = cert.digest();
        if self.certs.contains(&d) {
            return true;
        }
        let ok = cert.is_issued_by(&self.params);
        if ok {
            self.certs.insert(d);
        }
        ok
    }

    fn remember_sig(&mut self, key: [u8; 32], sig: &Signature) {
        if self.sigs.insert(key, sig.0).is_none() {
            self.sig_order.push_back(key);
            if self.sig_order.len() > SIGNATURE_CACHE_CAPACITY {
                let old = self.sig_order.pop_front().expect("non-empty");
                self.sigs.remove(&old);
            }
        }
    }

    /// Structural check of proof `i`: head, constancy and linkage.
    fn structure(chain: &[RoutingProof], i: usize, exp: &Expectation) -> Option<RejectReason> {
        let t = &chain[i].transcript;
        if i == 0 && (t.from.is_some() || t.router != exp.initiator) {
            return Some(RejectReason::BadHead);
        }
        if (t.initiator, t.query, t.nonce) != (exp.initiator, exp.query, exp.nonce) {
            return Some(RejectReason::FieldMismatch);
        }
        if i > 0 {
            let prev = &chain[i - 1].transcript;
            if prev.to != Some(t.router) || t.from != Some(prev.router) {
                return Some(RejectReason::BrokenLink);
            }
        }
        None
    }

    /// Certificate check of proof `i` against its router's identities.
    fn certs(&mut self, p: &RoutingProof) -> Option<RejectReason> {
        let num_id = Identity::numerical(p.transcript.router);
        if !self.cert_ok(&p.cert_numerical, &num_id) {
            return Some(RejectReason::BadNumericalSig);
        }
        let Ok(name) = hash_name_id(p.transcript.router, self.params.m) else {
            return Some(RejectReason::BadNameSig);
        };
        if !self.cert_ok(&p.cert_name, &Identity::name(&name)) {
            return Some(RejectReason::BadNameSig);
        }
        None
    }

    /// Checks everything except the nonce ledger.
    ///
    /// Per proof: certificates, then structure. Signatures are verified in
    /// one batch for the proofs before the first such failure, so the
    /// reported index is always the earliest bad proof.
    pub fn check(&mut self, chain: &ProofChain, exp: &Expectation, tail: Tail) -> Verdict {
        let proofs = &chain.0;
        if proofs.is_empty() {
            return Verdict::reject(RejectReason::BadHead, 0);
        }
        let mut early = None;
        for i in 0..proofs.len() {
            if let Some(r) = self.certs(&proofs[i]).or_else(|| Self::structure(proofs, i, exp)) {
                early = Some((i, r));
                break;
            }
        }
        let last = proofs.len() - 1;
        if early.is_none() {
            let t = &proofs[last].transcript;
            let ok = match tail {
                Tail::Terminated => t.to.is_none(),
                Tail::ForwardedTo(me) => t.to == Some(me),
            };
            if !ok {
                early = Some((last, RejectReason::BadTail));
            }
        }
        let upto = early.map_or(proofs.len(), |(i, _)| i);

        let messages: Vec<Vec<u8>> = proofs[..upto].iter().map(|p| p.transcript.encode()).collect();
        // checks in order; a cached pair with other bytes ends the scan
        let mut pending = Vec::new();
        let mut known_bad = None;
        'scan: for (i, p) in proofs[..upto].iter().enumerate() {
            for (reason, cert, sig) in [
                (RejectReason::BadNumericalSig, &p.cert_numerical, &p.sig_numerical),
                (RejectReason::BadNameSig, &p.cert_name, &p.sig_name),
            ] {
                let key: [u8; 32] =
                    Sha256::new().chain_update(cert.public_key.as_bytes()).chain_update(&messages[i]).finalize().into();
                match self.sigs.get(&key) {
                    Some(known) if known == sig.as_bytes() => {}
                    Some(_) => {
                        known_bad = Some((i, reason));
                        break 'scan;
                    }
                    None => pending.push(SigCheck { index: i, reason, cert, msg: &messages[i], sig, key }),
                }
            }
        }

        let first_bad = if pending.len() > 1 {
            let batch: Vec<BatchItem<'_>> =
                pending.iter().map(|c| BatchItem { key: &c.cert.public_key, msg: c.msg, sig: c.sig }).collect();
            if verify_batch(&batch) {
                None
            } else {
                pending.iter().position(|c| !verify_with_key(&c.cert.public_key, c.msg, c.sig))
            }
        } else {
            pending.iter().position(|c| !verify_with_key(&c.cert.public_key, c.msg, c.sig))
        };
        let verified = first_bad.unwrap_or(pending.len());
        for c in &pending[..verified] {
            self.remember_sig(c.key, c.sig);
        }
        let sig_failure = match (first_bad, known_bad) {
            (Some(k), _) => Some((pending[k].index, pending[k].reason)),
            (None, bad) => bad,
        };

        match sig_failure.or(early) {
            Some((index, reason)) => Verdict::reject(reason, index),
            None => Verdict::Accept,
        }
    }

    /// Full verification of a returned chain. The nonce is recorded only when
    /// the chain is otherwise valid.
    pub fn verify_chain(&mut self, chain: &ProofChain, exp: &Expectation, ledger: &mut NonceLedger) -> Verdict {
        self.verify_with_tail(chain, exp, Tail::Terminated, ledger)
    }

    pub fn verify_with_tail(
        &mut self,
        chain: &ProofChain,
        exp: &Expectation,
        tail: Tail,
        ledger: &mut NonceLedger,
    ) -> Verdict {
        let v = self.check(chain, exp, tail);
        if v != Verdict::Accept {
            return v;
        }
        if ledger.contains(exp.initiator, exp.nonce) {
            return Verdict::reject(RejectReason::ReplayedNonce, 0);
        }
        ledger.record(exp.initiator, exp.nonce);
        Verdict::Accept
    }
}

/// One-shot verification with a fresh verifier.
pub fn verify_proof_chain(
    chain: &ProofChain,
    params: &PublicParams,
    initiator: NumericalId,
    query: NumericalId,
    nonce: Nonce,
    ledger: &mut NonceLedger,
) -> Verdict {
    Verifier::new(params.clone()).verify_chain(chain, &Expectation { initiator, query, nonce }, ledger)
}

/// Global-view audit used by tests: an accepted chain must end at `expected`.
pub fn audit_termination(chain: &ProofChain, expected: NumericalId) -> Verdict {
    match chain.last() {
        Some(p) if p.transcript.router == expected => Verdict::Accept,
        _ => Verdict::reject(RejectReason::WrongTermination, chain.len().saturating_sub(1)),
    }
}
