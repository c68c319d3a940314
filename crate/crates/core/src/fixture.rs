//! A fully initialized Guard overlay driven synchronously in one process:
//! registration, join, table proofs, guard assignment and authenticated
//! search without any network. Tests and the acceptance suite use it where
//! message timing is irrelevant.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::auth::{
    combine_cosign, guard_evaluate, make_hop_transcript, CosignError, Expectation, NonceLedger, ProofChain,
    RouterCredentials, RoutingTranscript, Tail, Verdict, Verifier,
};
use crate::crypto::{sign, MasterSecret, Nonce, PermutationKey, PublicParams};
use crate::ids::{Address, NumericalId};
use crate::skipgraph::{
    build_table_proof, local_next_hop, JoinError, NeighborEntry, Overlay, ProofError, RoutingDecision, SearchPath,
    SignedAttestation, TableError, TableProof,
};
use crate::ttp::{GuardAssignment, GuardProvision, GuardRole, PhysicalIdentity, RegistrationGrant, Ttp, TtpError};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error(transparent)]
    Ttp(#[from] TtpError),
    #[error(transparent)]
    Join(#[from] JoinError),
    #[error(transparent)]
    Proof(#[from] ProofError),
    #[error(transparent)]
    Crypto(#[from] crate::crypto::CryptoError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthSearchError {
    #[error("cosign failed at hop {hop}: {error}")]
    Cosign { hop: usize, error: CosignError },
    #[error("hop {hop} rejected the incoming chain: {verdict}")]
    Rejected { hop: usize, verdict: Verdict },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("unknown node {0}")]
    UnknownNode(NumericalId),
}

#[derive(Debug, Clone)]
pub struct FixtureNode {
    pub phys: PhysicalIdentity,
    pub entry: NeighborEntry,
    pub grant: RegistrationGrant,
    pub credentials: RouterCredentials,
    pub assignment: GuardAssignment,
}

/// Result of one authenticated search.
#[derive(Debug, Clone)]
pub struct AuthRun {
    pub hops: Vec<NumericalId>,
    pub chain: ProofChain,
    pub nonce: Nonce,
    pub verdict: Verdict,
}

pub struct GuardedOverlay {
    ttp: Ttp,
    params: PublicParams,
    overlay: Overlay,
    nodes: BTreeMap<NumericalId, FixtureNode>,
    /// (guard, subject, role) -> provision held by that guard. One node may
    /// guard the same subject in two roles when guard names collide.
    provisions: HashMap<(NumericalId, NumericalId, GuardRole), GuardProvision>,
    ledgers: HashMap<NumericalId, NonceLedger>,
    verifier: Verifier,
    rng: ChaCha20Rng,
    /// verify the incoming chain at every hop, not only at the initiator
    pub verify_in_flight: bool,
}

pub fn fixture_address(i: usize) -> Address {
    Address::new(format!("10.0.{}.{}", i / 250, i % 250 + 1), 7000)
}

pub fn fixture_phys(i: usize) -> PhysicalIdentity {
    PhysicalIdentity::new(format!("02:00:00:{:02x}:{:02x}:{:02x}", (i >> 16) & 0xff, (i >> 8) & 0xff, i & 0xff))
}

impl GuardedOverlay {
    /// `n` nodes with TTP-issued ids and name ids of width `m`.
    pub fn new(n: usize, m: usize, seed: u64) -> Result<Self, FixtureError> {
        Self::build(n, m, seed, |ttp, i| ttp.register(&fixture_phys(i), &fixture_address(i)))
    }

    /// Nodes with the given numerical ids, for reproducing drawn topologies.
    pub fn with_ids(ids: &[u64], m: usize, seed: u64) -> Result<Self, FixtureError> {
        Self::build(ids.len(), m, seed, |ttp, i| {
            ttp.register_as(&fixture_phys(i), &fixture_address(i), NumericalId(ids[i]))
        })
    }

    fn build(
        n: usize,
        m: usize,
        seed: u64,
        mut register: impl FnMut(&mut Ttp, usize) -> Result<RegistrationGrant, TtpError>,
    ) -> Result<Self, FixtureError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut master_seed = [0u8; 32];
        rand::RngCore::fill_bytes(&mut rng, &mut master_seed);
        let master = MasterSecret::new(&master_seed)?;
        let perm = PermutationKey::random(&mut rng, m)?;
        let mut ttp = Ttp::new(master, perm, rand::RngCore::next_u64(&mut rng))?;
        let params = ttp.publish_params();

        let mut overlay = Overlay::new();
        let mut registered = Vec::with_capacity(n);
        for i in 0..n {
            let grant = register(&mut ttp, i)?;
            let entry = grant.entry(fixture_address(i));
            overlay.join(entry.clone())?;
            ttp.authenticate(&fixture_phys(i), &grant.signing_key)?;
            registered.push((fixture_phys(i), entry, grant));
        }
        let grants: HashMap<NumericalId, &RegistrationGrant> =
            registered.iter().map(|(_, e, g)| (e.numerical_id, g)).collect();

        let mut nodes = BTreeMap::new();
        let mut provisions = HashMap::new();
        for (phys, entry, grant) in &registered {
            let id = entry.numerical_id;
            let table = overlay.table(id).expect("joined").clone();
            let proof = build_table_proof(&table, |_, _, e, msg| {
                let g = grants.get(&e.numerical_id)?;
                Some(SignedAttestation { signature: sign(&g.signing_key, msg), certificate: g.certificate.clone() })
            })?;
            let names = ttp.submit_table(table, proof)?;
            let guards = GuardRole::ALL.map(|r| overlay.search_by_name_id(id, names.get(r)).expect("non-empty overlay"));
            let p = ttp.guard_connect(id, guards)?;
            for (g, prov) in p.assignment.guards.iter().zip(p.provisions) {
                provisions.insert((g.numerical_id, id, prov.role), prov);
            }
            let credentials = RouterCredentials {
                numerical_key: grant.signing_key.clone(),
                numerical_cert: grant.certificate.clone(),
                name_cert: p.name_certificate,
            };
            nodes.insert(
                id,
                FixtureNode {
                    phys: phys.clone(),
                    entry: entry.clone(),
                    grant: grant.clone(),
                    credentials,
                    assignment: p.assignment,
                },
            );
        }
        Ok(GuardedOverlay {
            ttp,
            verifier: Verifier::new(params.clone()),
            params,
            overlay,
            nodes,
            provisions,
            ledgers: HashMap::new(),
            rng,
            verify_in_flight: true,
        })
    }

    pub fn params(&self) -> &PublicParams {
        &self.params
    }

    pub fn overlay(&self) -> &Overlay {
        &self.overlay
    }

    pub fn ttp(&self) -> &Ttp {
        &self.ttp
    }

    pub fn ids(&self) -> Vec<NumericalId> {
        self.nodes.keys().copied().collect()
    }

    pub fn node(&self, id: NumericalId) -> Option<&FixtureNode> {
        self.nodes.get(&id)
    }

    pub fn verifier_mut(&mut self) -> &mut Verifier {
        &mut self.verifier
    }

    /// The provision `subject`'s guard in `role` holds.
    pub fn provision(&self, subject: NumericalId, role: GuardRole) -> Option<&GuardProvision> {
        let guard = self.nodes.get(&subject)?.assignment.guards[role.index()].numerical_id;
        self.provisions.get(&(guard, subject, role))
    }

    /// Every provision held for `subject`, in guard-role order.
    pub fn provisions_for(&self, subject: NumericalId) -> Option<[&GuardProvision; 3]> {
        let ps = GuardRole::ALL.map(|r| self.provision(subject, r));
        if ps.iter().all(Option::is_some) {
            Some(ps.map(|p| p.expect("checked")))
        } else {
            None
        }
    }

    pub fn fresh_nonce(&mut self) -> Nonce {
        crate::crypto::random_nonce(&mut self.rng)
    }

    pub fn plain_search(&self, initiator: NumericalId, q: NumericalId) -> Result<SearchPath, TableError> {
        self.overlay.search_by_numerical_id(initiator, q)
    }

    /// Asks `router`'s three guards to cosign `t` and builds the routing proof.
    pub fn cosign(&self, router: NumericalId, t: &RoutingTranscript) -> Result<crate::auth::RoutingProof, CosignError> {
        let node = &self.nodes[&router];
        let answers = GuardRole::ALL
            .iter()
            .map(|&role| match self.provision(router, role) {
                Some(p) => guard_evaluate(p, t),
                None => Err(crate::auth::Refusal::WrongSubject { subject: router, got: router }),
            })
            .collect();
        let sig_name = combine_cosign(answers)?;
        Ok(node.credentials.proof(*t, sig_name))
    }

    /// Runs one honest authenticated search with a fresh nonce.
    pub fn auth_search(&mut self, initiator: NumericalId, q: NumericalId) -> Result<AuthRun, AuthSearchError> {
        let nonce = self.fresh_nonce();
        self.auth_search_with_nonce(initiator, q, nonce)
    }

    pub fn auth_search_with_nonce(
        &mut self,
        initiator: NumericalId,
        q: NumericalId,
        nonce: Nonce,
    ) -> Result<AuthRun, AuthSearchError> {
        let exp = Expectation { initiator, query: q, nonce };
        let mut chain = ProofChain::default();
        let mut hops = vec![initiator];
        let mut from = None;
        let mut cur = initiator;
        loop {
            let hop = hops.len() - 1;
            if hop > 0 && self.verify_in_flight {
                let ledger = self.ledgers.entry(cur).or_default();
                let v = self.verifier.verify_with_tail(&chain, &exp, Tail::ForwardedTo(cur), ledger);
                if !v.is_accept() {
                    return Err(AuthSearchError::Rejected { hop, verdict: v });
                }
            }
            let table = self.overlay.table(cur).ok_or(AuthSearchError::UnknownNode(cur))?;
            let decision = local_next_hop(table, cur, q)?;
            let t = make_hop_transcript(cur, from, &decision, initiator, q, nonce);
            let proof = self.cosign(cur, &t).map_err(|error| AuthSearchError::Cosign { hop, error })?;
            chain.push(proof);
            match decision {
                RoutingDecision::Forward(next) => {
                    from = Some(cur);
                    cur = next.numerical_id;
                    hops.push(cur);
                }
                RoutingDecision::Terminate => break,
            }
        }
        let ledger = self.ledgers.entry(initiator).or_default();
        let verdict = self.verifier.verify_chain(&chain, &exp, ledger);
        Ok(AuthRun { hops, chain, nonce, verdict })
    }

    /// Verifies `chain` at `node` as a returned result, using that node's ledger.
    pub fn verify_at(&mut self, node: NumericalId, chain: &ProofChain, exp: &Expectation) -> Verdict {
        let ledger = self.ledgers.entry(node).or_default();
        self.verifier.verify_chain(chain, exp, ledger)
    }

    /// A proof of `node`'s table signed by its honest neighbors.
    pub fn table_proof(&self, node: NumericalId) -> Option<TableProof> {
        let table = self.overlay.table(node)?;
        build_table_proof(table, |_, _, e, msg| {
            let g = &self.nodes.get(&e.numerical_id)?.grant;
            Some(SignedAttestation { signature: sign(&g.signing_key, msg), certificate: g.certificate.clone() })
        })
        .ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::{audit_termination, verify_proof_chain, RejectReason};
    use crate::crypto::{combine_partials, partial_sign, verify, Identity};

    fn oracle(ids: &[NumericalId], q: NumericalId) -> NumericalId {
        let i = ids.partition_point(|&x| x <= q);
        if i == 0 {
            *ids.last().unwrap()
        } else {
            ids[i - 1]
        }
    }

    #[test]
    fn fig1_path_and_chain() {
        let mut g = GuardedOverlay::with_ids(&[10, 20, 30, 45, 60, 75], 8, 7).unwrap();
        let (i, q) = (NumericalId(45), NumericalId(25));
        let plain = g.plain_search(i, q).unwrap();
        assert_eq!(plain.hops, vec![NumericalId(45), NumericalId(30), NumericalId(20)]);
        let t45 = g.overlay().table(i).unwrap().clone();
        assert_eq!(t45.left0().unwrap().numerical_id, NumericalId(30));
        assert!(matches!(local_next_hop(&t45, i, q).unwrap(), RoutingDecision::Forward(e) if e.numerical_id == NumericalId(30)));

        let run = g.auth_search(i, q).unwrap();
        assert_eq!(run.verdict, Verdict::Accept);
        assert_eq!(run.hops, plain.hops);
        let ts: Vec<_> = run.chain.0.iter().map(|p| p.transcript).collect();
        assert_eq!((ts[0].from, ts[0].to), (None, Some(NumericalId(30))));
        assert_eq!((ts[1].from, ts[1].to), (Some(NumericalId(45)), Some(NumericalId(20))));
        assert_eq!((ts[2].from, ts[2].to), (Some(NumericalId(30)), None));
        assert!(ts.iter().all(|t| t.nonce == run.nonce && t.initiator == i && t.query == q));

        // side guards of 45 are the main guards of 30 and of its right neighbor
        let a45 = &g.node(i).unwrap().assignment;
        let right = t45.right0().unwrap().numerical_id;
        assert_eq!(a45.guards[1], g.node(NumericalId(30)).unwrap().assignment.guards[0]);
        assert_eq!(a45.guards[2], g.node(right).unwrap().assignment.guards[0]);
    }

    #[test]
    fn self_query_is_single_proof() {
        let mut g = GuardedOverlay::new(8, 16, 3).unwrap();
        let id = g.ids()[4];
        let run = g.auth_search(id, id).unwrap();
        assert_eq!(run.verdict, Verdict::Accept);
        assert_eq!(run.chain.len(), 1);
        let t = run.chain.0[0].transcript;
        assert_eq!((t.from, t.to), (None, None));
    }

    #[test]
    fn honest_searches_accept_and_match_plain() {
        let mut g = GuardedOverlay::new(32, 32, 11).unwrap();
        let ids = g.ids();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..200 {
            let i = ids[rand::Rng::random_range(&mut rng, 0..ids.len())];
            let q = NumericalId(rand::Rng::random(&mut rng));
            let plain = g.plain_search(i, q).unwrap();
            let run = g.auth_search(i, q).unwrap();
            assert_eq!(run.verdict, Verdict::Accept);
            assert_eq!(run.hops, plain.hops);
            assert_eq!(audit_termination(&run.chain, oracle(&ids, q)), Verdict::Accept);
        }
    }

    #[test]
    fn replayed_chain_is_rejected() {
        let mut g = GuardedOverlay::new(16, 16, 2).unwrap();
        let ids = g.ids();
        let run = g.auth_search(ids[0], NumericalId(u64::MAX / 3)).unwrap();
        assert!(run.verdict.is_accept());
        let exp = Expectation { initiator: ids[0], query: NumericalId(u64::MAX / 3), nonce: run.nonce };
        assert_eq!(g.verify_at(ids[0], &run.chain, &exp), Verdict::Reject { reason: RejectReason::ReplayedNonce, index: 0 });
        let mut fresh = NonceLedger::default();
        let params = g.params().clone();
        let v = verify_proof_chain(&run.chain, &params, exp.initiator, exp.query, exp.nonce, &mut fresh);
        assert!(v.is_accept());
        let v = verify_proof_chain(&run.chain, &params, exp.initiator, exp.query, exp.nonce, &mut fresh);
        assert_eq!(v, Verdict::Reject { reason: RejectReason::ReplayedNonce, index: 0 });
    }

    #[test]
    fn broken_link_is_reported_at_its_index() {
        let mut g = GuardedOverlay::with_ids(&[10, 20, 30, 45, 60, 75], 8, 7).unwrap();
        let run = g.auth_search(NumericalId(45), NumericalId(25)).unwrap();
        let mut chain = run.chain.clone();
        chain.0[1].transcript.from = Some(NumericalId(44));
        let exp = Expectation { initiator: NumericalId(45), query: NumericalId(25), nonce: run.nonce };
        let v = g.verifier_mut().verify_chain(&chain, &exp, &mut NonceLedger::default());
        assert_eq!(v, Verdict::Reject { reason: RejectReason::BrokenLink, index: 1 });
    }

    #[test]
    fn guards_refuse_non_prescribed_hops() {
        let g = GuardedOverlay::new(32, 32, 4).unwrap();
        let ids = g.ids();
        let nonce = Nonce([1; 16]);
        let mut refused = 0;
        for &me in &ids {
            let table = g.overlay().table(me).unwrap();
            // a query just below the highest right neighbor: the top neighbor
            // overshoots, so only a lower-level one is prescribed
            let right: Vec<_> = table.entries().filter(|(_, s, e)| *s == crate::skipgraph::Side::Right && e.numerical_id > me).map(|(_, _, e)| e.numerical_id).collect();
            let Some(&far) = right.iter().max() else { continue };
            let q = NumericalId(far.0 - 1);
            let honest = local_next_hop(table, me, q).unwrap();
            let t_ok = make_hop_transcript(me, None, &honest, me, q, nonce);
            assert!(g.cosign(me, &t_ok).is_ok());
            let t_over = RoutingTranscript { to: Some(far), ..t_ok };
            assert!(matches!(
                g.cosign(me, &t_over),
                Err(CosignError::Refused { refusal: crate::auth::Refusal::NotPrescribed { .. }, .. })
            ));
            let stranger = ids.iter().find(|x| table.entries().all(|(_, _, e)| e.numerical_id != **x) && **x != me);
            if let Some(&s) = stranger {
                assert!(g.cosign(me, &RoutingTranscript { to: Some(s), ..t_ok }).is_err());
            }
            let other = ids.iter().copied().find(|&x| x != me).unwrap();
            let p = g.provision(me, GuardRole::Main).unwrap();
            assert!(matches!(
                guard_evaluate(p, &RoutingTranscript { router: other, ..t_ok }),
                Err(crate::auth::Refusal::WrongSubject { .. })
            ));
            refused += 1;
        }
        assert!(refused > 10);
    }

    #[test]
    fn guards_hold_three_shares_and_subject_holds_no_name_key() {
        let g = GuardedOverlay::new(16, 16, 9).unwrap();
        let msg = b"any transcript";
        for id in g.ids() {
            let ps = g.provisions_for(id).unwrap();
            let mut idx: Vec<u8> = ps.iter().map(|p| p.share.index()).collect();
            idx.sort();
            assert_eq!(idx, [0, 1, 2]);
            let node = g.node(id).unwrap();
            let name = Identity::name(&node.entry.name_id);
            let parts: Vec<_> = ps.iter().map(|p| partial_sign(&p.share, msg)).collect();
            let sig = combine_partials(&parts).unwrap();
            assert!(verify(&name, &node.credentials.name_cert, g.params(), msg, &sig));
            // the subject's own key is a numerical-id key and cannot sign for its name
            let own = sign(&node.grant.signing_key, msg);
            assert!(!verify(&name, &node.credentials.name_cert, g.params(), msg, &own));
        }
    }
}
