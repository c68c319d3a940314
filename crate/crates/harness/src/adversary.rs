//! The four routing deviations. Adversaries keep honest transport and own
//! only their own keys; everything here works with what a malicious router
//! really holds.

use std::collections::BTreeMap;

use guard_core::auth::{self_sign, ProofChain, RoutingProof, RoutingTranscript};
use guard_core::crypto::{derive_identity_keypair, hash_name_id, sign, Identity, MasterSecret};
use guard_core::ids::NumericalId;
use guard_core::skipgraph::{LookupTable, RoutingDecision};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::config::{AdversarySpec, Behavior};

/// Per-node adversary with its own random stream.
#[derive(Debug)]
pub struct Adversary {
    spec: AdversarySpec,
    rng: ChaCha20Rng,
}

impl Adversary {
    pub fn new(spec: AdversarySpec, rng: ChaCha20Rng) -> Self {
        Adversary { spec, rng }
    }

    /// The behavior applied to the next routed query, if any. Each behavior
    /// draws independently in configured order and the first hit wins.
    pub fn fire(&mut self) -> Option<Behavior> {
        let mut hit = None;
        for &(b, frac) in &self.spec.behaviors {
            if self.rng.random_bool(frac) && hit.is_none() {
                hit = Some(b);
            }
        }
        hit
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }
}

/// A uniformly chosen decision other than `honest`: any distinct neighbor,
/// or terminating here. `None` when the table offers no alternative.
pub fn misdirect(
    table: &LookupTable,
    honest: &RoutingDecision,
    rng: &mut impl Rng,
) -> Option<RoutingDecision> {
    let me = table.owner().numerical_id;
    let neighbors: BTreeMap<NumericalId, _> = table
        .entries()
        .filter(|(_, _, e)| e.numerical_id != me)
        .map(|(_, _, e)| (e.numerical_id, e.clone()))
        .collect();
    let mut options: Vec<RoutingDecision> = neighbors.into_values().map(RoutingDecision::Forward).collect();
    options.push(RoutingDecision::Terminate);
    let prescribed = |d: &RoutingDecision| match (d, honest) {
        (RoutingDecision::Terminate, RoutingDecision::Terminate) => true,
        (RoutingDecision::Forward(a), RoutingDecision::Forward(b)) => a.numerical_id == b.numerical_id,
        _ => false,
    };
    options.retain(|d| !prescribed(d));
    if options.is_empty() {
        None
    } else {
        let i = rng.random_range(0..options.len());
        Some(options.swap_remove(i))
    }
}

/// Alters one field of one earlier transcript in place. Returns the proof
/// index and field letter touched, or `None` for an empty chain.
pub fn manipulate(chain: &mut ProofChain, rng: &mut impl Rng) -> Option<(usize, char)> {
    if chain.is_empty() {
        return None;
    }
    let i = rng.random_range(0..chain.len());
    let t = &mut chain.0[i].transcript;
    let bump = |id: Option<NumericalId>| Some(NumericalId(id.map_or(0, |x| x.0 ^ 1)));
    let field = match rng.random_range(0..6) {
        0 => {
            t.router = NumericalId(t.router.0 ^ 1);
            'R'
        }
        1 => {
            t.from = bump(t.from);
            'F'
        }
        2 => {
            t.to = bump(t.to);
            'T'
        }
        3 => {
            t.initiator = NumericalId(t.initiator.0 ^ 1);
            'I'
        }
        4 => {
            t.query = NumericalId(t.query.0 ^ 1);
            'Q'
        }
        _ => {
            t.nonce.0[0] ^= 1;
            'N'
        }
    };
    Some((i, field))
}

/// A terminating proof for `fake`, a node that does not exist, signed with
/// keys and certificates the adversary minted under its own root.
pub fn falsify(template: &RoutingTranscript, fake: NumericalId, m: usize, rng: &mut impl Rng) -> RoutingProof {
    let mut seed = [0u8; 32];
    rng.fill(&mut seed);
    let root = MasterSecret::new(&seed).expect("32-byte seed");
    let name = hash_name_id(fake, m).expect("valid width");
    let (num_key, _, cert_numerical) = derive_identity_keypair(&root, &Identity::numerical(fake)).expect("valid identity");
    let (name_key, _, cert_name) = derive_identity_keypair(&root, &Identity::name(&name)).expect("valid identity");
    let transcript = RoutingTranscript { router: fake, to: None, ..*template };
    let msg = transcript.encode();
    RoutingProof {
        transcript,
        sig_numerical: self_sign(&num_key, &transcript),
        cert_numerical,
        sig_name: sign(&name_key, &msg),
        cert_name,
    }
}
