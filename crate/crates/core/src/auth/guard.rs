use thiserror::Error;

use super::transcript::{RoutingProof, RoutingTranscript};
use crate::crypto::{combine_partials, partial_sign, sign, Certificate, PartialSignature, Signature, SigningKey};
use crate::ids::NumericalId;
use crate::skipgraph::{local_next_hop, RoutingDecision, TableError};
use crate::ttp::GuardProvision;

/// Why a guard declined to cosign.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Refusal {
    #[error("transcript router {got} is not the guarded subject {subject}")]
    WrongSubject { subject: NumericalId, got: NumericalId },
    #[error("transcript routes to {claimed:?}, the table prescribes {expected:?}")]
    NotPrescribed { expected: Option<NumericalId>, claimed: Option<NumericalId> },
    #[error("subject table unusable: {0}")]
    Table(#[from] TableError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CosignError {
    #[error("guard {guard} refused: {refusal}")]
    Refused { guard: usize, refusal: Refusal },
    #[error("guard {0} did not answer")]
    Timeout(usize),
    #[error("partials do not combine: {0}")]
    Combine(String),
}

/// Guard-side check: partial-sign `t` only if its `T` field is exactly the
/// hop the subject's table prescribes for `Q`.
pub fn guard_evaluate(provision: &GuardProvision, t: &RoutingTranscript) -> Result<PartialSignature, Refusal> {
    let subject = provision.subject().numerical_id;
    if t.router != subject {
        return Err(Refusal::WrongSubject { subject, got: t.router });
    }
    let expected = match local_next_hop(&provision.subject_table, subject, t.query)? {
        RoutingDecision::Forward(e) => Some(e.numerical_id),
        RoutingDecision::Terminate => None,
    };
    if expected != t.to {
        return Err(Refusal::NotPrescribed { expected, claimed: t.to });
    }
    Ok(partial_sign(&provision.share, &t.encode()))
}

/// Router's own signature over its transcript.
pub fn self_sign(key: &SigningKey, t: &RoutingTranscript) -> Signature {
    sign(key, &t.encode())
}

/// Combines the three guards' answers, in guard order.
pub fn combine_cosign(answers: Vec<Result<PartialSignature, Refusal>>) -> Result<Signature, CosignError> {
    let mut partials = Vec::with_capacity(answers.len());
    for (guard, a) in answers.into_iter().enumerate() {
        partials.push(a.map_err(|refusal| CosignError::Refused { guard, refusal })?);
    }
    combine_partials(&partials).map_err(|e| CosignError::Combine(e.to_string()))
}

/// What a router needs to produce its routing proofs.
#[derive(Debug, Clone)]
pub struct RouterCredentials {
    pub numerical_key: SigningKey,
    pub numerical_cert: Certificate,
    pub name_cert: Certificate,
}

impl RouterCredentials {
    pub fn proof(&self, transcript: RoutingTranscript, sig_name: Signature) -> RoutingProof {
        RoutingProof {
            transcript,
            sig_numerical: self_sign(&self.numerical_key, &transcript),
            cert_numerical: self.numerical_cert.clone(),
            sig_name,
            cert_name: self.name_cert.clone(),
        }
    }
}
