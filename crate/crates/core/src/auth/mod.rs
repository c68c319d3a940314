//! Authenticated search: routing transcripts, guard cosigning and proof-chain
//! verification.

mod guard;
mod transcript;
mod verify;

pub use guard::{combine_cosign, guard_evaluate, self_sign, CosignError, Refusal, RouterCredentials};
pub use transcript::{
    make_hop_transcript, ChainFile, ChainFileError, ProofChain, RoutingProof, RoutingTranscript, TranscriptError,
};
pub use verify::{
    audit_termination, verify_proof_chain, Expectation, NonceLedger, RejectReason, Tail, Verdict, Verifier,
    NONCE_LEDGER_CAPACITY,
};
