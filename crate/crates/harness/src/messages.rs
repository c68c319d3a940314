//! Message kinds and body encodings of the demo protocol.

use guard_core::auth::ProofChain;
use guard_core::codec::{DecodeError, Reader, Writer};
use guard_core::crypto::{Nonce, NONCE_LEN};
use guard_core::ids::{Address, NumericalId};

use crate::log::Mode;

pub mod kind {
    pub const CTRL_REGISTER: u8 = 10;
    pub const INIT_START: u8 = 11;
    pub const INIT_DONE: u8 = 12;
    pub const EXPERIMENT_REQUEST: u8 = 13;
    pub const WORKLOAD_DONE: u8 = 14;
    pub const LOG_UPLOAD: u8 = 15;

    pub const TTP_REGISTER: u8 = 20;
    pub const CHALLENGE: u8 = 21;
    pub const CHALLENGE_RESPONSE: u8 = 22;
    pub const TABLE_SUBMIT: u8 = 23;
    pub const GUARD_CONNECT: u8 = 24;
    pub const PROVISION: u8 = 25;

    pub const FETCH_TABLE: u8 = 30;
    pub const SET_NEIGHBOR: u8 = 31;
    pub const ATTEST: u8 = 32;
    pub const GUARD_REQUEST: u8 = 33;
    pub const COSIGN: u8 = 34;

    pub const QUERY: u8 = 40;
    pub const RESULT: u8 = 41;
    pub const QUERY_REJECTED: u8 = 42;
    pub const QUERY_FAILED: u8 = 43;
}

pub const STATUS_OK: u8 = 0;
pub const STATUS_ERR: u8 = 1;

/// Reply body: status byte, then either `ok` bytes or an error string.
pub fn ok_reply(body: impl FnOnce(&mut Writer)) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(STATUS_OK);
    body(&mut w);
    w.finish()
}

pub fn err_reply(reason: &str) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(STATUS_ERR).str(reason);
    w.finish()
}

/// Splits a reply into its success reader or the remote error text.
pub fn open_reply(body: &[u8]) -> Result<Reader<'_>, String> {
    let mut r = Reader::new(body);
    match r.u8() {
        Ok(STATUS_OK) => Ok(r),
        Ok(_) => Err(r.str().map(str::to_string).unwrap_or_else(|e| format!("malformed error reply: {e}"))),
        Err(e) => Err(format!("malformed reply: {e}")),
    }
}

pub fn write_nonce(w: &mut Writer, n: &Nonce) {
    w.raw(&n.0);
}

pub fn read_nonce(r: &mut Reader<'_>) -> Result<Nonce, DecodeError> {
    Ok(Nonce(r.array::<NONCE_LEN>()?))
}

fn write_mode(w: &mut Writer, m: Mode) {
    w.u8(match m {
        Mode::Plain => 0,
        Mode::Auth => 1,
    });
}

fn read_mode(r: &mut Reader<'_>) -> Result<Mode, DecodeError> {
    match r.u8()? {
        0 => Ok(Mode::Plain),
        1 => Ok(Mode::Auth),
        _ => Err(DecodeError::Invalid("mode")),
    }
}

/// A search in flight. `payload` is the application message; everything
/// else is routing information.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub mode: Mode,
    pub seq: u64,
    pub initiator: NumericalId,
    pub reply_to: Address,
    pub q: NumericalId,
    pub nonce: Nonce,
    pub from: Option<NumericalId>,
    /// Routers visited so far (PLAIN); AUTH recovers the path from the chain.
    pub path: Vec<NumericalId>,
    pub chain: ProofChain,
    pub payload: Vec<u8>,
}

impl Query {
    /// Routers visited so far, whatever the mode.
    pub fn hops(&self) -> usize {
        match self.mode {
            Mode::Plain => self.path.len(),
            Mode::Auth => self.chain.len(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        write_mode(&mut w, self.mode);
        w.u64(self.seq).id(self.initiator).address(&self.reply_to).id(self.q);
        write_nonce(&mut w, &self.nonce);
        w.opt_id(self.from).u32(self.path.len() as u32);
        for id in &self.path {
            w.id(*id);
        }
        self.chain.write(&mut w);
        w.bytes(&self.payload);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let mode = read_mode(&mut r)?;
        let (seq, initiator, reply_to, q) = (r.u64()?, r.id()?, r.address()?, r.id()?);
        let nonce = read_nonce(&mut r)?;
        let from = r.opt_id()?;
        let n = r.u32()? as usize;
        let path = (0..n).map(|_| r.id()).collect::<Result<_, _>>()?;
        let chain = ProofChain::read(&mut r)?;
        let payload = r.bytes()?.to_vec();
        r.finish()?;
        Ok(Query { mode, seq, initiator, reply_to, q, nonce, from, path, chain, payload })
    }
}

/// What the initiator hears back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    /// The terminal router's answer: full path (PLAIN) or chain (AUTH).
    Result { path: Vec<NumericalId>, chain: ProofChain },
    /// A router refused the incoming chain.
    Rejected { hop: u32, reason: String },
    /// A router could not obtain a cosignature, or the query expired.
    Failed { hop: u32, reason: String },
}

/// Body shared by RESULT, QUERY_REJECTED and QUERY_FAILED.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Answer {
    pub mode: Mode,
    pub seq: u64,
    pub outcome: Outcome,
}

impl Answer {
    pub fn kind(&self) -> u8 {
        match self.outcome {
            Outcome::Result { .. } => kind::RESULT,
            Outcome::Rejected { .. } => kind::QUERY_REJECTED,
            Outcome::Failed { .. } => kind::QUERY_FAILED,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        write_mode(&mut w, self.mode);
        w.u64(self.seq);
        match &self.outcome {
            Outcome::Result { path, chain } => {
                w.u32(path.len() as u32);
                for id in path {
                    w.id(*id);
                }
                chain.write(&mut w);
            }
            Outcome::Rejected { hop, reason } | Outcome::Failed { hop, reason } => {
                w.u32(*hop).str(reason);
            }
        }
        w.finish()
    }

    pub fn decode(kind: u8, bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let mode = read_mode(&mut r)?;
        let seq = r.u64()?;
        let outcome = match kind {
            kind::RESULT => {
                let n = r.u32()? as usize;
                let path = (0..n).map(|_| r.id()).collect::<Result<_, _>>()?;
                Outcome::Result { path, chain: ProofChain::read(&mut r)? }
            }
            kind::QUERY_REJECTED => Outcome::Rejected { hop: r.u32()?, reason: r.str()?.to_string() },
            kind::QUERY_FAILED => Outcome::Failed { hop: r.u32()?, reason: r.str()?.to_string() },
            _ => return Err(DecodeError::Invalid("answer kind")),
        };
        r.finish()?;
        Ok(Answer { mode, seq, outcome })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_roundtrip() {
        let q = Query {
            mode: Mode::Plain,
            seq: 9,
            initiator: NumericalId(4),
            reply_to: Address::new("10.0.0.1", 7000),
            q: NumericalId(77),
            nonce: Nonce([3; 16]),
            from: Some(NumericalId(5)),
            path: vec![NumericalId(4), NumericalId(5)],
            chain: ProofChain::default(),
            payload: vec![0xaa; 300],
        };
        assert_eq!(Query::decode(&q.encode()).unwrap(), q);
        assert_eq!(q.hops(), 2);
        let mut bytes = q.encode();
        bytes.push(0);
        assert!(Query::decode(&bytes).is_err());
    }

    #[test]
    fn answer_roundtrip() {
        for outcome in [
            Outcome::Result { path: vec![NumericalId(1)], chain: ProofChain::default() },
            Outcome::Rejected { hop: 2, reason: "BrokenLink".into() },
            Outcome::Failed { hop: 1, reason: "refused".into() },
        ] {
            let a = Answer { mode: Mode::Auth, seq: 3, outcome };
            assert_eq!(Answer::decode(a.kind(), &a.encode()).unwrap(), a);
        }
    }

    #[test]
    fn replies() {
        let ok = ok_reply(|w| {
            w.u64(5);
        });
        assert_eq!(open_reply(&ok).unwrap().u64().unwrap(), 5);
        assert_eq!(open_reply(&err_reply("nope")).unwrap_err(), "nope");
    }
}
