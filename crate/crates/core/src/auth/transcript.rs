use std::fmt::Write as _;

use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::{Certificate, Nonce, Signature};
use crate::ids::NumericalId;
use crate::skipgraph::RoutingDecision;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TranscriptError {
    #[error("transcript has {0} fields, expected 6")]
    FieldCount(usize),
    #[error("bad {field} field {value:?}")]
    Field { field: &'static str, value: String },
    #[error("transcript is not ASCII")]
    NotAscii,
}

/// Per-hop record `R||F||T||I||Q||N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RoutingTranscript {
    pub router: NumericalId,
    pub from: Option<NumericalId>,
    pub to: Option<NumericalId>,
    pub initiator: NumericalId,
    pub query: NumericalId,
    pub nonce: Nonce,
}

impl RoutingTranscript {
    /// `<R>||<F|null>||<T|null>||<I>||<Q>||<N>`, ids as 16 hex chars and the
    /// nonce as 32.
    pub fn encode(&self) -> Vec<u8> {
        let opt = |id: Option<NumericalId>| id.map_or_else(|| "null".to_string(), NumericalId::to_hex);
        let mut s = String::with_capacity(16 * 5 + 32 + 10);
        write!(
            s,
            "{}||{}||{}||{}||{}||{}",
            self.router.to_hex(),
            opt(self.from),
            opt(self.to),
            self.initiator.to_hex(),
            self.query.to_hex(),
            self.nonce.to_hex()
        )
        .expect("writing to a String");
        s.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TranscriptError> {
        let text = std::str::from_utf8(bytes).map_err(|_| TranscriptError::NotAscii)?;
        let fields: Vec<&str> = text.split("||").collect();
        if fields.len() != 6 {
            return Err(TranscriptError::FieldCount(fields.len()));
        }
        let bad = |field: &'static str, value: &str| TranscriptError::Field { field, value: value.to_string() };
        let id = |field, v: &str| NumericalId::from_hex(v).map_err(|_| bad(field, v));
        let opt = |field, v: &str| if v == "null" { Ok(None) } else { id(field, v).map(Some) };
        Ok(RoutingTranscript {
            router: id("R", fields[0])?,
            from: opt("F", fields[1])?,
            to: opt("T", fields[2])?,
            initiator: id("I", fields[3])?,
            query: id("Q", fields[4])?,
            nonce: Nonce::from_hex(fields[5]).ok_or_else(|| bad("N", fields[5]))?,
        })
    }
}

/// Transcript for one hop: `T` is the forward target, or absent when the
/// router terminates; `F` is absent at the initiator.
pub fn make_hop_transcript(
    me: NumericalId,
    from: Option<NumericalId>,
    decision: &RoutingDecision,
    initiator: NumericalId,
    query: NumericalId,
    nonce: Nonce,
) -> RoutingTranscript {
    let to = match decision {
        RoutingDecision::Forward(e) => Some(e.numerical_id),
        RoutingDecision::Terminate => None,
    };
    RoutingTranscript { router: me, from, to, initiator, query, nonce }
}

/// A transcript with the router's numerical-id signature and the
/// guard-combined name-id signature, each with its certificate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingProof {
    pub transcript: RoutingTranscript,
    pub sig_numerical: Signature,
    pub cert_numerical: Certificate,
    pub sig_name: Signature,
    pub cert_name: Certificate,
}

impl RoutingProof {
    /// Transcript grammar bytes, then length-prefixed signature and
    /// certificate blobs.
    pub fn write(&self, w: &mut Writer) {
        w.bytes(&self.transcript.encode())
            .bytes(self.sig_numerical.as_bytes())
            .bytes(&self.cert_numerical.to_bytes())
            .bytes(self.sig_name.as_bytes())
            .bytes(&self.cert_name.to_bytes());
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let transcript = RoutingTranscript::decode(r.bytes()?).map_err(|_| DecodeError::Invalid("transcript"))?;
        let sig = |b: &[u8]| Signature::from_slice(b).map_err(|_| DecodeError::Invalid("signature length"));
        let cert = |b: &[u8]| {
            let mut inner = Reader::new(b);
            let c = Certificate::read(&mut inner)?;
            inner.finish()?;
            Ok::<_, DecodeError>(c)
        };
        Ok(RoutingProof {
            transcript,
            sig_numerical: sig(r.bytes()?)?,
            cert_numerical: cert(r.bytes()?)?,
            sig_name: sig(r.bytes()?)?,
            cert_name: cert(r.bytes()?)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let p = Self::read(&mut r)?;
        r.finish()?;
        Ok(p)
    }
}

/// Proofs accumulated along a search path, head first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProofChain(pub Vec<RoutingProof>);

impl ProofChain {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, proof: RoutingProof) {
        self.0.push(proof);
    }

    pub fn last(&self) -> Option<&RoutingProof> {
        self.0.last()
    }

    pub fn routers(&self) -> Vec<NumericalId> {
        self.0.iter().map(|p| p.transcript.router).collect()
    }

    pub fn write(&self, w: &mut Writer) {
        w.u32(self.0.len() as u32);
        for p in &self.0 {
            p.write(w);
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.u32()? as usize;
        if n > r.remaining() {
            return Err(DecodeError::Invalid("proof count"));
        }
        (0..n).map(|_| RoutingProof::read(r)).collect::<Result<_, _>>().map(ProofChain)
    }

    /// Serialized size in bytes; feeds the message-size metric.
    pub fn encoded_len(&self) -> usize {
        let mut w = Writer::new();
        self.write(&mut w);
        w.len()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainFileError {
    #[error("missing header line")]
    Header,
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("missing {0}")]
    Missing(&'static str),
}

/// A stored chain with the values the initiator expected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainFile {
    pub initiator: NumericalId,
    pub query: NumericalId,
    pub nonce: Nonce,
    pub chain: ProofChain,
}

const CHAIN_HEADER: &str = "guard-chain v1";

impl ChainFile {
    /// Line-oriented text: a header, `initiator=`, `query=`, `nonce=`, then
    /// one `proof=<hex>` line per proof in chain order.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{CHAIN_HEADER}\ninitiator={}\nquery={}\nnonce={}\n",
            self.initiator.to_hex(),
            self.query.to_hex(),
            self.nonce.to_hex()
        );
        for p in &self.chain.0 {
            s.push_str("proof=");
            s.push_str(&hex::encode(p.to_bytes()));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ChainFileError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == CHAIN_HEADER => {}
            _ => return Err(ChainFileError::Header),
        }
        let (mut initiator, mut query, mut nonce) = (None, None, None);
        let mut chain = ProofChain::default();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: &str| ChainFileError::Line { line: i + 1, reason: reason.to_string() };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key=value"))?;
            match key {
                "initiator" => initiator = Some(NumericalId::from_hex(value).map_err(|e| err(&e.to_string()))?),
                "query" => query = Some(NumericalId::from_hex(value).map_err(|e| err(&e.to_string()))?),
                "nonce" => nonce = Some(Nonce::from_hex(value).ok_or_else(|| err("bad nonce"))?),
                "proof" => {
                    let bytes = hex::decode(value).map_err(|e| err(&e.to_string()))?;
                    chain.push(RoutingProof::from_bytes(&bytes).map_err(|e| err(&e.to_string()))?);
                }
                other => return Err(err(&format!("unknown key {other}"))),
            }
        }
        Ok(ChainFile {
            initiator: initiator.ok_or(ChainFileError::Missing("initiator"))?,
            query: query.ok_or(ChainFileError::Missing("query"))?,
            nonce: nonce.ok_or(ChainFileError::Missing("nonce"))?,
            chain,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::ids::{Address, NameId};
    use crate::skipgraph::NeighborEntry;

    fn t(router: u64, from: Option<u64>, to: Option<u64>, i: u64, q: u64, n: u128) -> RoutingTranscript {
        RoutingTranscript {
            router: NumericalId(router),
            from: from.map(NumericalId),
            to: to.map(NumericalId),
            initiator: NumericalId(i),
            query: NumericalId(q),
            nonce: Nonce(n.to_be_bytes()),
        }
    }

    #[test]
    fn grammar_matches_worked_example() {
        let enc = t(0x2d, None, Some(0x1e), 0x2d, 0x15, 1).encode();
        assert_eq!(
            String::from_utf8(enc).unwrap(),
            "000000000000002d||null||000000000000001e||000000000000002d||0000000000000015||00000000000000000000000000000001"
        );
    }

    #[test]
    fn nonce_changes_encoding() {
        assert_ne!(t(1, None, None, 1, 1, 1).encode(), t(1, None, None, 1, 1, 2).encode());
    }

    #[test]
    fn decode_rejects_malformed() {
        for bad in [
            "000000000000002d||null",
            "000000000000002D||null||null||000000000000002d||0000000000000015||00000000000000000000000000000001",
            "000000000000002d||nul||null||000000000000002d||0000000000000015||00000000000000000000000000000001",
            "000000000000002d||null||null||000000000000002d||0000000000000015||0000000000000000000000000000001",
        ] {
            assert!(RoutingTranscript::decode(bad.as_bytes()).is_err(), "{bad}");
        }
    }

    #[test]
    fn hop_transcripts() {
        let n = Nonce([7; 16]);
        let e30 = NeighborEntry::new(NumericalId(30), NameId::parse_bits("01").unwrap(), Address::new("x", 1));
        let head = make_hop_transcript(NumericalId(45), None, &RoutingDecision::Forward(e30), NumericalId(45), NumericalId(25), n);
        assert_eq!((head.from, head.to), (None, Some(NumericalId(30))));
        let tail = make_hop_transcript(NumericalId(20), Some(NumericalId(30)), &RoutingDecision::Terminate, NumericalId(45), NumericalId(25), n);
        assert_eq!((tail.from, tail.to), (Some(NumericalId(30)), None));
        let lone = make_hop_transcript(NumericalId(45), None, &RoutingDecision::Terminate, NumericalId(45), NumericalId(45), n);
        assert_eq!((lone.from, lone.to), (None, None));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn transcript_round_trip(
            r: u64, f: Option<u64>, to: Option<u64>, i: u64, q: u64, n: u128,
        ) {
            let tr = t(r, f, to, i, q, n);
            prop_assert_eq!(RoutingTranscript::decode(&tr.encode()).unwrap(), tr);
        }

        #[test]
        fn encoding_is_injective(a in any::<(u64, Option<u64>, Option<u64>, u64, u64, u128)>(),
                                 b in any::<(u64, Option<u64>, Option<u64>, u64, u64, u128)>()) {
            let (ta, tb) = (t(a.0, a.1, a.2, a.3, a.4, a.5), t(b.0, b.1, b.2, b.3, b.4, b.5));
            prop_assert_eq!(ta == tb, ta.encode() == tb.encode());
        }
    }
}
