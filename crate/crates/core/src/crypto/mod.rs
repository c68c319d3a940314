//! Identity-keyed signatures rooted at the trusted third party.
//!
//! Every identity (a numerical id or a name id) gets a BLS12-381 key pair
//! derived deterministically from the TTP master secret, plus a certificate
//! in which the TTP root key binds the identity to its public key. A verifier
//! that holds only the [`PublicParams`] can therefore check a signature
//! against an identity: the certificate must be TTP-issued for exactly that
//! identity and the signature must verify under the certified key.
//!
//! Signatures live in G1 (48 bytes) and keys in G2 (96 bytes), which makes
//! signatures additively homomorphic in the secret key; [`threshold`] relies
//! on that for non-interactive 3-of-3 combination.

use std::fmt;

use blst::min_sig as bls;
use blst::BLST_ERROR;
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::ids::{NameId, NumericalId, MAX_NAME_BITS};

pub mod permutation;
pub mod threshold;

pub use permutation::{keyed_permutation, keyed_permutation_inverse, PermutationKey};
pub use threshold::{combine_partials, partial_sign, split_3of3, KeyShare, PartialSignature};

pub const SIGNATURE_LEN: usize = 48;
pub const PUBLIC_KEY_LEN: usize = 96;
pub const NONCE_LEN: usize = 16;
pub const HASH_ALGORITHM: &str = "sha256";

const DST_IDENTITY: &[u8] = b"GUARD-IDENTITY-V1_BLS_SIG_BLS12381G1_XMD:SHA-256_SSWU_RO_NUL_";
const DST_CERT: &[u8] = b"GUARD-CERT-V1_BLS_SIG_BLS12381G1_XMD:SHA-256_SSWU_RO_NUL_";
const ROOT_INFO: &[u8] = b"guard/ttp-root";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed identity encoding: {0}")]
    Encoding(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("share error: {0}")]
    Share(String),
    #[error("combine error: {0}")]
    Combine(String),
    #[error("invalid key material: {0}")]
    Key(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// The TTP's key-issuing secret. Every identity key derives from it.
#[derive(Clone)]
pub struct MasterSecret(Vec<u8>);

impl MasterSecret {
    pub fn new(seed: &[u8]) -> Result<Self, CryptoError> {
        if seed.len() < 32 {
            return Err(CryptoError::Param(format!(
                "master secret needs at least 32 bytes, got {}",
                seed.len()
            )));
        }
        Ok(MasterSecret(seed.to_vec()))
    }

    fn root_key(&self) -> bls::SecretKey {
        bls::SecretKey::key_gen(&self.0, ROOT_INFO).expect("seed length checked at construction")
    }
}

impl fmt::Debug for MasterSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MasterSecret(..)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IdentityKind {
    NumericalId = 1,
    NameId = 2,
}

/// A publicly known identity usable as a verification handle.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Identity {
    kind: IdentityKind,
    value: Vec<u8>,
}

impl Identity {
    pub fn numerical(id: NumericalId) -> Self {
        Identity { kind: IdentityKind::NumericalId, value: id.to_hex().into_bytes() }
    }

    pub fn name(name: &NameId) -> Self {
        Identity { kind: IdentityKind::NameId, value: name.to_bit_string().into_bytes() }
    }

    /// Builds an identity without checking the value; see [`Identity::validate`].
    pub fn from_parts(kind: IdentityKind, value: Vec<u8>) -> Self {
        Identity { kind, value }
    }

    pub fn kind(&self) -> IdentityKind {
        self.kind
    }

    pub fn value(&self) -> &[u8] {
        &self.value
    }

    pub fn validate(&self) -> Result<(), CryptoError> {
        let ok = match self.kind {
            IdentityKind::NumericalId => {
                self.value.len() == 16
                    && self.value.iter().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
            }
            IdentityKind::NameId => {
                (1..=MAX_NAME_BITS).contains(&self.value.len())
                    && self.value.iter().all(|b| matches!(b, b'0' | b'1'))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(CryptoError::Encoding(self.to_string()))
        }
    }

    /// Canonical encoding: kind tag byte followed by the ASCII value.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + self.value.len());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.value);
        out
    }

    pub fn write(&self, w: &mut Writer) {
        w.u8(self.kind as u8).bytes(&self.value);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let kind = match r.u8()? {
            1 => IdentityKind::NumericalId,
            2 => IdentityKind::NameId,
            _ => return Err(DecodeError::Invalid("identity kind")),
        };
        let value = r.bytes()?.to_vec();
        let id = Identity { kind, value };
        id.validate().map_err(|_| DecodeError::Invalid("identity value"))?;
        Ok(id)
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            IdentityKind::NumericalId => "num",
            IdentityKind::NameId => "name",
        };
        write!(f, "{tag}:{}", String::from_utf8_lossy(&self.value))
    }
}

/// Secret half of an identity key pair.
#[derive(Clone)]
pub struct SigningKey {
    identity: Identity,
    secret: bls::SecretKey,
}

impl SigningKey {
    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey::from_point(self.secret.sk_to_pk())
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }

    pub fn from_bytes(identity: Identity, bytes: &[u8]) -> Result<Self, CryptoError> {
        let secret = bls::SecretKey::from_bytes(bytes)
            .map_err(|e| CryptoError::Key(format!("secret key: {e:?}")))?;
        Ok(SigningKey { identity, secret })
    }

    pub(crate) fn secret(&self) -> &bls::SecretKey {
        &self.secret
    }
}

impl PartialEq for SigningKey {
    fn eq(&self, other: &Self) -> bool {
        self.identity == other.identity && self.to_bytes() == other.to_bytes()
    }
}

impl Eq for SigningKey {}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SigningKey({}, ..)", self.identity)
    }
}

/// Compressed G2 verification key.
#[derive(Clone)]
pub struct PublicKey {
    bytes: [u8; PUBLIC_KEY_LEN],
    point: bls::PublicKey,
}

impl PublicKey {
    fn from_point(point: bls::PublicKey) -> Self {
        PublicKey { bytes: point.compress(), point }
    }

    /// Decodes and subgroup-checks a compressed key.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let point = bls::PublicKey::key_validate(bytes)
            .map_err(|e| CryptoError::Key(format!("public key: {e:?}")))?;
        Ok(PublicKey::from_point(point))
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.bytes
    }
}

impl PartialEq for PublicKey {
    fn eq(&self, other: &Self) -> bool {
        self.bytes == other.bytes
    }
}

impl Eq for PublicKey {}

impl std::hash::Hash for PublicKey {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.bytes.hash(state)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}..)", hex::encode(&self.bytes[..6]))
    }
}

/// Compressed G1 signature bytes. Validity is only checked at verification.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; SIGNATURE_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::Key(format!("signature length {}", bytes.len())))?;
        Ok(Signature(arr))
    }

    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }

    fn point(&self) -> Option<bls::Signature> {
        bls::Signature::sig_validate(&self.0, true).ok()
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..6]))
    }
}

/// TTP statement binding an identity to a public key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Certificate {
    pub identity: Identity,
    pub public_key: PublicKey,
    pub issuer_sig: Signature,
}

impl Certificate {
    fn statement(identity: &Identity, pk: &PublicKey) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(b"guard-cert-v1").bytes(&identity.encode()).raw(pk.as_bytes());
        w.finish()
    }

    /// Checks the TTP signature only, not any particular use of the key.
    pub fn is_issued_by(&self, params: &PublicParams) -> bool {
        let msg = Self::statement(&self.identity, &self.public_key);
        verify_point(&params.ttp_key, &msg, &self.issuer_sig, DST_CERT)
    }

    pub fn write(&self, w: &mut Writer) {
        self.identity.write(w);
        w.raw(self.public_key.as_bytes()).raw(self.issuer_sig.as_bytes());
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let identity = Identity::read(r)?;
        let public_key = PublicKey::from_bytes(r.raw(PUBLIC_KEY_LEN)?)
            .map_err(|_| DecodeError::Invalid("certificate public key"))?;
        let issuer_sig = Signature(r.array()?);
        Ok(Certificate { identity, public_key, issuer_sig })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    /// Stable digest over the full encoding; keys verification caches.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

/// Everything a verifier needs from the TTP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicParams {
    pub hash_algorithm: String,
    pub m: usize,
    pub ttp_key: PublicKey,
}

const PARAMS_HEADER: &str = "guard-public-params v1";

impl PublicParams {
    /// Self-describing text record, one `key=value` per line.
    pub fn to_text(&self) -> String {
        format!(
            "{PARAMS_HEADER}\nhash={}\nm={}\nttp_key={}\n",
            self.hash_algorithm,
            self.m,
            hex::encode(self.ttp_key.as_bytes())
        )
    }

    pub fn from_text(text: &str) -> Result<Self, CryptoError> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some(PARAMS_HEADER) {
            return Err(CryptoError::Param("missing params header".into()));
        }
        let (mut hash, mut m, mut key) = (None, None, None);
        for line in lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CryptoError::Param(format!("bad params line {line:?}")))?;
            match k {
                "hash" => hash = Some(v.to_string()),
                "m" => m = Some(v.parse::<usize>().map_err(|_| CryptoError::Param("m".into()))?),
                "ttp_key" => {
                    let bytes = hex::decode(v).map_err(|_| CryptoError::Param("ttp_key hex".into()))?;
                    key = Some(PublicKey::from_bytes(&bytes)?);
                }
                other => return Err(CryptoError::Param(format!("unknown params key {other:?}"))),
            }
        }
        let params = PublicParams {
            hash_algorithm: hash.ok_or_else(|| CryptoError::Param("hash missing".into()))?,
            m: m.ok_or_else(|| CryptoError::Param("m missing".into()))?,
            ttp_key: key.ok_or_else(|| CryptoError::Param("ttp_key missing".into()))?,
        };
        if params.hash_algorithm != HASH_ALGORITHM {
            return Err(CryptoError::Param(format!("unsupported hash {}", params.hash_algorithm)));
        }
        if !(1..=MAX_NAME_BITS).contains(&params.m) {
            return Err(CryptoError::Param(format!("m={} out of range", params.m)));
        }
        Ok(params)
    }

    pub fn write(&self, w: &mut Writer) {
        w.str(&self.hash_algorithm).u16(self.m as u16).raw(self.ttp_key.as_bytes());
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let hash_algorithm = r.str()?.to_string();
        let m = r.u16()? as usize;
        let ttp_key = PublicKey::from_bytes(r.raw(PUBLIC_KEY_LEN)?)
            .map_err(|_| DecodeError::Invalid("ttp key"))?;
        Ok(PublicParams { hash_algorithm, m, ttp_key })
    }
}

/// Public parameters for a TTP holding `master`, over `m`-bit name ids.
pub fn public_params(master: &MasterSecret, m: usize) -> Result<PublicParams, CryptoError> {
    if !(1..=MAX_NAME_BITS).contains(&m) {
        return Err(CryptoError::Param(format!("m={m} out of range 1..=256")));
    }
    Ok(PublicParams {
        hash_algorithm: HASH_ALGORITHM.to_string(),
        m,
        ttp_key: PublicKey::from_point(master.root_key().sk_to_pk()),
    })
}

/// Deterministically derives the key pair and TTP certificate for `id`.
pub fn derive_identity_keypair(
    master: &MasterSecret,
    id: &Identity,
) -> Result<(SigningKey, PublicKey, Certificate), CryptoError> {
    id.validate()?;
    let mut info = b"guard/identity/".to_vec();
    info.extend_from_slice(&id.encode());
    let secret = bls::SecretKey::key_gen(&master.0, &info)
        .map_err(|e| CryptoError::Key(format!("key_gen: {e:?}")))?;
    let key = SigningKey { identity: id.clone(), secret };
    let pk = key.public_key();
    let cert = issue_certificate(master, id, &pk);
    Ok((key, pk, cert))
}

pub(crate) fn issue_certificate(master: &MasterSecret, id: &Identity, pk: &PublicKey) -> Certificate {
    let msg = Certificate::statement(id, pk);
    let sig = master.root_key().sign(&msg, DST_CERT, &[]);
    Certificate { identity: id.clone(), public_key: pk.clone(), issuer_sig: Signature(sig.compress()) }
}

pub fn sign(key: &SigningKey, msg: &[u8]) -> Signature {
    Signature(key.secret.sign(msg, DST_IDENTITY, &[]).compress())
}

/// Verifies `sig` over `msg` for identity `id`. Never errors; any failure is `false`.
pub fn verify(id: &Identity, cert: &Certificate, params: &PublicParams, msg: &[u8], sig: &Signature) -> bool {
    cert.identity == *id && cert.is_issued_by(params) && verify_with_key(&cert.public_key, msg, sig)
}

/// Signature check against an already trusted key.
pub fn verify_with_key(pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    verify_point(pk, msg, sig, DST_IDENTITY)
}

fn verify_point(pk: &PublicKey, msg: &[u8], sig: &Signature, dst: &[u8]) -> bool {
    match sig.point() {
        Some(point) => point.verify(false, msg, dst, &[], &pk.point, false) == BLST_ERROR::BLST_SUCCESS,
        None => false,
    }
}

/// One item of a batch verification.
pub struct BatchItem<'a> {
    pub key: &'a PublicKey,
    pub msg: &'a [u8],
    pub sig: &'a Signature,
}

/// Verifies many identity signatures with a single random-linear-combination
/// pairing check. `true` only if every signature is valid (except with
/// negligible probability). The combination scalars are derived from a hash
/// of the whole batch so results are reproducible.
pub fn verify_batch(items: &[BatchItem<'_>]) -> bool {
    if items.is_empty() {
        return true;
    }
    let mut points = Vec::with_capacity(items.len());
    for item in items {
        match item.sig.point() {
            Some(p) => points.push(p),
            None => return false,
        }
    }
    let mut seed = Sha256::new();
    seed.update(b"guard/batch");
    for item in items {
        seed.update(item.key.as_bytes());
        seed.update((item.msg.len() as u64).to_be_bytes());
        seed.update(item.msg);
        seed.update(item.sig.as_bytes());
    }
    let seed = seed.finalize();
    let rands: Vec<blst::blst_scalar> = (0..items.len() as u64)
        .map(|i| {
            let digest = Sha256::new().chain_update(seed).chain_update(i.to_be_bytes()).finalize();
            let mut b = [0u8; 32];
            b[..8].copy_from_slice(&digest[..8]);
            b[0] |= 1;
            blst::blst_scalar { b }
        })
        .collect();
    let msgs: Vec<&[u8]> = items.iter().map(|i| i.msg).collect();
    let pks: Vec<&bls::PublicKey> = items.iter().map(|i| &i.key.point).collect();
    let sigs: Vec<&bls::Signature> = points.iter().collect();
    bls::Signature::verify_multiple_aggregate_signatures(
        &msgs,
        DST_IDENTITY,
        &pks,
        false,
        &sigs,
        false,
        &rands,
        64,
    ) == BLST_ERROR::BLST_SUCCESS
}

/// First `m` bits of SHA-256 over the canonical numerical-id encoding.
pub fn hash_name_id(num: NumericalId, m: usize) -> Result<NameId, CryptoError> {
    if !(1..=MAX_NAME_BITS).contains(&m) {
        return Err(CryptoError::Param(format!("m={m} out of range 1..=256")));
    }
    let digest = Sha256::digest(num.to_hex().as_bytes());
    NameId::from_prefix(&digest, m).map_err(|e| CryptoError::Param(e.to_string()))
}

/// Per-query random value guarding against replayed proof chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl Nonce {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Parses exactly 32 lowercase hex characters.
    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 2 * NONCE_LEN || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return None;
        }
        let bytes = hex::decode(s).ok()?;
        Some(Nonce(bytes.try_into().ok()?))
    }
}

impl fmt::Display for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn random_nonce<R: RngCore + ?Sized>(rng: &mut R) -> Nonce {
    let mut bytes = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut bytes);
    Nonce(bytes)
}
