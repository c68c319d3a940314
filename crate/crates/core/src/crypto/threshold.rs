//! 3-of-3 threshold signing over additive key shares.
//!
//! The dealer splits a secret `x` into `x0 + x1 + x2 = x (mod r)`. Each
//! holder signs with its share; because BLS signatures are linear in the
//! key, summing the three partial points yields the ordinary signature of
//! `x`. Any two shares are uniformly distributed and carry no information
//! about `x`, so fewer than three partials cannot produce a verifying
//! signature.

use blst::min_sig as bls;
use sha2::{Digest, Sha256};

use super::{CryptoError, Identity, Signature, SigningKey, DST_IDENTITY, SIGNATURE_LEN};
use crate::codec::{DecodeError, Reader, Writer};

pub const SHARE_COUNT: usize = 3;

/// One additive share of an identity's signing key.
#[derive(Clone)]
pub struct KeyShare {
    index: u8,
    identity: Identity,
    secret: bls::SecretKey,
}

impl KeyShare {
    pub fn index(&self) -> u8 {
        self.index
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn write(&self, w: &mut Writer) {
        w.u8(self.index);
        self.identity.write(w);
        w.raw(&self.secret.to_bytes());
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let index = r.u8()?;
        if index as usize >= SHARE_COUNT {
            return Err(DecodeError::Invalid("share index"));
        }
        let identity = Identity::read(r)?;
        let secret = bls::SecretKey::from_bytes(r.raw(32)?).map_err(|_| DecodeError::Invalid("share secret"))?;
        Ok(KeyShare { index, identity, secret })
    }
}

impl PartialEq for KeyShare {
    fn eq(&self, other: &Self) -> bool {
        self.index == other.index && self.identity == other.identity && self.secret.to_bytes() == other.secret.to_bytes()
    }
}

impl Eq for KeyShare {}

impl std::fmt::Debug for KeyShare {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "KeyShare({}, #{}, ..)", self.identity, self.index)
    }
}

/// A share holder's contribution over one message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialSignature {
    pub index: u8,
    pub identity: Identity,
    /// SHA-256 of the signed message; lets combination reject mixed messages early.
    pub msg_digest: [u8; 32],
    pub point: Signature,
}

impl PartialSignature {
    pub fn write(&self, w: &mut Writer) {
        w.u8(self.index);
        self.identity.write(w);
        w.raw(&self.msg_digest).raw(self.point.as_bytes());
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let index = r.u8()?;
        let identity = Identity::read(r)?;
        let msg_digest = r.array()?;
        let point = Signature(r.array::<SIGNATURE_LEN>()?);
        Ok(PartialSignature { index, identity, msg_digest, point })
    }
}

fn scalar(sk: &bls::SecretKey) -> blst::blst_scalar {
    let mut out = blst::blst_scalar::default();
    // SAFETY: both pointers reference live, correctly sized values.
    unsafe { blst::blst_scalar_from_bendian(&mut out, sk.to_bytes().as_ptr()) };
    out
}

fn secret_from_scalar(s: &blst::blst_scalar) -> Result<bls::SecretKey, CryptoError> {
    let mut bytes = [0u8; 32];
    // SAFETY: `bytes` has room for the 32-byte big-endian scalar.
    unsafe { blst::blst_bendian_from_scalar(bytes.as_mut_ptr(), s) };
    bls::SecretKey::from_bytes(&bytes).map_err(|e| CryptoError::Share(format!("degenerate share: {e:?}")))
}

/// Splits `key` into three additive shares with indices 0, 1 and 2.
///
/// Shares 0 and 1 are pseudo-random functions of the key; share 2 closes the sum.
pub fn split_3of3(key: &SigningKey) -> Result<[KeyShare; 3], CryptoError> {
    let secret = key.secret();
    let derive = |i: u8| {
        let ikm = Sha256::new()
            .chain_update(b"guard/share")
            .chain_update([i])
            .chain_update(secret.to_bytes())
            .finalize();
        bls::SecretKey::key_gen(&ikm, &key.identity().encode())
            .map_err(|e| CryptoError::Share(format!("share derivation: {e:?}")))
    };
    let s0 = derive(0)?;
    let s1 = derive(1)?;
    let (x, a, b) = (scalar(secret), scalar(&s0), scalar(&s1));
    let mut t = blst::blst_scalar::default();
    let mut s2 = blst::blst_scalar::default();
    // SAFETY: all scalars are initialized and distinct from the outputs.
    let ok = unsafe { blst::blst_sk_sub_n_check(&mut t, &x, &a) && blst::blst_sk_sub_n_check(&mut s2, &t, &b) };
    if !ok {
        return Err(CryptoError::Share("degenerate share".into()));
    }
    let s2 = secret_from_scalar(&s2)?;
    let identity = key.identity().clone();
    Ok([
        KeyShare { index: 0, identity: identity.clone(), secret: s0 },
        KeyShare { index: 1, identity: identity.clone(), secret: s1 },
        KeyShare { index: 2, identity, secret: s2 },
    ])
}

pub fn partial_sign(share: &KeyShare, msg: &[u8]) -> PartialSignature {
    let point = share.secret.sign(msg, DST_IDENTITY, &[]);
    PartialSignature {
        index: share.index,
        identity: share.identity.clone(),
        msg_digest: Sha256::digest(msg).into(),
        point: Signature(point.compress()),
    }
}

/// Sums exactly three partials with distinct indices over one message.
pub fn combine_partials(parts: &[PartialSignature]) -> Result<Signature, CryptoError> {
    if parts.len() != SHARE_COUNT {
        return Err(CryptoError::Share(format!("need {SHARE_COUNT} partials, got {}", parts.len())));
    }
    let mut seen = [false; SHARE_COUNT];
    for p in parts {
        let i = p.index as usize;
        if i >= SHARE_COUNT {
            return Err(CryptoError::Share(format!("share index {i} out of range")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(CryptoError::Share(format!("duplicate share index {i}")));
        }
    }
    let first = &parts[0];
    if parts.iter().any(|p| p.identity != first.identity) {
        return Err(CryptoError::Combine("partials for different identities".into()));
    }
    if parts.iter().any(|p| p.msg_digest != first.msg_digest) {
        return Err(CryptoError::Combine("partials over different messages".into()));
    }
    let points = parts
        .iter()
        .map(|p| bls::Signature::sig_validate(p.point.as_bytes(), false))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CryptoError::Combine(format!("invalid partial point: {e:?}")))?;
    let refs: Vec<&bls::Signature> = points.iter().collect();
    let agg = bls::AggregateSignature::aggregate(&refs, false)
        .map_err(|e| CryptoError::Combine(format!("aggregation: {e:?}")))?;
    Ok(Signature(agg.to_signature().compress()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{derive_identity_keypair, public_params, verify, MasterSecret};
    use crate::ids::NameId;

    fn setup() -> (SigningKey, crate::crypto::Certificate, crate::crypto::PublicParams) {
        let master = MasterSecret::new(&[9u8; 32]).unwrap();
        let id = Identity::name(&NameId::parse_bits("0110").unwrap());
        let (key, _, cert) = derive_identity_keypair(&master, &id).unwrap();
        (key, cert, public_params(&master, 4).unwrap())
    }

    #[test]
    fn full_combination_verifies() {
        let (key, cert, params) = setup();
        let shares = split_3of3(&key).unwrap();
        assert_eq!(shares.iter().map(|s| s.index()).collect::<Vec<_>>(), vec![0, 1, 2]);
        let msg = b"transcript";
        let parts: Vec<_> = shares.iter().map(|s| partial_sign(s, msg)).collect();
        let sig = combine_partials(&parts).unwrap();
        assert!(verify(key.identity(), &cert, &params, msg, &sig));
        // order of partials is irrelevant
        let rev: Vec<_> = parts.iter().rev().cloned().collect();
        assert_eq!(combine_partials(&rev).unwrap(), sig);
    }

    #[test]
    fn duplicate_index_is_share_error() {
        let (key, _, _) = setup();
        let shares = split_3of3(&key).unwrap();
        let parts = vec![
            partial_sign(&shares[0], b"m"),
            partial_sign(&shares[1], b"m"),
            partial_sign(&shares[1], b"m"),
        ];
        assert!(matches!(combine_partials(&parts), Err(CryptoError::Share(_))));
        assert!(matches!(combine_partials(&parts[..2]), Err(CryptoError::Share(_))));
    }

    #[test]
    fn mixed_messages_are_rejected() {
        let (key, _, _) = setup();
        let shares = split_3of3(&key).unwrap();
        let parts = vec![
            partial_sign(&shares[0], b"m"),
            partial_sign(&shares[1], b"m"),
            partial_sign(&shares[2], b"other"),
        ];
        assert!(matches!(combine_partials(&parts), Err(CryptoError::Combine(_))));
    }

    #[test]
    fn relabelled_partial_does_not_verify() {
        let (key, cert, params) = setup();
        let shares = split_3of3(&key).unwrap();
        let msg = b"m";
        let mut forged = partial_sign(&shares[1], msg);
        forged.index = 2;
        let parts = vec![partial_sign(&shares[0], msg), partial_sign(&shares[1], msg), forged];
        let sig = combine_partials(&parts).unwrap();
        assert!(!verify(key.identity(), &cert, &params, msg, &sig));
    }

    #[test]
    fn share_wire_roundtrip_keeps_signing_power() {
        let (key, cert, params) = setup();
        let shares = split_3of3(&key).unwrap();
        let decoded: Vec<KeyShare> = shares
            .iter()
            .map(|s| {
                let mut w = Writer::new();
                s.write(&mut w);
                let buf = w.finish();
                KeyShare::read(&mut Reader::new(&buf)).unwrap()
            })
            .collect();
        let parts: Vec<_> = decoded.iter().map(|s| partial_sign(s, b"x")).collect();
        assert!(verify(key.identity(), &cert, &params, b"x", &combine_partials(&parts).unwrap()));
    }
}
