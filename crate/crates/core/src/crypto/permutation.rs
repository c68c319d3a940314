//! Keyed permutation over the m-bit name-id space.
//!
//! An alternating Feistel network: the state is split into a high part of
//! `m/2` bits and a low part of `m - m/2` bits, and each round replaces
//! `(a, b)` by `(b, a ^ F_k(round, b))`, where `F` is HMAC-SHA256 truncated
//! to the width of `a`. Every round is invertible, so the whole network is a
//! bijection for any key and any width, including odd ones.

use std::fmt;

use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::Sha256;

use super::CryptoError;
use crate::ids::{NameId, MAX_NAME_BITS};

/// Even, so the half widths return to their starting layout.
pub const FEISTEL_ROUNDS: u8 = 10;

/// Secret key of the guard-selection permutation, bound to one domain width.
#[derive(Clone, PartialEq, Eq)]
pub struct PermutationKey {
    key: [u8; 32],
    m: usize,
}

impl PermutationKey {
    pub fn new(key: [u8; 32], m: usize) -> Result<Self, CryptoError> {
        if !(1..=MAX_NAME_BITS).contains(&m) {
            return Err(CryptoError::Param(format!("m={m} out of range 1..=256")));
        }
        Ok(PermutationKey { key, m })
    }

    pub fn random<R: RngCore + ?Sized>(rng: &mut R, m: usize) -> Result<Self, CryptoError> {
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        Self::new(key, m)
    }

    pub fn width(&self) -> usize {
        self.m
    }

    fn round(&self, round: u8, input: u128, in_len: usize, out_len: usize) -> u128 {
        let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&self.key).expect("hmac takes any key length");
        mac.update(&[round, in_len as u8, out_len as u8]);
        mac.update(&input.to_be_bytes());
        let out = mac.finalize().into_bytes();
        let word = u128::from_be_bytes(out[..16].try_into().unwrap());
        word & mask(out_len)
    }

    fn check(&self, name: &NameId) -> Result<(), CryptoError> {
        if name.len() != self.m {
            return Err(CryptoError::Param(format!(
                "name id has {} bits, permutation domain is {}",
                name.len(),
                self.m
            )));
        }
        Ok(())
    }
}

impl fmt::Debug for PermutationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PermutationKey(m={}, ..)", self.m)
    }
}

fn mask(len: usize) -> u128 {
    if len >= 128 {
        u128::MAX
    } else {
        (1u128 << len) - 1
    }
}

fn split(name: &NameId) -> (u128, usize, u128, usize) {
    let m = name.len();
    let hi = m / 2;
    let lo = m - hi;
    (name.bits_range(0, hi), hi, name.bits_range(hi, lo), lo)
}

pub fn keyed_permutation(key: &PermutationKey, name: &NameId) -> Result<NameId, CryptoError> {
    key.check(name)?;
    let (mut a, mut la, mut b, mut lb) = split(name);
    for r in 0..FEISTEL_ROUNDS {
        let c = a ^ key.round(r, b, lb, la);
        (a, la, b, lb) = (b, lb, c, la);
    }
    NameId::from_halves(a, la, b, lb).map_err(|e| CryptoError::Param(e.to_string()))
}

pub fn keyed_permutation_inverse(key: &PermutationKey, name: &NameId) -> Result<NameId, CryptoError> {
    key.check(name)?;
    let (mut a, mut la, mut b, mut lb) = split(name);
    for r in (0..FEISTEL_ROUNDS).rev() {
        // (a, b) = (prev_b, prev_a ^ F(prev_b))
        let prev_a = b ^ key.round(r, a, la, lb);
        (a, la, b, lb) = (prev_a, lb, a, la);
    }
    NameId::from_halves(a, la, b, lb).map_err(|e| CryptoError::Param(e.to_string()))
}
