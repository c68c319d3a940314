//! Node identifiers and network addresses.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Maximum supported name-ID width in bits.
pub const MAX_NAME_BITS: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdError {
    #[error("name id length {0} outside 1..=256")]
    Length(usize),
    #[error("name id lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid numerical id encoding {0:?}")]
    NumericalEncoding(String),
    #[error("invalid name id encoding {0:?}")]
    NameEncoding(String),
    #[error("invalid address {0:?}")]
    Address(String),
}

/// Totally ordered search key of a node.
///
/// Its canonical encoding everywhere is 16 lowercase, zero-padded hex characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NumericalId(pub u64);

impl NumericalId {
    pub fn new(value: u64) -> Self {
        NumericalId(value)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }

    /// Parses the canonical 16-character lowercase hex form.
    pub fn from_hex(s: &str) -> Result<Self, IdError> {
        let valid = s.len() == 16 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        if !valid {
            return Err(IdError::NumericalEncoding(s.to_string()));
        }
        u64::from_str_radix(s, 16)
            .map(NumericalId)
            .map_err(|_| IdError::NumericalEncoding(s.to_string()))
    }
}

impl fmt::Display for NumericalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl From<u64> for NumericalId {
    fn from(v: u64) -> Self {
        NumericalId(v)
    }
}

/// An m-bit string, most significant bit first. Doubles as the skip-graph
/// membership vector of its owner.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct NameId {
    bits: [u8; 32],
    len: u16,
}

impl NameId {
    /// Takes the first `len` bits of `bytes`.
    pub fn from_prefix(bytes: &[u8], len: usize) -> Result<Self, IdError> {
        if len == 0 || len > MAX_NAME_BITS || len > bytes.len() * 8 {
            return Err(IdError::Length(len));
        }
        let mut bits = [0u8; 32];
        let full = len / 8;
        bits[..full].copy_from_slice(&bytes[..full]);
        let rem = len % 8;
        if rem != 0 {
            bits[full] = bytes[full] & (0xffu8 << (8 - rem));
        }
        Ok(NameId { bits, len: len as u16 })
    }

    /// Builds an id of width `len` from the low `len` bits of `value`.
    pub fn from_u64(value: u64, len: usize) -> Result<Self, IdError> {
        if len == 0 || len > 64 {
            return Err(IdError::Length(len));
        }
        let mut out = NameId { bits: [0u8; 32], len: len as u16 };
        for i in 0..len {
            let bit = (value >> (len - 1 - i)) & 1 == 1;
            out.set_bit(i, bit);
        }
        Ok(out)
    }

    /// Parses a string of `'0'`/`'1'` characters.
    pub fn parse_bits(s: &str) -> Result<Self, IdError> {
        if s.is_empty() || s.len() > MAX_NAME_BITS {
            return Err(IdError::NameEncoding(s.to_string()));
        }
        let mut out = NameId { bits: [0u8; 32], len: s.len() as u16 };
        for (i, c) in s.bytes().enumerate() {
            match c {
                b'0' => {}
                b'1' => out.set_bit(i, true),
                _ => return Err(IdError::NameEncoding(s.to_string())),
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.len(), "bit index {i} out of range");
        self.bits[i / 8] & (0x80 >> (i % 8)) != 0
    }

    fn set_bit(&mut self, i: usize, value: bool) {
        let mask = 0x80u8 >> (i % 8);
        if value {
            self.bits[i / 8] |= mask;
        } else {
            self.bits[i / 8] &= !mask;
        }
    }

    /// Packed bytes, `ceil(len / 8)` of them, trailing bits zero.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bits[..self.len().div_ceil(8)]
    }

    /// Reads `count` (≤ 128) bits starting at `start` as a big-endian integer.
    pub fn bits_range(&self, start: usize, count: usize) -> u128 {
        assert!(count <= 128 && start + count <= self.len());
        (start..start + count).fold(0u128, |acc, i| (acc << 1) | self.bit(i) as u128)
    }

    /// Concatenates two big-endian bit fields into a name id of width
    /// `hi_len + lo_len`.
    pub fn from_halves(hi: u128, hi_len: usize, lo: u128, lo_len: usize) -> Result<Self, IdError> {
        let len = hi_len + lo_len;
        if len == 0 || len > MAX_NAME_BITS || hi_len > 128 || lo_len > 128 {
            return Err(IdError::Length(len));
        }
        let mut out = NameId { bits: [0u8; 32], len: len as u16 };
        for i in 0..hi_len {
            out.set_bit(i, (hi >> (hi_len - 1 - i)) & 1 == 1);
        }
        for i in 0..lo_len {
            out.set_bit(hi_len + i, (lo >> (lo_len - 1 - i)) & 1 == 1);
        }
        Ok(out)
    }

    /// Interprets the bits as an unsigned integer. Only defined for `len ≤ 64`.
    pub fn to_u64(&self) -> Option<u64> {
        (self.len() <= 64).then(|| self.bits_range(0, self.len()) as u64)
    }

    pub fn to_bit_string(&self) -> String {
        (0..self.len()).map(|i| if self.bit(i) { '1' } else { '0' }).collect()
    }
}

impl fmt::Debug for NameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NameId({})", self.to_bit_string())
    }
}

impl fmt::Display for NameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bit_string())
    }
}

/// Length of the longest common prefix of two equal-width name ids.
pub fn common_prefix_len(a: &NameId, b: &NameId) -> Result<usize, IdError> {
    if a.len() != b.len() {
        return Err(IdError::LengthMismatch(a.len(), b.len()));
    }
    let mut n = 0;
    for (x, y) in a.as_bytes().iter().zip(b.as_bytes()) {
        let diff = x ^ y;
        if diff == 0 {
            n += 8;
        } else {
            n += diff.leading_zeros() as usize;
            break;
        }
    }
    Ok(n.min(a.len()))
}

/// Endpoint address of a node: host plus port.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address {
    pub host: String,
    pub port: u16,
}

impl Address {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Address { host: host.into(), port }
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

impl FromStr for Address {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (host, port) = s.rsplit_once(':').ok_or_else(|| IdError::Address(s.to_string()))?;
        if host.is_empty() {
            return Err(IdError::Address(s.to_string()));
        }
        let port = port.parse().map_err(|_| IdError::Address(s.to_string()))?;
        Ok(Address::new(host, port))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn name(s: &str) -> NameId {
        NameId::parse_bits(s).unwrap()
    }

    #[test]
    fn prefix_lengths() {
        assert_eq!(common_prefix_len(&name("0110"), &name("0100")).unwrap(), 2);
        assert_eq!(common_prefix_len(&name("0110"), &name("0110")).unwrap(), 4);
        assert_eq!(common_prefix_len(&name("1000"), &name("0000")).unwrap(), 0);
        assert!(matches!(
            common_prefix_len(&name("10"), &name("100")),
            Err(IdError::LengthMismatch(2, 3))
        ));
    }

    #[test]
    fn prefix_len_across_byte_boundary() {
        let a = name("1111111100");
        let b = name("1111111101");
        assert_eq!(common_prefix_len(&a, &b).unwrap(), 9);
    }

    #[test]
    fn numerical_hex_roundtrip() {
        let id = NumericalId(0x2d);
        assert_eq!(id.to_hex(), "000000000000002d");
        assert_eq!(NumericalId::from_hex("000000000000002d").unwrap(), id);
        assert!(NumericalId::from_hex("2d").is_err());
        assert!(NumericalId::from_hex("000000000000002D").is_err());
    }

    #[test]
    fn halves_roundtrip() {
        let n = name("1011001");
        let hi = n.bits_range(0, 3);
        let lo = n.bits_range(3, 4);
        assert_eq!(NameId::from_halves(hi, 3, lo, 4).unwrap(), n);
        assert_eq!(NameId::from_u64(0b1011001, 7).unwrap(), n);
        assert_eq!(n.to_u64(), Some(0b1011001));
    }

    #[test]
    fn address_parse() {
        let a: Address = "node-001:7001".parse().unwrap();
        assert_eq!(a, Address::new("node-001", 7001));
        assert!("nohost".parse::<Address>().is_err());
        assert!(":12".parse::<Address>().is_err());
    }
}
