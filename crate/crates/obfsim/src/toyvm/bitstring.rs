//! Fixed-length bitstrings: program inputs and predicate patterns.
//!
//! Bits are stored MSB-first in packed bytes; any pad bits past the logical
//! length are kept zero, so equality and hashing can derive from the raw
//! fields. Hex renderings are nibble-precise: a 10-bit string prints as
//! three hex characters.

use rand::RngCore;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BitStringError {
    #[error("hex string of {got} chars cannot hold {len} bits (want {want} chars)")]
    HexLength { got: usize, len: usize, want: usize },
    #[error("invalid hex: {0}")]
    BadHex(String),
    #[error("pad bits beyond the logical length must be zero")]
    DirtyPadding,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitString {
    len: usize,
    bytes: Vec<u8>,
}

impl BitString {
    pub fn zeros(len: usize) -> Self {
        BitString {
            len,
            bytes: vec![0u8; len.div_ceil(8)],
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut s = BitString::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                s.bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        s
    }

    pub fn random(len: usize, rng: &mut ChaCha20Rng) -> Self {
        let mut bytes = vec![0u8; len.div_ceil(8)];
        rng.fill_bytes(&mut bytes);
        mask_tail(&mut bytes, len);
        BitString { len, bytes }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.len);
        self.bytes[i / 8] & (0x80 >> (i % 8)) != 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// True when `self` begins with `prefix`.
    pub fn starts_with(&self, prefix: &BitString) -> bool {
        if prefix.len > self.len {
            return false;
        }
        let full = prefix.len / 8;
        if self.bytes[..full] != prefix.bytes[..full] {
            return false;
        }
        let rem = prefix.len % 8;
        if rem == 0 {
            return true;
        }
        let mask = 0xffu8 << (8 - rem);
        (self.bytes[full] ^ prefix.bytes[full]) & mask == 0
    }

    /// Zero-extend to `len` bits (used to turn predicate patterns into probe
    /// inputs).
    pub fn extend_to(&self, len: usize) -> BitString {
        assert!(len >= self.len);
        let mut bytes = self.bytes.clone();
        bytes.resize(len.div_ceil(8), 0);
        BitString { len, bytes }
    }

    /// Nibble-precise lowercase hex.
    pub fn to_hex(&self) -> String {
        let mut s = hex::encode(&self.bytes);
        s.truncate(self.len.div_ceil(4));
        s
    }

    pub fn from_hex(s: &str, len: usize) -> Result<Self, BitStringError> {
        let want = len.div_ceil(4);
        if s.len() != want {
            return Err(BitStringError::HexLength {
                got: s.len(),
                len,
                want,
            });
        }
        let mut padded = s.to_string();
        if padded.len() % 2 == 1 {
            padded.push('0');
        }
        let bytes = hex::decode(&padded).map_err(|e| BitStringError::BadHex(e.to_string()))?;
        let mut check = bytes.clone();
        mask_tail(&mut check, len);
        if check != bytes {
            return Err(BitStringError::DirtyPadding);
        }
        Ok(BitString { len, bytes })
    }
}

fn mask_tail(bytes: &mut [u8], len: usize) {
    let rem = len % 8;
    if rem != 0 {
        let last = len / 8;
        bytes[last] &= 0xffu8 << (8 - rem);
        for b in bytes.iter_mut().skip(last + 1) {
            *b = 0;
        }
    } else {
        for b in bytes.iter_mut().skip(len / 8) {
            *b = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::derive_rng;

    #[test]
    fn hex_round_trip_odd_lengths() {
        for len in [1usize, 4, 5, 8, 10, 16, 23] {
            let mut rng = derive_rng(11, "bits", len as u64);
            for _ in 0..50 {
                let b = BitString::random(len, &mut rng);
                let hexed = b.to_hex();
                assert_eq!(hexed.len(), len.div_ceil(4));
                assert_eq!(BitString::from_hex(&hexed, len).unwrap(), b);
            }
        }
    }

    #[test]
    fn from_hex_rejects_wrong_length_and_dirty_padding() {
        assert!(BitString::from_hex("ab", 16).is_err());
        assert!(BitString::from_hex("abcd", 16).is_ok());
        // 4-bit string "f" is fine, but 3-bit "f" has a dirty pad bit.
        assert!(BitString::from_hex("f", 4).is_ok());
        assert_eq!(
            BitString::from_hex("f", 3).unwrap_err(),
            BitStringError::DirtyPadding
        );
        assert!(BitString::from_hex("e", 3).is_ok());
    }

    #[test]
    fn prefix_matching() {
        let s = BitString::from_hex("a5", 8).unwrap(); // 1010 0101
        assert!(s.starts_with(&BitString::from_hex("a", 4).unwrap()));
        assert!(s.starts_with(&BitString::from_hex("80", 1).unwrap()));
        assert!(!s.starts_with(&BitString::from_hex("40", 2).unwrap()));
        assert!(s.starts_with(&s));
        assert!(!BitString::zeros(4).starts_with(&BitString::zeros(8)));
        // empty prefix matches everything
        assert!(s.starts_with(&BitString::zeros(0)));
    }

    #[test]
    fn extend_pads_with_zeros() {
        let p = BitString::from_hex("e", 3).unwrap();
        let q = p.extend_to(16);
        assert_eq!(q.len(), 16);
        assert!(q.starts_with(&p));
        assert_eq!(q.to_hex(), "e000");
    }

    #[test]
    fn equality_is_canonical() {
        let a = BitString::from_bits(&[true, false, true]);
        let b = BitString::from_hex("a", 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.bit(0), true);
        assert_eq!(a.bit(1), false);
        assert_eq!(a.bit(2), true);
    }
}
