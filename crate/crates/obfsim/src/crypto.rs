//! Primitive layer: hash, symmetric cipher, codecs, and seeded randomness.
//!
//! The hash is SHA-256 (FIPS 180-4, 32-byte digests). The cipher is ChaCha20
//! (RFC 8439) with a fresh random 12-byte nonce prefixed to every
//! ciphertext; keys of any configured length are mapped to the 32-byte
//! ChaCha20 key by hashing, so the short keys used in brute-force
//! experiments share a code path with full-size ones. The cipher
//! deliberately authenticates nothing: decrypting with a wrong key yields
//! garbage bytes, never an error, because every construct in this framework
//! verifies keys through an external digest comparison instead.

use chacha20::cipher::{KeyIvInit, StreamCipher};
use chacha20::ChaCha20;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

/// Smallest admissible symmetric key, in bytes.
pub const MIN_KEY_LEN: usize = 2;
/// Largest admissible symmetric key, in bytes.
pub const MAX_KEY_LEN: usize = 32;
/// Default symmetric key length (128-bit).
pub const DEFAULT_KEY_LEN: usize = 16;
/// Width of a hash digest.
pub const DIGEST_LEN: usize = 32;
/// Nonce prefix length on every ciphertext.
pub const NONCE_LEN: usize = 12;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("xor key must be nonempty")]
    EmptyKey,
    #[error("key length {0} outside [{MIN_KEY_LEN}, {MAX_KEY_LEN}]")]
    KeyLength(usize),
    #[error("keyspace of {0} bits outside [{MIN_KEYSPACE_BITS}, {MAX_KEYSPACE_BITS}]")]
    KeyspaceBits(u32),
    #[error("ciphertext of {0} bytes is shorter than the {NONCE_LEN}-byte nonce prefix")]
    CiphertextTooShort(usize),
    #[error("base64 decode: {0}")]
    Base64(String),
}

/// Narrowest keyspace for hash-then-decrypt sealing.
pub const MIN_KEYSPACE_BITS: u32 = 2;
/// Widest keyspace for hash-then-decrypt sealing.
pub const MAX_KEYSPACE_BITS: u32 = 256;

/// A symmetric cipher key, 2 to 32 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymKey(Vec<u8>);

impl SymKey {
    pub fn new(bytes: Vec<u8>) -> Result<Self, CryptoError> {
        if bytes.len() < MIN_KEY_LEN || bytes.len() > MAX_KEY_LEN {
            return Err(CryptoError::KeyLength(bytes.len()));
        }
        Ok(SymKey(bytes))
    }

    /// A full-width key taken verbatim from a digest.
    pub fn from_digest(digest: &HashDigest) -> Self {
        SymKey(digest.0.to_vec())
    }

    pub fn bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A 32-byte SHA-256 digest. Serialized as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HashDigest(pub [u8; DIGEST_LEN]);

impl HashDigest {
    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let bytes = hex::decode(s)?;
        let arr: [u8; DIGEST_LEN] = bytes
            .try_into()
            .map_err(|_| hex::FromHexError::InvalidStringLength)?;
        Ok(HashDigest(arr))
    }

    /// Number of leading zero bits, scanning from the first byte's MSB.
    pub fn leading_zero_bits(&self) -> u32 {
        let mut count = 0;
        for &b in &self.0 {
            if b == 0 {
                count += 8;
            } else {
                count += b.leading_zeros();
                break;
            }
        }
        count
    }
}

impl std::fmt::Debug for HashDigest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "HashDigest({})", self.to_hex())
    }
}

impl Serialize for HashDigest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for HashDigest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        HashDigest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// SHA-256 of `data`.
pub fn hash(data: &[u8]) -> HashDigest {
    let mut h = Sha256::new();
    h.update(data);
    HashDigest(h.finalize().into())
}

/// SHA-256 over several segments, length-prefixing each so distinct splits
/// of the same bytes cannot collide.
pub fn hash_parts(parts: &[&[u8]]) -> HashDigest {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    HashDigest(h.finalize().into())
}

fn chacha_key(key: &SymKey) -> [u8; 32] {
    hash(key.bytes()).0
}

/// Encrypt `plaintext` under `key`. Output is `nonce || keystream-xored body`.
pub fn enc(key: &SymKey, plaintext: &[u8], rng: &mut ChaCha20Rng) -> Vec<u8> {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let mut out = Vec::with_capacity(NONCE_LEN + plaintext.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(plaintext);
    let mut cipher = ChaCha20::new(&chacha_key(key).into(), &nonce.into());
    cipher.apply_keystream(&mut out[NONCE_LEN..]);
    out
}

/// Decrypt `ct` under `key`. Never authenticates: a wrong key produces
/// garbage bytes of the right length.
pub fn dec(key: &SymKey, ct: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ct.len() < NONCE_LEN {
        return Err(CryptoError::CiphertextTooShort(ct.len()));
    }
    let nonce: [u8; NONCE_LEN] = ct[..NONCE_LEN].try_into().unwrap();
    let mut body = ct[NONCE_LEN..].to_vec();
    let mut cipher = ChaCha20::new(&chacha_key(key).into(), &nonce.into());
    cipher.apply_keystream(&mut body);
    Ok(body)
}

/// Standard-alphabet Base64 with `=` padding.
pub fn base64_encode(data: &[u8]) -> String {
    use base64::Engine as _;
    base64::engine::general_purpose::STANDARD.encode(data)
}

pub fn base64_decode(s: &str) -> Result<Vec<u8>, CryptoError> {
    use base64::Engine as _;
    base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| CryptoError::Base64(e.to_string()))
}

/// Repeating-key XOR; involutive for every nonempty key.
pub fn xor_apply(key: &[u8], data: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if key.is_empty() {
        return Err(CryptoError::EmptyKey);
    }
    Ok(data
        .iter()
        .enumerate()
        .map(|(i, b)| b ^ key[i % key.len()])
        .collect())
}

/// Uniform random key of `len` bytes.
pub fn random_key(len: usize, rng: &mut ChaCha20Rng) -> Result<SymKey, CryptoError> {
    if !(MIN_KEY_LEN..=MAX_KEY_LEN).contains(&len) {
        return Err(CryptoError::KeyLength(len));
    }
    let mut bytes = vec![0u8; len];
    rng.fill_bytes(&mut bytes);
    SymKey::new(bytes)
}

/// Uniform random key from a keyspace of exactly `2^bits` values: the first
/// `bits` bits are random, the rest zero. The key is padded to at least
/// [`MIN_KEY_LEN`] bytes so narrow keyspaces still form valid cipher keys.
pub fn random_key_bits(bits: u32, rng: &mut ChaCha20Rng) -> Result<SymKey, CryptoError> {
    if !(MIN_KEYSPACE_BITS..=MAX_KEYSPACE_BITS).contains(&bits) {
        return Err(CryptoError::KeyspaceBits(bits));
    }
    let entropy_bytes = bits.div_ceil(8) as usize;
    let len = entropy_bytes.max(MIN_KEY_LEN);
    let mut bytes = vec![0u8; len];
    rng.fill_bytes(&mut bytes[..entropy_bytes]);
    let tail_bits = bits % 8;
    if tail_bits != 0 {
        // keep the high bits of the last entropy byte, zero the rest
        bytes[entropy_bytes - 1] &= 0xffu8 << (8 - tail_bits);
    }
    SymKey::new(bytes)
}

/// Derive an independent RNG from `(seed, domain, index)`.
///
/// Every randomized stage of the framework draws from RNGs derived this
/// way, which makes results order-independent and reproducible from a
/// single experiment seed.
pub fn derive_rng(seed: u64, domain: &str, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_key_material(seed, domain, index))
}

/// Derive a child seed for nested stages.
pub fn derive_seed(seed: u64, domain: &str, index: u64) -> u64 {
    let material = derive_key_material(seed, domain, index);
    u64::from_le_bytes(material[..8].try_into().unwrap())
}

fn derive_key_material(seed: u64, domain: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0x1f]);
    h.update(domain.as_bytes());
    h.update([0x1f]);
    h.update(index.to_le_bytes());
    h.finalize().into()
}
