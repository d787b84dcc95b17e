//! Obfuscated blocks: the container formats and their runtime semantics.
//!
//! A container seals a serialized instruction block of the toy language.
//! Field presence by kind:
//!
//! | kind            | ct  | embedded_key | digest       | keyfinder | keyspace_bits | schedule |
//! |-----------------|-----|--------------|--------------|-----------|---------------|----------|
//! | BASE64          | yes | -            | -            | -         | -             | -        |
//! | XOR1            | yes | yes (1 byte) | -            | -         | -             | -        |
//! | CIPHER_EMBEDDED | yes | yes          | -            | -         | -             | -        |
//! | HTD_RANDOM      | yes | -            | H_OF_KEY     | -         | yes           | -        |
//! | HTD_ENV_EBOWLA  | yes | -            | H_OF_BLOCK   | yes       | -             | -        |
//! | HTD_ENV_FIXED   | yes | -            | H_OF_KEY     | yes       | -             | -        |
//! | DENIABLE_XOR    | yes | yes (K2)     | -            | -         | -             | yes (K1) |
//! | DENIABLE_DUAL   | two per-branch ct/digest/keyfinder pairs                | -   | -        |
//!
//! Every container additionally records `seals_mal`, the ground-truth
//! maliciousness of its plaintext, written by the sealing obfuscator. It is
//! bookkeeping for labels and scoring; detectors must never read it.
//!
//! The sealed-block byte format puts an `EMIT` payload last in its record
//! (tag, 2-byte length, text), so for a single-EMIT block the Base64 of the
//! whole record ends with the Base64 of the payload itself.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{
    self, base64_decode, base64_encode, dec, hash, xor_apply, HashDigest, SymKey,
};
use crate::environment::{enumerate_candidates, KeyFinderSpec, Trial};
use crate::toyvm::{
    BitString, ExecError, ExecState, InputPredicate, Instruction, PredicateKind, MAL_PREFIX,
};

/// Base64-encoded byte fields.
mod b64bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::base64_encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        super::base64_decode(&s).map_err(serde::de::Error::custom)
    }
}

/// Verification digest carried by hash-then-decrypt containers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum DigestSpec {
    /// Digest of the (derived) key; checked before decrypting.
    #[serde(rename = "H_OF_KEY")]
    HOfKey { hash: HashDigest },
    /// Digest of the plaintext block minus its last `offset` bytes; checked
    /// after each candidate decryption.
    #[serde(rename = "H_OF_BLOCK")]
    HOfBlock { hash: HashDigest, offset: usize },
}

/// Release schedule for the second deniable key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySchedule {
    #[serde(with = "b64bytes")]
    pub k1: Vec<u8>,
    /// Simulation-clock step from which `k1` is obtainable.
    pub available_from: u64,
}

/// One branch of a dual deniable container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualBranch {
    #[serde(with = "b64bytes")]
    pub ct: Vec<u8>,
    pub digest: DigestSpec,
    pub keyfinder: KeyFinderSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Container {
    /// Plain Base64 of the serialized block. An encoding, not encryption.
    #[serde(rename = "BASE64")]
    Base64 { ct: String, seals_mal: bool },
    /// Single-byte repeating XOR; the key ships in the container.
    #[serde(rename = "XOR1")]
    Xor1 {
        #[serde(with = "b64bytes")]
        ct: Vec<u8>,
        #[serde(with = "b64bytes")]
        embedded_key: Vec<u8>,
        seals_mal: bool,
    },
    /// Proper cipher, but the key still ships in the container — the
    /// defining weakness of packer-style obfuscation.
    #[serde(rename = "CIPHER_EMBEDDED")]
    CipherEmbedded {
        #[serde(with = "b64bytes")]
        ct: Vec<u8>,
        #[serde(with = "b64bytes")]
        embedded_key: Vec<u8>,
        seals_mal: bool,
    },
    /// Hash-then-decrypt under a random key that is *not* stored; the
    /// runtime samples candidates from a `2^keyspace_bits` space and only a
    /// hash match unlocks decryption.
    #[serde(rename = "HTD_RANDOM")]
    HtdRandom {
        #[serde(with = "b64bytes")]
        ct: Vec<u8>,
        digest: DigestSpec,
        keyspace_bits: u32,
        seals_mal: bool,
    },
    /// Environmental keying that stores the digest of the plaintext block
    /// (optionally truncated by an offset) and verifies after decrypting.
    #[serde(rename = "HTD_ENV_EBOWLA")]
    HtdEnvEbowla {
        #[serde(with = "b64bytes")]
        ct: Vec<u8>,
        digest: DigestSpec,
        keyfinder: KeyFinderSpec,
        seals_mal: bool,
    },
    /// Environmental keying that stores the double hash of the key and
    /// verifies candidates before decrypting.
    #[serde(rename = "HTD_ENV_FIXED")]
    HtdEnvFixed {
        #[serde(with = "b64bytes")]
        ct: Vec<u8>,
        digest: DigestSpec,
        keyfinder: KeyFinderSpec,
        seals_mal: bool,
    },
    /// One ciphertext, two one-time-pad keys: the embedded key opens the
    /// cover block, the scheduled key opens the hidden block.
    #[serde(rename = "DENIABLE_XOR")]
    DeniableXor {
        #[serde(with = "b64bytes")]
        ct: Vec<u8>,
        #[serde(with = "b64bytes")]
        embedded_key: Vec<u8>,
        schedule: KeySchedule,
        seals_mal: bool,
    },
    /// Two independently keyed ciphertexts; candidates are checked against
    /// the malicious digest first, then the benign one.
    #[serde(rename = "DENIABLE_DUAL")]
    DeniableDual {
        mal_branch: DualBranch,
        benign_branch: DualBranch,
        seals_mal: bool,
    },
}

impl Container {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Container::Base64 { .. } => "BASE64",
            Container::Xor1 { .. } => "XOR1",
            Container::CipherEmbedded { .. } => "CIPHER_EMBEDDED",
            Container::HtdRandom { .. } => "HTD_RANDOM",
            Container::HtdEnvEbowla { .. } => "HTD_ENV_EBOWLA",
            Container::HtdEnvFixed { .. } => "HTD_ENV_FIXED",
            Container::DeniableXor { .. } => "DENIABLE_XOR",
            Container::DeniableDual { .. } => "DENIABLE_DUAL",
        }
    }

    /// Ground-truth flag recorded at sealing time.
    pub fn seals_malicious(&self) -> bool {
        match self {
            Container::Base64 { seals_mal, .. }
            | Container::Xor1 { seals_mal, .. }
            | Container::CipherEmbedded { seals_mal, .. }
            | Container::HtdRandom { seals_mal, .. }
            | Container::HtdEnvEbowla { seals_mal, .. }
            | Container::HtdEnvFixed { seals_mal, .. }
            | Container::DeniableXor { seals_mal, .. }
            | Container::DeniableDual { seals_mal, .. } => *seals_mal,
        }
    }

    /// True for every kind that applies a cipher — everything except plain
    /// Base64 encoding.
    pub fn is_cipher_kind(&self) -> bool {
        !matches!(self, Container::Base64 { .. })
    }

    /// Execute the container against the current run state.
    pub fn execute(&self, state: &mut ExecState<'_>) -> Result<(), ExecError> {
        match self {
            Container::Base64 { ct, .. } => {
                if !state.charge(1) {
                    return Ok(());
                }
                let bytes = base64_decode(ct)
                    .map_err(|e| ExecError::MalformedContainer(e.to_string()))?;
                let block = block_decode(&bytes)
                    .map_err(|e| ExecError::MalformedContainer(e.to_string()))?;
                state.exec_block(&block)
            }
            Container::Xor1 {
                ct, embedded_key, ..
            } => {
                if !state.charge(1) {
                    return Ok(());
                }
                let pt = xor_apply(embedded_key, ct)
                    .map_err(|e| ExecError::MalformedContainer(e.to_string()))?;
                let block = block_decode(&pt)
                    .map_err(|e| ExecError::MalformedContainer(e.to_string()))?;
                state.exec_block(&block)
            }
            Container::CipherEmbedded {
                ct, embedded_key, ..
            } => {
                if !state.charge(1) {
                    return Ok(());
                }
                let key = SymKey::new(embedded_key.clone())
                    .map_err(|e| ExecError::MalformedContainer(e.to_string()))?;
                let pt =
                    dec(&key, ct).map_err(|e| ExecError::MalformedContainer(e.to_string()))?;
                let block = block_decode(&pt)
                    .map_err(|e| ExecError::MalformedContainer(e.to_string()))?;
                state.exec_block(&block)
            }
            Container::HtdRandom {
                ct,
                digest,
                keyspace_bits,
                ..
            } => {
                let DigestSpec::HOfKey { hash: h_key } = digest else {
                    return Err(ExecError::MalformedContainer(
                        "HTD_RANDOM requires an H_OF_KEY digest".into(),
                    ));
                };
                let mut search = search_rng(h_key, ct, state.input());
                loop {
                    if !state.charge(1) {
                        return Ok(()); // budget gone, block never ran
                    }
                    let candidate = crypto::random_key_bits(*keyspace_bits, &mut search)
                        .map_err(|e| ExecError::MalformedContainer(e.to_string()))?;
                    if hash(candidate.bytes()) == *h_key {
                        return open_verified(state, &candidate, ct);
                    }
                }
            }
            Container::HtdEnvFixed {
                ct,
                digest,
                keyfinder,
                ..
            } => {
                let DigestSpec::HOfKey { hash: h_key } = digest else {
                    return Err(ExecError::MalformedContainer(
                        "HTD_ENV_FIXED requires an H_OF_KEY digest".into(),
                    ));
                };
                // a machine lacking the key-finder variables never opens
                let Ok(stream) = enumerate_candidates(keyfinder, state.profile()) else {
                    return Ok(());
                };
                for trial in stream {
                    if !state.charge(1) {
                        return Ok(());
                    }
                    let Trial::Candidate(candidate) = trial else {
                        continue;
                    };
                    let derived = hash(candidate.as_bytes());
                    if !state.charge(1) {
                        return Ok(());
                    }
                    if hash(&derived.0) == *h_key {
                        return open_verified(state, &SymKey::from_digest(&derived), ct);
                    }
                }
                Ok(())
            }
            Container::HtdEnvEbowla {
                ct,
                digest,
                keyfinder,
                ..
            } => {
                let DigestSpec::HOfBlock {
                    hash: h_block,
                    offset,
                } = digest
                else {
                    return Err(ExecError::MalformedContainer(
                        "HTD_ENV_EBOWLA requires an H_OF_BLOCK digest".into(),
                    ));
                };
                let Ok(stream) = enumerate_candidates(keyfinder, state.profile()) else {
                    return Ok(());
                };
                for trial in stream {
                    if !state.charge(1) {
                        return Ok(());
                    }
                    let Trial::Candidate(candidate) = trial else {
                        continue;
                    };
                    let key = SymKey::from_digest(&hash(candidate.as_bytes()));
                    if !state.charge(1) {
                        return Ok(());
                    }
                    let pt =
                        dec(&key, ct).map_err(|e| ExecError::MalformedContainer(e.to_string()))?;
                    if !state.charge(1) {
                        return Ok(());
                    }
                    if block_digest_with_offset(&pt, *offset) == Some(*h_block) {
                        let block = block_decode(&pt)
                            .map_err(|e| ExecError::MalformedContainer(e.to_string()))?;
                        return state.exec_block(&block);
                    }
                }
                Ok(())
            }
            Container::DeniableXor {
                ct,
                embedded_key,
                schedule,
                ..
            } => {
                if !state.charge(1) {
                    return Ok(());
                }
                let key = if state.clock() >= schedule.available_from {
                    &schedule.k1
                } else {
                    embedded_key
                };
                if key.len() != ct.len() {
                    return Err(ExecError::MalformedContainer(
                        "deniable pad length does not match ciphertext".into(),
                    ));
                }
                let pt = xor_apply(key, ct)
                    .map_err(|e| ExecError::MalformedContainer(e.to_string()))?;
                let block = block_decode(&pt)
                    .map_err(|e| ExecError::MalformedContainer(e.to_string()))?;
                state.exec_block(&block)
            }
            Container::DeniableDual {
                mal_branch,
                benign_branch,
                ..
            } => {
                let branches = [mal_branch, benign_branch];
                let mut streams = Vec::new();
                for b in &branches {
                    if let Ok(s) = enumerate_candidates(&b.keyfinder, state.profile()) {
                        streams.push(Some(s));
                    } else {
                        streams.push(None);
                    }
                }
                // round-robin across the two branch streams, malicious first;
                // every candidate is checked against both digests, malicious
                // digest first
                loop {
                    let mut progressed = false;
                    for stream in streams.iter_mut() {
                        let Some(s) = stream else { continue };
                        let Some(trial) = s.next() else {
                            *stream = None;
                            continue;
                        };
                        progressed = true;
                        if !state.charge(1) {
                            return Ok(());
                        }
                        let Trial::Candidate(candidate) = trial else {
                            continue;
                        };
                        let derived = hash(candidate.as_bytes());
                        if !state.charge(1) {
                            return Ok(());
                        }
                        let double = hash(&derived.0);
                        for b in &branches {
                            let DigestSpec::HOfKey { hash: h_key } = &b.digest else {
                                return Err(ExecError::MalformedContainer(
                                    "DENIABLE_DUAL requires H_OF_KEY digests".into(),
                                ));
                            };
                            if double == *h_key {
                                return open_verified(
                                    state,
                                    &SymKey::from_digest(&derived),
                                    &b.ct,
                                );
                            }
                        }
                    }
                    if !progressed {
                        return Ok(());
                    }
                }
            }
        }
    }
}

/// Decrypt and run a digest-verified block. Only verified plaintext ever
/// executes.
fn open_verified(
    state: &mut ExecState<'_>,
    key: &SymKey,
    ct: &[u8],
) -> Result<(), ExecError> {
    if !state.charge(1) {
        return Ok(());
    }
    let pt = dec(key, ct).map_err(|e| ExecError::MalformedContainer(e.to_string()))?;
    let block = block_decode(&pt).map_err(|e| ExecError::MalformedContainer(e.to_string()))?;
    state.exec_block(&block)
}

/// Deterministic candidate-sampling stream for random-key search, derived
/// from the container contents and the program input.
fn search_rng(h_key: &HashDigest, ct: &[u8], input: &BitString) -> ChaCha20Rng {
    use rand::SeedableRng;
    let digest = crypto::hash_parts(&[
        b"htd-random-search",
        &h_key.0,
        ct,
        input.bytes(),
        &(input.len() as u64).to_le_bytes(),
    ]);
    ChaCha20Rng::from_seed(digest.0)
}

/// Digest of `pt` after discarding its last `offset` bytes; `None` when the
/// plaintext is shorter than the offset.
pub fn block_digest_with_offset(pt: &[u8], offset: usize) -> Option<HashDigest> {
    pt.len().checked_sub(offset).map(|end| hash(&pt[..end]))
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BlockCodecError {
    #[error("nested containers cannot be sealed")]
    NestedContainer,
    #[error("truncated block at byte {0}")]
    Truncated(usize),
    #[error("unknown instruction tag {0:#04x}")]
    BadTag(u8),
    #[error("unknown predicate kind {0:#04x}")]
    BadPredicateKind(u8),
    #[error("payload is not valid UTF-8")]
    BadUtf8,
    #[error("bad predicate pattern: {0}")]
    BadPattern(String),
}

const TAG_EMIT: u8 = 0x00;
const TAG_EMIT_IF: u8 = 0x01;

/// Serialize a plain instruction block.
///
/// `EMIT` records are `[0x00, len_be16, text]`: a 3-byte header, so in a
/// single-instruction block the payload starts on a Base64 group boundary.
/// `EMIT_IF` records are `[0x01, kind, pattern_bits_be16, pattern_bytes,
/// len_be16, text]`.
pub fn block_encode(block: &[Instruction]) -> Result<Vec<u8>, BlockCodecError> {
    let mut out = Vec::new();
    for instr in block {
        match instr {
            Instruction::Emit { text } => {
                out.push(TAG_EMIT);
                out.extend_from_slice(&(text.len() as u16).to_be_bytes());
                out.extend_from_slice(text.as_bytes());
            }
            Instruction::EmitIf { pred, text } => {
                out.push(TAG_EMIT_IF);
                out.push(match pred.kind {
                    PredicateKind::Equals => 0,
                    PredicateKind::Prefix => 1,
                });
                out.extend_from_slice(&(pred.pattern.len() as u16).to_be_bytes());
                out.extend_from_slice(pred.pattern.bytes());
                out.extend_from_slice(&(text.len() as u16).to_be_bytes());
                out.extend_from_slice(text.as_bytes());
            }
            Instruction::Container { .. } => return Err(BlockCodecError::NestedContainer),
        }
    }
    Ok(out)
}

pub fn block_decode(bytes: &[u8]) -> Result<Vec<Instruction>, BlockCodecError> {
    let mut block = Vec::new();
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<std::ops::Range<usize>, BlockCodecError> {
        if *pos + n > bytes.len() {
            return Err(BlockCodecError::Truncated(*pos));
        }
        let r = *pos..*pos + n;
        *pos += n;
        Ok(r)
    };
    while pos < bytes.len() {
        let tag = bytes[take(&mut pos, 1)?][0];
        match tag {
            TAG_EMIT => {
                let len = u16::from_be_bytes(bytes[take(&mut pos, 2)?].try_into().unwrap());
                let text = std::str::from_utf8(&bytes[take(&mut pos, len as usize)?])
                    .map_err(|_| BlockCodecError::BadUtf8)?;
                block.push(Instruction::Emit {
                    text: text.to_string(),
                });
            }
            TAG_EMIT_IF => {
                let kind = match bytes[take(&mut pos, 1)?][0] {
                    0 => PredicateKind::Equals,
                    1 => PredicateKind::Prefix,
                    k => return Err(BlockCodecError::BadPredicateKind(k)),
                };
                let bits =
                    u16::from_be_bytes(bytes[take(&mut pos, 2)?].try_into().unwrap()) as usize;
                let pat_bytes = &bytes[take(&mut pos, bits.div_ceil(8))?];
                let hexed = {
                    let mut h = hex::encode(pat_bytes);
                    h.truncate(bits.div_ceil(4));
                    h
                };
                let pattern = BitString::from_hex(&hexed, bits)
                    .map_err(|e| BlockCodecError::BadPattern(e.to_string()))?;
                let len = u16::from_be_bytes(bytes[take(&mut pos, 2)?].try_into().unwrap());
                let text = std::str::from_utf8(&bytes[take(&mut pos, len as usize)?])
                    .map_err(|_| BlockCodecError::BadUtf8)?;
                block.push(Instruction::EmitIf {
                    pred: InputPredicate { kind, pattern },
                    text: text.to_string(),
                });
            }
            other => return Err(BlockCodecError::BadTag(other)),
        }
    }
    Ok(block)
}

/// Does this plaintext block emit the reserved malicious token anywhere?
pub fn block_emits_mal(block: &[Instruction]) -> bool {
    block
        .iter()
        .any(|i| i.text().is_some_and(|t| t.starts_with(MAL_PREFIX)))
}
