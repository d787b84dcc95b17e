//! A desk-scale laboratory for cryptographic malware obfuscation.
//!
//! Programs in a tiny deterministic language are generated with known
//! ground-truth labels, transformed by the obfuscation constructs found in
//! real droppers and loaders (encodings, embedded-key ciphers,
//! hash-then-decrypt sealing, environmental keying, deniable encryption),
//! and then handed to a family of budgeted detectors. The evaluation layer
//! estimates each detector's false-positive and false-negative rates before
//! and after obfuscation and decides whether the transform bought the
//! attacker anything.
//!
//! Everything is deterministic under an explicit seed: populations,
//! obfuscation, detector coin flips, and report files reproduce byte for
//! byte.

pub mod crypto;
