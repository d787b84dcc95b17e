//! Environment model: the universe of machine profiles, target selection,
//! environmental key derivation, and the key-finder candidate streams.
//!
//! A universe is an ordered list of mutually independent variables, each
//! with a finite weighted domain. A profile assigns every variable one
//! value. Environmental keys are built by concatenating selected variable
//! values with a fixed `0x1f` separator, which keeps distinct value splits
//! from colliding ("ab"+"c" vs "a"+"bc").

use std::collections::{BTreeMap, BinaryHeap, HashSet};

use itertools::Itertools;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{hash, HashDigest};

/// Separator byte between concatenated values and appended indices.
pub const KEY_SEPARATOR: char = '\u{1f}';

const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("variable {0:?} has an empty domain")]
    EmptyDomain(String),
    #[error("variable {0:?}: weights do not match domain size")]
    WeightMismatch(String),
    #[error("variable {0:?}: weights must be positive and sum to 1 (sum = {1})")]
    BadWeights(String, f64),
    #[error("duplicate variable {0:?}")]
    DuplicateVariable(String),
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("value {value:?} is not in the domain of {var:?}")]
    ValueNotInDomain { var: String, value: String },
    #[error("profile does not assign variable {0:?}")]
    MissingAssignment(String),
    #[error("key finder: {0}")]
    BadSpec(String),
    #[error("index {index} outside 1..={m}")]
    BadIndex { index: u64, m: u64 },
}

/// One environment variable with a weighted finite domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvVariable {
    pub name: String,
    pub domain: Vec<String>,
    pub weights: Vec<f64>,
}

impl EnvVariable {
    pub fn new(name: &str, domain: Vec<String>, weights: Vec<f64>) -> Result<Self, EnvError> {
        let v = EnvVariable {
            name: name.to_string(),
            domain,
            weights,
        };
        v.validate()?;
        Ok(v)
    }

    /// Uniform weights over `domain`.
    pub fn uniform(name: &str, domain: Vec<String>) -> Result<Self, EnvError> {
        let n = domain.len();
        if n == 0 {
            return Err(EnvError::EmptyDomain(name.to_string()));
        }
        EnvVariable::new(name, domain, vec![1.0 / n as f64; n])
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.domain.is_empty() {
            return Err(EnvError::EmptyDomain(self.name.clone()));
        }
        if self.weights.len() != self.domain.len() {
            return Err(EnvError::WeightMismatch(self.name.clone()));
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| w <= 0.0) || (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(EnvError::BadWeights(self.name.clone(), sum));
        }
        Ok(())
    }

    pub fn is_uniform(&self) -> bool {
        let first = self.weights[0];
        self.weights.iter().all(|&w| (w - first).abs() < 1e-12)
    }

    /// Shannon entropy of this variable, in bits.
    pub fn entropy_bits(&self) -> f64 {
        -self
            .weights
            .iter()
            .map(|&w| w * w.log2())
            .sum::<f64>()
    }

    fn weight_of(&self, value: &str) -> Result<f64, EnvError> {
        self.domain
            .iter()
            .position(|v| v == value)
            .map(|i| self.weights[i])
            .ok_or_else(|| EnvError::ValueNotInDomain {
                var: self.name.clone(),
                value: value.to_string(),
            })
    }

    /// Highest-weight value; ties go to the earliest listed.
    pub fn modal_value(&self) -> &str {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        &self.domain[best]
    }
}

/// The set of all machine states: an ordered list of independent variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileUniverse {
    pub variables: Vec<EnvVariable>,
}

impl ProfileUniverse {
    pub fn new(variables: Vec<EnvVariable>) -> Result<Self, EnvError> {
        let u = ProfileUniverse { variables };
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let mut seen = HashSet::new();
        for v in &self.variables {
            v.validate()?;
            if !seen.insert(v.name.as_str()) {
                return Err(EnvError::DuplicateVariable(v.name.clone()));
            }
        }
        Ok(())
    }

    pub fn variable(&self, name: &str) -> Result<&EnvVariable, EnvError> {
        self.variables
            .iter()
            .find(|v| v.name == name)
            .ok_or_else(|| EnvError::UnknownVariable(name.to_string()))
    }

    /// Total number of profiles, as f64 since products overflow u64 easily.
    pub fn total_profiles(&self) -> f64 {
        self.variables
            .iter()
            .map(|v| v.domain.len() as f64)
            .product()
    }

    /// The per-variable most likely profile; the deterministic reference
    /// point for fingerprinting.
    pub fn modal_profile(&self) -> Profile {
        let mut p = Profile::default();
        for v in &self.variables {
            p.assignments
                .insert(v.name.clone(), v.modal_value().to_string());
        }
        p
    }

    pub fn from_json_str(s: &str) -> Result<Self, String> {
        let u: ProfileUniverse = serde_json::from_str(s).map_err(|e| e.to_string())?;
        u.validate().map_err(|e| e.to_string())?;
        Ok(u)
    }
}

/// One concrete machine state.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Profile {
    pub assignments: BTreeMap<String, String>,
}

impl Profile {
    pub fn get(&self, var: &str) -> Option<&str> {
        self.assignments.get(var).map(|s| s.as_str())
    }

    pub fn set(&mut self, var: &str, value: &str) {
        self.assignments.insert(var.to_string(), value.to_string());
    }
}

/// Required assignments picking out the target set of profiles.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TargetSpec {
    pub require: BTreeMap<String, String>,
}

impl TargetSpec {
    /// Treat the requirements as a (partial) profile. Key derivation will
    /// fail later if a key-finder variable is left unpinned.
    pub fn to_profile(&self) -> Profile {
        Profile {
            assignments: self.require.clone(),
        }
    }
}

/// Strategy an opened program uses to reconstruct its environmental key.
/// Stored in the clear inside containers; detectors read it too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy")]
pub enum KeyFinderSpec {
    /// Single candidate: the values of `vars` joined in listed order.
    #[serde(rename = "CONCAT")]
    Concat { vars: Vec<String> },
    /// All concatenation orders, enumerated in lexicographic order of the
    /// permutation; the listed order is the canonical (first) candidate.
    #[serde(rename = "CONCAT_ALL_ORDERS")]
    ConcatAllOrders { vars: Vec<String> },
    /// Candidates `concat ∥ j` for j = 1..=m; the obfuscator seals a small
    /// chosen index so the target machine stops early.
    #[serde(rename = "INDEX_SUFFIX")]
    IndexSuffix { vars: Vec<String>, m: u64 },
    /// Candidates `concat ∥ nonce` for ascending nonces, yielding only
    /// those whose hash clears `difficulty` leading zero bits.
    #[serde(rename = "HASH_PUZZLE")]
    HashPuzzle { vars: Vec<String>, difficulty: u32 },
}

impl KeyFinderSpec {
    pub fn vars(&self) -> &[String] {
        match self {
            KeyFinderSpec::Concat { vars }
            | KeyFinderSpec::ConcatAllOrders { vars }
            | KeyFinderSpec::IndexSuffix { vars, .. }
            | KeyFinderSpec::HashPuzzle { vars, .. } => vars,
        }
    }

    pub fn validate(&self, universe: Option<&ProfileUniverse>) -> Result<(), EnvError> {
        if self.vars().is_empty() {
            return Err(EnvError::BadSpec("variable list is empty".into()));
        }
        match self {
            KeyFinderSpec::IndexSuffix { m, .. } if *m < 1 => {
                return Err(EnvError::BadSpec("index bound m must be at least 1".into()));
            }
            KeyFinderSpec::HashPuzzle { difficulty, .. } if *difficulty > 32 => {
                return Err(EnvError::BadSpec(format!(
                    "puzzle difficulty {difficulty} exceeds 32 bits"
                )));
            }
            _ => {}
        }
        if let Some(u) = universe {
            for v in self.vars() {
                u.variable(v)?;
            }
        }
        Ok(())
    }
}

/// Sample one profile, independently per variable by weight.
pub fn sample_profile(universe: &ProfileUniverse, rng: &mut ChaCha20Rng) -> Profile {
    let mut p = Profile::default();
    for v in &universe.variables {
        let r: f64 = rng.gen();
        let mut cum = 0.0;
        let mut chosen = v.domain.len() - 1;
        for (i, &w) in v.weights.iter().enumerate() {
            cum += w;
            if r < cum {
                chosen = i;
                break;
            }
        }
        p.assignments
            .insert(v.name.clone(), v.domain[chosen].clone());
    }
    p
}

/// Probability of sampling a profile in the target set: the product of the
/// required values' weights. Unconstrained variables contribute factor 1.
pub fn p_target(universe: &ProfileUniverse, target: &TargetSpec) -> Result<f64, EnvError> {
    let mut p = 1.0;
    for (var, value) in &target.require {
        p *= universe.variable(var)?.weight_of(value)?;
    }
    Ok(p)
}

fn concat_values(vars: &[String], profile: &Profile) -> Result<String, EnvError> {
    let mut parts = Vec::with_capacity(vars.len());
    for v in vars {
        parts.push(
            profile
                .get(v)
                .ok_or_else(|| EnvError::MissingAssignment(v.clone()))?,
        );
    }
    Ok(parts.join(&KEY_SEPARATOR.to_string()))
}

/// First nonce whose candidate string clears `difficulty` leading zero bits.
pub fn puzzle_nonce(concat: &str, difficulty: u32) -> u64 {
    let mut nonce = 0u64;
    loop {
        if puzzle_ok(&puzzle_candidate(concat, nonce), difficulty) {
            return nonce;
        }
        nonce += 1;
    }
}

fn puzzle_candidate(concat: &str, nonce: u64) -> String {
    format!("{concat}{KEY_SEPARATOR}{nonce}")
}

fn puzzle_ok(candidate: &str, difficulty: u32) -> bool {
    hash(candidate.as_bytes()).leading_zero_bits() >= difficulty
}

/// The canonical key string an obfuscator seals against.
///
/// `index` is the obfuscation-time choice for `INDEX_SUFFIX` and must be
/// absent for every other strategy.
pub fn derive_env_key(
    spec: &KeyFinderSpec,
    profile: &Profile,
    index: Option<u64>,
) -> Result<String, EnvError> {
    if index.is_some() && !matches!(spec, KeyFinderSpec::IndexSuffix { .. }) {
        return Err(EnvError::BadSpec(
            "chosen index is only meaningful for INDEX_SUFFIX".into(),
        ));
    }
    let concat = concat_values(spec.vars(), profile)?;
    match spec {
        KeyFinderSpec::Concat { .. } | KeyFinderSpec::ConcatAllOrders { .. } => Ok(concat),
        KeyFinderSpec::IndexSuffix { m, .. } => {
            let i = index.ok_or(EnvError::BadIndex { index: 0, m: *m })?;
            if i < 1 || i > *m {
                return Err(EnvError::BadIndex { index: i, m: *m });
            }
            Ok(format!("{concat}{KEY_SEPARATOR}{i}"))
        }
        KeyFinderSpec::HashPuzzle { difficulty, .. } => {
            Ok(puzzle_candidate(&concat, puzzle_nonce(&concat, *difficulty)))
        }
    }
}

/// One pull from a candidate stream. Hash-puzzle streams interleave `Miss`
/// items for nonces that fail the difficulty check; each item, hit or miss,
/// costs the consumer one trial.
#[derive(Debug, Clone, PartialEq)]
pub enum Trial {
    Miss,
    Candidate(String),
}

/// Lazily enumerated candidate key strings for one profile.
pub struct CandidateStream {
    inner: StreamKind,
}

enum StreamKind {
    Done,
    Single(Option<String>),
    Perms {
        values: Vec<String>,
        perms: itertools::structs::Permutations<std::ops::Range<usize>>,
    },
    Index {
        concat: String,
        next: u64,
        m: u64,
    },
    Puzzle {
        concat: String,
        next_nonce: u64,
        difficulty: u32,
    },
}

impl Iterator for CandidateStream {
    type Item = Trial;

    fn next(&mut self) -> Option<Trial> {
        match &mut self.inner {
            StreamKind::Done => None,
            StreamKind::Single(s) => s.take().map(Trial::Candidate).or_else(|| {
                self.inner = StreamKind::Done;
                None
            }),
            StreamKind::Perms { values, perms } => match perms.next() {
                Some(order) => {
                    let joined = order
                        .iter()
                        .map(|&i| values[i].as_str())
                        .collect::<Vec<_>>()
                        .join(&KEY_SEPARATOR.to_string());
                    Some(Trial::Candidate(joined))
                }
                None => {
                    self.inner = StreamKind::Done;
                    None
                }
            },
            StreamKind::Index { concat, next, m } => {
                if *next > *m {
                    self.inner = StreamKind::Done;
                    return None;
                }
                let s = format!("{concat}{KEY_SEPARATOR}{next}");
                *next += 1;
                Some(Trial::Candidate(s))
            }
            StreamKind::Puzzle {
                concat,
                next_nonce,
                difficulty,
            } => {
                let s = puzzle_candidate(concat, *next_nonce);
                *next_nonce = next_nonce.wrapping_add(1);
                if puzzle_ok(&s, *difficulty) {
                    Some(Trial::Candidate(s))
                } else {
                    Some(Trial::Miss)
                }
            }
        }
    }
}

/// Candidate keys for `spec` under `profile`, in the strategy's canonical
/// order. A profile that does not assign every spec variable is an error;
/// container execution maps that to an empty stream (a machine without the
/// variable simply never opens the block).
pub fn enumerate_candidates(
    spec: &KeyFinderSpec,
    profile: &Profile,
) -> Result<CandidateStream, EnvError> {
    let inner = match spec {
        KeyFinderSpec::Concat { vars } => StreamKind::Single(Some(concat_values(vars, profile)?)),
        KeyFinderSpec::ConcatAllOrders { vars } => {
            let mut values = Vec::with_capacity(vars.len());
            for v in vars {
                values.push(
                    profile
                        .get(v)
                        .ok_or_else(|| EnvError::MissingAssignment(v.clone()))?
                        .to_string(),
                );
            }
            let n = values.len();
            StreamKind::Perms {
                values,
                perms: (0..n).permutations(n),
            }
        }
        KeyFinderSpec::IndexSuffix { vars, m } => StreamKind::Index {
            concat: concat_values(vars, profile)?,
            next: 1,
            m: *m,
        },
        KeyFinderSpec::HashPuzzle { vars, difficulty } => StreamKind::Puzzle {
            concat: concat_values(vars, profile)?,
            next_nonce: 0,
            difficulty: *difficulty,
        },
    };
    Ok(CandidateStream { inner })
}

/// Joint Shannon entropy of the named (independent) variables, in bits.
pub fn entropy_bits(universe: &ProfileUniverse, vars: &[String]) -> Result<f64, EnvError> {
    let mut total = 0.0;
    for v in vars {
        total += universe.variable(v)?.entropy_bits();
    }
    Ok(total)
}

struct RankedCandidate {
    p: f64,
    idx: Vec<u32>,
}

impl PartialEq for RankedCandidate {
    fn eq(&self, other: &Self) -> bool {
        self.p == other.p && self.idx == other.idx
    }
}
impl Eq for RankedCandidate {}
impl Ord for RankedCandidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // max-heap: higher probability first; ties pop the lexicographically
        // smaller index vector first
        self.p
            .total_cmp(&other.p)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}
impl PartialOrd for RankedCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Enumerate up to `limit` profiles in descending joint probability.
///
/// Ties break lexicographically: within a variable, values of equal weight
/// keep their domain order sorted ascending, and profiles compare by those
/// ranks. For fully uniform universes this is exactly lexicographic order
/// over value tuples, produced by a plain mixed-radix counter; otherwise a
/// best-first heap walk over the rank lattice is used.
pub fn enumerate_profiles_desc(
    universe: &ProfileUniverse,
    limit: usize,
) -> Vec<(Profile, f64)> {
    if universe.variables.is_empty() || limit == 0 {
        return Vec::new();
    }
    // per-variable (value, weight) sorted by weight desc, value asc
    let sorted: Vec<Vec<(&str, f64)>> = universe
        .variables
        .iter()
        .map(|v| {
            let mut order: Vec<(&str, f64)> = v
                .domain
                .iter()
                .map(|s| s.as_str())
                .zip(v.weights.iter().copied())
                .collect();
            order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            order
        })
        .collect();

    let build = |idx: &[u32]| -> (Profile, f64) {
        let mut profile = Profile::default();
        let mut p = 1.0;
        for (v, (&i, var)) in idx.iter().zip(universe.variables.iter()).enumerate() {
            let (value, w) = sorted[v][i as usize];
            profile.assignments.insert(var.name.clone(), value.into());
            p *= w;
        }
        (profile, p)
    };

    let mut out = Vec::with_capacity(limit.min(4096));

    if universe.variables.iter().all(|v| v.is_uniform()) {
        // mixed-radix counter, most significant digit first
        let radices: Vec<u32> = sorted.iter().map(|s| s.len() as u32).collect();
        let mut idx = vec![0u32; radices.len()];
        loop {
            out.push(build(&idx));
            if out.len() >= limit {
                return out;
            }
            let mut pos = idx.len();
            loop {
                if pos == 0 {
                    return out;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < radices[pos] {
                    break;
                }
                idx[pos] = 0;
                if pos == 0 {
                    return out;
                }
            }
        }
    }

    let mut heap = BinaryHeap::new();
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let start = vec![0u32; universe.variables.len()];
    let p0: f64 = sorted.iter().map(|s| s[0].1).product();
    seen.insert(start.clone());
    heap.push(RankedCandidate { p: p0, idx: start });
    while let Some(RankedCandidate { p, idx }) = heap.pop() {
        let (profile, _) = build(&idx);
        out.push((profile, p));
        if out.len() >= limit {
            break;
        }
        for j in 0..idx.len() {
            let next = idx[j] + 1;
            if (next as usize) < sorted[j].len() {
                let mut child = idx.clone();
                child[j] = next;
                if seen.insert(child.clone()) {
                    let ratio = sorted[j][next as usize].1 / sorted[j][idx[j] as usize].1;
                    heap.push(RankedCandidate {
                        p: p * ratio,
                        idx: child,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::derive_rng;

    fn uvar(name: &str, values: &[&str]) -> EnvVariable {
        EnvVariable::uniform(name, values.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    /// Exhaustive oracle: walk every profile of the universe, summing joint
    /// probabilities of those matching the target.
    fn p_target_bruteforce(u: &ProfileUniverse, t: &TargetSpec) -> f64 {
        let mut total = 0.0;
        let mut idx = vec![0usize; u.variables.len()];
        loop {
            let mut p = 1.0;
            let mut matches = true;
            for (vi, v) in u.variables.iter().enumerate() {
                p *= v.weights[idx[vi]];
                if let Some(req) = t.require.get(&v.name) {
                    if &v.domain[idx[vi]] != req {
                        matches = false;
                    }
                }
            }
            if matches {
                total += p;
            }
            let mut pos = idx.len();
            loop {
                if pos == 0 {
                    return total;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < u.variables[pos].domain.len() {
                    break;
                }
                idx[pos] = 0;
                if pos == 0 {
                    return total;
                }
            }
        }
    }

    #[test]
    fn point_mass_always_samples_the_single_value() {
        let u = ProfileUniverse::new(vec![uvar("X", &["x"])]).unwrap();
        let mut rng = derive_rng(1, "env", 0);
        for _ in 0..100 {
            assert_eq!(sample_profile(&u, &mut rng).get("X"), Some("x"));
        }
    }

    #[test]
    fn two_value_sampling_within_5_sigma() {
        let u = ProfileUniverse::new(vec![uvar("B", &["zero", "one"])]).unwrap();
        let mut rng = derive_rng(2, "env", 0);
        let n = 100_000;
        let mut ones = 0u64;
        for _ in 0..n {
            if sample_profile(&u, &mut rng).get("B") == Some("one") {
                ones += 1;
            }
        }
        let mu = n as f64 / 2.0;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((ones as f64 - mu).abs() <= 5.0 * sigma, "ones = {ones}");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let u = ProfileUniverse::new(vec![uvar("A", &["p", "q", "r"]), uvar("B", &["s", "t"])])
            .unwrap();
        let a = sample_profile(&u, &mut derive_rng(3, "env", 0));
        let b = sample_profile(&u, &mut derive_rng(3, "env", 0));
        assert_eq!(a, b);
    }

    #[test]
    fn p_target_product_rule() {
        let domain: Vec<String> = (0..1024).map(|i| format!("v{i}")).collect();
        let u = ProfileUniverse::new(vec![EnvVariable::uniform("V", domain).unwrap()]).unwrap();
        let mut t = TargetSpec::default();
        t.require.insert("V".into(), "v7".into());
        assert!((p_target(&u, &t).unwrap() - 2f64.powi(-10)).abs() < 1e-15);
        assert_eq!(p_target(&u, &TargetSpec::default()).unwrap(), 1.0);
    }

    #[test]
    fn p_target_matches_bruteforce_enumeration() {
        let a = uvar("A", &["a0", "a1", "a2", "a3"]);
        let b = uvar("B", &["b0", "b1", "b2", "b3", "b4", "b5", "b6", "b7"]);
        let u = ProfileUniverse::new(vec![a, b]).unwrap();
        let mut t = TargetSpec::default();
        t.require.insert("A".into(), "a2".into());
        t.require.insert("B".into(), "b5".into());
        let exact = p_target(&u, &t).unwrap();
        assert!((exact - 1.0 / 32.0).abs() < 1e-15);
        assert!((exact - p_target_bruteforce(&u, &t)).abs() < 1e-12);
        // non-uniform case against the oracle too
        let w = EnvVariable::new(
            "W",
            vec!["x".into(), "y".into(), "z".into()],
            vec![0.5, 0.25, 0.25],
        )
        .unwrap();
        let u2 = ProfileUniverse::new(vec![w]).unwrap();
        let mut t2 = TargetSpec::default();
        t2.require.insert("W".into(), "y".into());
        assert!((p_target(&u2, &t2).unwrap() - p_target_bruteforce(&u2, &t2)).abs() < 1e-12);
        // value outside the domain is an error
        let mut t3 = TargetSpec::default();
        t3.require.insert("W".into(), "nope".into());
        assert!(p_target(&u2, &t3).is_err());
    }

    #[test]
    fn derive_key_concat_and_index_suffix() {
        let mut profile = Profile::default();
        profile.set("USER", "alice");
        let concat = KeyFinderSpec::Concat {
            vars: vec!["USER".into()],
        };
        assert_eq!(derive_env_key(&concat, &profile, None).unwrap(), "alice");
        let suffix = KeyFinderSpec::IndexSuffix {
            vars: vec!["USER".into()],
            m: 100,
        };
        assert_eq!(
            derive_env_key(&suffix, &profile, Some(3)).unwrap(),
            format!("alice{KEY_SEPARATOR}3")
        );
        assert!(derive_env_key(&suffix, &profile, Some(101)).is_err());
        assert!(derive_env_key(&suffix, &profile, None).is_err());
        assert!(derive_env_key(&concat, &profile, Some(1)).is_err());
        let missing = KeyFinderSpec::Concat {
            vars: vec!["HOST".into()],
        };
        assert!(matches!(
            derive_env_key(&missing, &profile, None),
            Err(EnvError::MissingAssignment(_))
        ));
    }

    #[test]
    fn puzzle_key_is_first_satisfying_nonce() {
        let mut profile = Profile::default();
        profile.set("USER", "alice");
        let spec = KeyFinderSpec::HashPuzzle {
            vars: vec!["USER".into()],
            difficulty: 8,
        };
        let key = derive_env_key(&spec, &profile, None).unwrap();
        let nonce = puzzle_nonce("alice", 8);
        assert_eq!(key, format!("alice{KEY_SEPARATOR}{nonce}"));
        // earlier nonces all miss, the chosen one hits
        for n in 0..nonce {
            assert!(!puzzle_ok(&puzzle_candidate("alice", n), 8));
        }
        assert!(puzzle_ok(&key, 8));
    }

    #[test]
    fn puzzle_nonce_mean_tracks_geometric_distribution() {
        // d = 6: expected first nonce about 2^6; 200 prefixes keep the test
        // quick while 3 sigma of the geometric spread bounds the mean.
        let d = 6u32;
        let n = 200u64;
        let mut total = 0u64;
        for i in 0..n {
            total += puzzle_nonce(&format!("prefix-{i}"), d);
        }
        let mean = total as f64 / n as f64;
        let expect = 2f64.powi(d as i32);
        let sigma = expect / (n as f64).sqrt();
        assert!(
            (mean - expect).abs() <= 3.0 * sigma,
            "mean {mean} vs {expect}"
        );
    }

    #[test]
    fn candidate_counts_and_orders() {
        let mut profile = Profile::default();
        profile.set("A", "a");
        profile.set("B", "b");
        profile.set("C", "c");
        let suffix = KeyFinderSpec::IndexSuffix {
            vars: vec!["A".into()],
            m: 5,
        };
        let got: Vec<Trial> = enumerate_candidates(&suffix, &profile).unwrap().collect();
        assert_eq!(got.len(), 5);
        assert_eq!(got[2], Trial::Candidate(format!("a{KEY_SEPARATOR}3")));

        let orders = KeyFinderSpec::ConcatAllOrders {
            vars: vec!["A".into(), "B".into(), "C".into()],
        };
        let perms: Vec<String> = enumerate_candidates(&orders, &profile)
            .unwrap()
            .map(|t| match t {
                Trial::Candidate(s) => s,
                Trial::Miss => unreachable!(),
            })
            .collect();
        assert_eq!(perms.len(), 6);
        let s = KEY_SEPARATOR;
        assert_eq!(perms[0], format!("a{s}b{s}c"));
        assert_eq!(perms[5], format!("c{s}b{s}a"));
        // listed order is the canonical first candidate
        assert_eq!(
            perms[0],
            derive_env_key(&orders, &profile, None).unwrap()
        );
    }

    #[test]
    fn canonical_key_position_in_stream() {
        let mut profile = Profile::default();
        profile.set("U", "u1");
        let concat = KeyFinderSpec::Concat {
            vars: vec!["U".into()],
        };
        let canonical = derive_env_key(&concat, &profile, None).unwrap();
        let stream: Vec<Trial> = enumerate_candidates(&concat, &profile).unwrap().collect();
        assert_eq!(stream, vec![Trial::Candidate(canonical)]);

        let suffix = KeyFinderSpec::IndexSuffix {
            vars: vec!["U".into()],
            m: 64,
        };
        let sealed = derive_env_key(&suffix, &profile, Some(17)).unwrap();
        let pos = enumerate_candidates(&suffix, &profile)
            .unwrap()
            .position(|t| t == Trial::Candidate(sealed.clone()))
            .unwrap();
        assert_eq!(pos + 1, 17);
    }

    #[test]
    fn entropy_of_uniform_variables_is_log2_of_domain_size() {
        for n in [2usize, 3, 10, 1024, 65_536] {
            let domain: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            let u =
                ProfileUniverse::new(vec![EnvVariable::uniform("V", domain).unwrap()]).unwrap();
            let e = entropy_bits(&u, &["V".into()]).unwrap();
            assert!(
                (e - (n as f64).log2()).abs() < 1e-9,
                "n = {n}: {e} vs {}",
                (n as f64).log2()
            );
        }
    }

    #[test]
    fn entropy_is_additive_and_zero_for_point_mass() {
        let point = uvar("P", &["only"]);
        let u = ProfileUniverse::new(vec![point]).unwrap();
        assert_eq!(entropy_bits(&u, &["P".into()]).unwrap(), 0.0);

        let a =
            EnvVariable::uniform("A", (0..64).map(|i| i.to_string()).collect()).unwrap();
        let b =
            EnvVariable::uniform("B", (0..32).map(|i| i.to_string()).collect()).unwrap();
        let u2 = ProfileUniverse::new(vec![a, b]).unwrap();
        let e = entropy_bits(&u2, &["A".into(), "B".into()]).unwrap();
        assert!((e - 11.0).abs() < 1e-9); // log2(64 * 32)
    }

    #[test]
    fn name_pair_universe_entropy_is_about_2_to_35() {
        // 6,299,033 surnames x 4,250 first names; uniform entropy is
        // log2 of the product, which comes out near 35 bits.
        let bits = (6_299_033f64).log2() + (4_250f64).log2();
        assert!((bits - 34.64).abs() < 0.01);
        assert!(bits > 34.0 && bits < 35.0);
        // additivity at that scale, checked on a materialized universe of
        // the same shape but desk-size domains
        let sur: Vec<String> = (0..63_000).map(|i| format!("s{i}")).collect();
        let first: Vec<String> = (0..4_250).map(|i| format!("f{i}")).collect();
        let u = ProfileUniverse::new(vec![
            EnvVariable::uniform("SURNAME", sur).unwrap(),
            EnvVariable::uniform("FIRSTNAME", first).unwrap(),
        ])
        .unwrap();
        let e = entropy_bits(&u, &["SURNAME".into(), "FIRSTNAME".into()]).unwrap();
        assert!((e - (63_000f64 * 4_250f64).log2()).abs() < 1e-9);
    }

    #[test]
    fn profile_enumeration_descends_by_probability() {
        let w = EnvVariable::new(
            "W",
            vec!["x".into(), "y".into(), "z".into()],
            vec![0.2, 0.5, 0.3],
        )
        .unwrap();
        let v = EnvVariable::new("V", vec!["a".into(), "b".into()], vec![0.9, 0.1]).unwrap();
        let u = ProfileUniverse::new(vec![w, v]).unwrap();
        let all = enumerate_profiles_desc(&u, 100);
        assert_eq!(all.len(), 6);
        for pair in all.windows(2) {
            assert!(pair[0].1 >= pair[1].1 - 1e-12);
        }
        assert_eq!(all[0].0.get("W"), Some("y"));
        assert_eq!(all[0].0.get("V"), Some("a"));
        assert!((all[0].1 - 0.45).abs() < 1e-12);
        let total: f64 = all.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_enumeration_is_lexicographic_and_bounded() {
        let u = ProfileUniverse::new(vec![
            uvar("A", &["a", "b"]),
            uvar("B", &["x", "y", "z"]),
        ])
        .unwrap();
        let got = enumerate_profiles_desc(&u, 4);
        assert_eq!(got.len(), 4);
        let keys: Vec<(String, String)> = got
            .iter()
            .map(|(p, _)| {
                (
                    p.get("A").unwrap().to_string(),
                    p.get("B").unwrap().to_string(),
                )
            })
            .collect();
        assert_eq!(
            keys,
            vec![
                ("a".into(), "x".into()),
                ("a".into(), "y".into()),
                ("a".into(), "z".into()),
                ("b".into(), "x".into()),
            ]
        );
    }

    #[test]
    fn validation_rejects_bad_universes_and_specs() {
        assert!(EnvVariable::uniform("E", vec![]).is_err());
        assert!(EnvVariable::new("E", vec!["a".into()], vec![0.5]).is_err());
        assert!(EnvVariable::new("E", vec!["a".into(), "b".into()], vec![1.5, -0.5]).is_err());
        let dup = ProfileUniverse::new(vec![uvar("X", &["a"]), uvar("X", &["b"])]);
        assert!(matches!(dup, Err(EnvError::DuplicateVariable(_))));

        let u = ProfileUniverse::new(vec![uvar("A", &["a"])]).unwrap();
        assert!(KeyFinderSpec::Concat { vars: vec![] }.validate(None).is_err());
        assert!(KeyFinderSpec::IndexSuffix {
            vars: vec!["A".into()],
            m: 0
        }
        .validate(Some(&u))
        .is_err());
        assert!(KeyFinderSpec::HashPuzzle {
            vars: vec!["A".into()],
            difficulty: 33
        }
        .validate(Some(&u))
        .is_err());
        assert!(KeyFinderSpec::Concat {
            vars: vec!["B".into()]
        }
        .validate(Some(&u))
        .is_err());
    }

    #[test]
    fn universe_json_round_trip() {
        let json = r#"{"variables":[{"name":"USER","domain":["alice","bob"],"weights":[0.5,0.5]}]}"#;
        let u = ProfileUniverse::from_json_str(json).unwrap();
        assert_eq!(u.variables.len(), 1);
        let back = serde_json::to_string(&u).unwrap();
        let u2 = ProfileUniverse::from_json_str(&back).unwrap();
        assert_eq!(u, u2);
    }
}
