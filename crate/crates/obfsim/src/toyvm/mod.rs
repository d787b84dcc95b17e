//! The toy program model: a tiny deterministic language, ground-truth
//! labelling, population generation, and input-output fingerprinting.
//!
//! A program is an ordered list of instructions over a fixed-width bit
//! input. `EMIT` appends text to the output unconditionally, `EMIT_IF`
//! appends when the input satisfies a predicate, and `CONTAINER` executes
//! an obfuscated block. A program is malware exactly when it can emit a
//! string carrying the reserved `MAL:` prefix; for sealed blocks that fact
//! is recorded by the sealing obfuscator, which knows the plaintext, so the
//! label never depends on a key search.

mod bitstring;
mod exec;
mod generate;

pub use bitstring::{BitString, BitStringError};
pub use exec::{run, run_at, ExecError, ExecState, ExecTrace};
pub use generate::{generate_population, GenError, PopulationConfig};

use serde::{Deserialize, Serialize};

use crate::crypto::{hash_parts, HashDigest};
use crate::environment::Profile;
use crate::obfuscators::container::Container;

/// Reserved output prefix that makes a program malware.
pub const MAL_PREFIX: &str = "MAL:";
/// Longest EMIT/EMIT_IF payload, in bytes.
pub const MAX_TEXT_LEN: usize = 4096;
/// Hard cap on the number of programs in a set.
pub const MAX_PROGRAMS: usize = 10_000;
/// Serialization format version.
pub const SET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VmError {
    #[error("program {id}: emit text of {len} bytes exceeds {MAX_TEXT_LEN}")]
    TextTooLong { id: String, len: usize },
    #[error("program {id}: EQUALS pattern must be exactly input_len bits (got {got}, want {want})")]
    EqualsPatternLen { id: String, got: usize, want: usize },
    #[error("program {id}: PREFIX pattern of {got} bits exceeds input_len {want}")]
    PrefixPatternLen { id: String, got: usize, want: usize },
    #[error("program {id}: designated index {index} out of range")]
    DesignatedOutOfRange { id: String, index: usize },
    #[error("program {id}: input_len {len} outside 1..=1024")]
    BadInputLen { id: String, len: usize },
    #[error("set: {0}")]
    BadSet(String),
    #[error("set: program {id}: stored label {stored:?} contradicts ground truth {actual:?}")]
    LabelMismatch {
        id: String,
        stored: Label,
        actual: Label,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "BENIGN")]
    Benign,
    #[serde(rename = "MALWARE")]
    Malware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredicateKind {
    #[serde(rename = "EQUALS")]
    Equals,
    #[serde(rename = "PREFIX")]
    Prefix,
}

/// A pure predicate over the program input.
///
/// `EQUALS` patterns must span the whole input so that every predicate in a
/// valid program is satisfiable; this keeps the syntactic malware label
/// equal to the reachability one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PredWire", into = "PredWire")]
pub struct InputPredicate {
    pub kind: PredicateKind,
    pub pattern: BitString,
}

impl InputPredicate {
    pub fn matches(&self, input: &BitString) -> bool {
        match self.kind {
            PredicateKind::Equals => input == &self.pattern,
            PredicateKind::Prefix => input.starts_with(&self.pattern),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PredWire {
    kind: PredicateKind,
    len: usize,
    hex: String,
}

impl From<InputPredicate> for PredWire {
    fn from(p: InputPredicate) -> Self {
        PredWire {
            kind: p.kind,
            len: p.pattern.len(),
            hex: p.pattern.to_hex(),
        }
    }
}

impl TryFrom<PredWire> for InputPredicate {
    type Error = String;
    fn try_from(w: PredWire) -> Result<Self, String> {
        Ok(InputPredicate {
            kind: w.kind,
            pattern: BitString::from_hex(&w.hex, w.len).map_err(|e| e.to_string())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum Instruction {
    #[serde(rename = "EMIT")]
    Emit { text: String },
    #[serde(rename = "EMIT_IF")]
    EmitIf { pred: InputPredicate, text: String },
    #[serde(rename = "CONTAINER")]
    Container { container: Container },
}

impl Instruction {
    /// Visible payload text, if any.
    pub fn text(&self) -> Option<&str> {
        match self {
            Instruction::Emit { text } | Instruction::EmitIf { text, .. } => Some(text),
            Instruction::Container { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub id: String,
    pub input_len: usize,
    pub instructions: Vec<Instruction>,
    /// Block positions that sealing obfuscators target. In paired
    /// populations both twins designate the same position, so the benign
    /// twin seals its benign block exactly like the malware seals its
    /// payload.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub designated: Vec<usize>,
}

impl Program {
    pub fn validate(&self) -> Result<(), VmError> {
        if self.input_len == 0 || self.input_len > 1024 {
            return Err(VmError::BadInputLen {
                id: self.id.clone(),
                len: self.input_len,
            });
        }
        for instr in &self.instructions {
            if let Some(text) = instr.text() {
                if text.len() > MAX_TEXT_LEN {
                    return Err(VmError::TextTooLong {
                        id: self.id.clone(),
                        len: text.len(),
                    });
                }
            }
            if let Instruction::EmitIf { pred, .. } = instr {
                match pred.kind {
                    PredicateKind::Equals if pred.pattern.len() != self.input_len => {
                        return Err(VmError::EqualsPatternLen {
                            id: self.id.clone(),
                            got: pred.pattern.len(),
                            want: self.input_len,
                        });
                    }
                    PredicateKind::Prefix if pred.pattern.len() > self.input_len => {
                        return Err(VmError::PrefixPatternLen {
                            id: self.id.clone(),
                            got: pred.pattern.len(),
                            want: self.input_len,
                        });
                    }
                    _ => {}
                }
            }
        }
        for &i in &self.designated {
            if i >= self.instructions.len() {
                return Err(VmError::DesignatedOutOfRange {
                    id: self.id.clone(),
                    index: i,
                });
            }
        }
        Ok(())
    }

    /// Indices the sealing obfuscators act on: the designated blocks if any
    /// were recorded, otherwise every visibly malicious instruction.
    pub fn sealing_targets(&self) -> Vec<usize> {
        if !self.designated.is_empty() {
            return self.designated.clone();
        }
        self.instructions
            .iter()
            .enumerate()
            .filter(|(_, instr)| instr.text().is_some_and(|t| t.starts_with(MAL_PREFIX)))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Ground-truth label, decided from plaintext alone.
///
/// Sealed blocks contribute the flag their sealing obfuscator recorded at
/// construction time; there is no key search here, ever.
pub fn ground_truth_label(program: &Program) -> Label {
    for instr in &program.instructions {
        let malicious = match instr {
            Instruction::Emit { text } | Instruction::EmitIf { text, .. } => {
                text.starts_with(MAL_PREFIX)
            }
            Instruction::Container { container } => container.seals_malicious(),
        };
        if malicious {
            return Label::Malware;
        }
    }
    Label::Benign
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetEntry {
    pub program: Program,
    pub label: Label,
}

/// A labelled population with its distinguishing probe inputs and
/// per-program sampling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramSet {
    pub input_len: usize,
    pub probe_inputs: Vec<BitString>,
    pub entries: Vec<SetEntry>,
    pub weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SetWire {
    version: u32,
    input_len: usize,
    probe_inputs: Vec<String>,
    programs: Vec<ProgWire>,
}

#[derive(Serialize, Deserialize)]
struct ProgWire {
    id: String,
    label: Label,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    designated: Vec<usize>,
    instructions: Vec<Instruction>,
}

impl ProgramSet {
    /// Assemble with uniform sampling weights and validate.
    pub fn new(
        input_len: usize,
        probe_inputs: Vec<BitString>,
        entries: Vec<SetEntry>,
    ) -> Result<Self, VmError> {
        let n = entries.len();
        let set = ProgramSet {
            input_len,
            probe_inputs,
            entries,
            weights: vec![1.0 / n.max(1) as f64; n],
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), VmError> {
        if self.entries.len() > MAX_PROGRAMS {
            return Err(VmError::BadSet(format!(
                "{} programs exceed the cap of {MAX_PROGRAMS}",
                self.entries.len()
            )));
        }
        if self.weights.len() != self.entries.len() {
            return Err(VmError::BadSet("weights do not match programs".into()));
        }
        if self.entries.len() > 1 && self.probe_inputs.is_empty() {
            return Err(VmError::BadSet(
                "multiple programs but no probe inputs to distinguish them".into(),
            ));
        }
        for q in &self.probe_inputs {
            if q.len() != self.input_len {
                return Err(VmError::BadSet(format!(
                    "probe input of {} bits in a {}-bit set",
                    q.len(),
                    self.input_len
                )));
            }
        }
        for entry in &self.entries {
            if entry.program.input_len != self.input_len {
                return Err(VmError::BadSet(format!(
                    "program {} has input_len {} in a {}-bit set",
                    entry.program.id, entry.program.input_len, self.input_len
                )));
            }
            entry.program.validate()?;
            let actual = ground_truth_label(&entry.program);
            if actual != entry.label {
                return Err(VmError::LabelMismatch {
                    id: entry.program.id.clone(),
                    stored: entry.label,
                    actual,
                });
            }
        }
        Ok(())
    }

    pub fn class_indices(&self, label: Label) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Weighted draw of a program index within one class.
    pub fn sample_index(
        &self,
        label: Label,
        rng: &mut rand_chacha::ChaCha20Rng,
    ) -> Option<usize> {
        use rand::Rng;
        let members = self.class_indices(label);
        if members.is_empty() {
            return None;
        }
        let total: f64 = members.iter().map(|&i| self.weights[i]).sum();
        let r: f64 = rng.gen::<f64>() * total;
        let mut cum = 0.0;
        for &i in &members {
            cum += self.weights[i];
            if r < cum {
                return Some(i);
            }
        }
        members.last().copied()
    }

    /// Apply `f` to every program, keeping ids, labels, probes and weights.
    pub fn map_programs<E>(
        &self,
        mut f: impl FnMut(usize, &Program, Label) -> Result<Program, E>,
    ) -> Result<ProgramSet, E> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for (i, entry) in self.entries.iter().enumerate() {
            let program = f(i, &entry.program, entry.label)?;
            entries.push(SetEntry {
                program,
                label: entry.label,
            });
        }
        Ok(ProgramSet {
            input_len: self.input_len,
            probe_inputs: self.probe_inputs.clone(),
            entries,
            weights: self.weights.clone(),
        })
    }

    pub fn to_json_string(&self) -> String {
        let wire = SetWire {
            version: SET_FORMAT_VERSION,
            input_len: self.input_len,
            probe_inputs: self.probe_inputs.iter().map(|q| q.to_hex()).collect(),
            programs: self
                .entries
                .iter()
                .map(|e| ProgWire {
                    id: e.program.id.clone(),
                    label: e.label,
                    designated: e.program.designated.clone(),
                    instructions: e.program.instructions.clone(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&wire).expect("set serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn from_json_str(s: &str) -> Result<Self, VmError> {
        let wire: SetWire =
            serde_json::from_str(s).map_err(|e| VmError::BadSet(format!("parse: {e}")))?;
        if wire.version != SET_FORMAT_VERSION {
            return Err(VmError::BadSet(format!(
                "unsupported format version {}",
                wire.version
            )));
        }
        let mut probe_inputs = Vec::with_capacity(wire.probe_inputs.len());
        for q in &wire.probe_inputs {
            probe_inputs.push(
                BitString::from_hex(q, wire.input_len)
                    .map_err(|e| VmError::BadSet(format!("probe input {q:?}: {e}")))?,
            );
        }
        let entries = wire
            .programs
            .into_iter()
            .map(|p| SetEntry {
                program: Program {
                    id: p.id,
                    input_len: wire.input_len,
                    instructions: p.instructions,
                    designated: p.designated,
                },
                label: p.label,
            })
            .collect();
        let set = ProgramSet::new(wire.input_len, probe_inputs, entries)?;
        Ok(set)
    }
}

/// Digest of a program's input-output behaviour over the probe set `q`.
///
/// Folds in each probe, the emitted strings, and the termination flag, but
/// not the step count: functionally equal programs must collide even when
/// their encodings cost different amounts to run. Execution errors fold in
/// a marker so the digest stays total.
pub fn fingerprint(
    program: &Program,
    q: &[BitString],
    profile: &Profile,
    budget: u64,
) -> HashDigest {
    let mut parts_owned: Vec<Vec<u8>> = Vec::new();
    for (i, input) in q.iter().enumerate() {
        parts_owned.push(format!("probe:{i}").into_bytes());
        parts_owned.push(input.bytes().to_vec());
        match run(program, input, profile, budget) {
            Ok(trace) => {
                parts_owned.push(format!("outputs:{}", trace.outputs.len()).into_bytes());
                for out in &trace.outputs {
                    parts_owned.push(out.as_bytes().to_vec());
                }
                parts_owned.push(vec![u8::from(trace.terminated)]);
            }
            Err(_) => parts_owned.push(b"<exec-error>".to_vec()),
        }
    }
    let parts: Vec<&[u8]> = parts_owned.iter().map(|v| v.as_slice()).collect();
    hash_parts(&parts)
}
