//! Deterministic execution with explicit step budgets.
//!
//! Cost model, charged against the budget in order:
//!   - every instruction executed (top level or inside an opened container)
//!     costs 1 step;
//!   - every candidate-key trial inside a container costs 1 step, and so
//!     does each additional hash or cipher call a construct performs
//!     (decryption on a digest match, block-hash verification, codec
//!     application);
//!   - hash-puzzle key finders charge 1 step per nonce tried, hit or miss.
//!
//! When the budget runs out the run stops where it stands: outputs so far
//! are kept and `terminated` is false. Runs are pure functions of
//! `(program, input, profile, budget, clock)` — containers that search keys
//! derive their sampling stream from the container contents and the input,
//! never from ambient randomness.

use crate::environment::Profile;

use super::{BitString, Instruction, Program};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ExecError {
    #[error("input of {got} bits fed to a {want}-bit program")]
    InputLength { got: usize, want: usize },
    #[error("budget must be positive")]
    BadBudget,
    #[error("malformed container payload: {0}")]
    MalformedContainer(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecTrace {
    pub outputs: Vec<String>,
    pub steps_used: u64,
    /// False when the budget ran out mid-run; outputs reflect the partial
    /// execution.
    pub terminated: bool,
}

/// Mutable run state threaded through instruction and container execution.
pub struct ExecState<'a> {
    outputs: Vec<String>,
    steps: u64,
    budget: u64,
    exhausted: bool,
    input: &'a BitString,
    profile: &'a Profile,
    clock: u64,
}

impl<'a> ExecState<'a> {
    /// Charge `n` steps; returns false (and latches exhaustion) if the
    /// budget cannot cover them.
    pub fn charge(&mut self, n: u64) -> bool {
        if self.exhausted {
            return false;
        }
        if self.budget - self.steps < n {
            self.steps = self.budget;
            self.exhausted = true;
            return false;
        }
        self.steps += n;
        true
    }

    pub fn exhausted(&self) -> bool {
        self.exhausted
    }

    pub fn emit(&mut self, text: &str) {
        self.outputs.push(text.to_string());
    }

    pub fn input(&self) -> &BitString {
        self.input
    }

    pub fn profile(&self) -> &Profile {
        self.profile
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Execute a plain (container-free) instruction block, charging one
    /// step per instruction.
    pub fn exec_block(&mut self, block: &[Instruction]) -> Result<(), ExecError> {
        for instr in block {
            if !self.charge(1) {
                return Ok(());
            }
            match instr {
                Instruction::Emit { text } => self.emit(text),
                Instruction::EmitIf { pred, text } => {
                    if pred.matches(self.input) {
                        self.emit(text);
                    }
                }
                Instruction::Container { container } => container.execute(self)?,
            }
        }
        Ok(())
    }
}

/// Run at simulation-clock zero.
pub fn run(
    program: &Program,
    input: &BitString,
    profile: &Profile,
    budget: u64,
) -> Result<ExecTrace, ExecError> {
    run_at(program, input, profile, budget, 0)
}

/// Run with an explicit simulation clock; scheduled deniable keys become
/// obtainable once the clock reaches their release step.
pub fn run_at(
    program: &Program,
    input: &BitString,
    profile: &Profile,
    budget: u64,
    clock: u64,
) -> Result<ExecTrace, ExecError> {
    if input.len() != program.input_len {
        return Err(ExecError::InputLength {
            got: input.len(),
            want: program.input_len,
        });
    }
    if budget == 0 {
        return Err(ExecError::BadBudget);
    }
    let mut state = ExecState {
        outputs: Vec::new(),
        steps: 0,
        budget,
        exhausted: false,
        input,
        profile,
        clock,
    };
    state.exec_block(&program.instructions)?;
    Ok(ExecTrace {
        terminated: !state.exhausted,
        outputs: state.outputs,
        steps_used: state.steps,
    })
}
