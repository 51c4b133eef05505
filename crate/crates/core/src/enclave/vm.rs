//! Guest instruction set: a small deterministic stack machine.
//!
//! Programs are written in a line-oriented assembly: one instruction per
//! line, `name:` labels, `#` comments. Jump operands are labels or absolute
//! instruction indices. Arithmetic wraps.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub const MAX_STACK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instruction {
    Push(i64),
    Pop,
    Dup,
    Over,
    Swap,
    Add,
    Sub,
    Mul,
    /// Pops b, a; pushes 1 if a == b else 0.
    Eq,
    /// Pops b, a; pushes 1 if a < b else 0.
    Lt,
    Jmp(usize),
    /// Pops a value and jumps when it is zero.
    Jz(usize),
    /// Pops an index and pushes that input word.
    Load,
    /// Pushes the number of input words.
    InLen,
    /// Pops a value onto the output.
    Store,
    Halt,
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::Push(v) => write!(f, "push {v}"),
            Instruction::Pop => f.write_str("pop"),
            Instruction::Dup => f.write_str("dup"),
            Instruction::Over => f.write_str("over"),
            Instruction::Swap => f.write_str("swap"),
            Instruction::Add => f.write_str("add"),
            Instruction::Sub => f.write_str("sub"),
            Instruction::Mul => f.write_str("mul"),
            Instruction::Eq => f.write_str("eq"),
            Instruction::Lt => f.write_str("lt"),
            Instruction::Jmp(t) => write!(f, "jmp {t}"),
            Instruction::Jz(t) => write!(f, "jz {t}"),
            Instruction::Load => f.write_str("load"),
            Instruction::InLen => f.write_str("inlen"),
            Instruction::Store => f.write_str("store"),
            Instruction::Halt => f.write_str("halt"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AssembleError {
    #[error("line {line}: unknown instruction `{text}`")]
    UnknownInstruction { line: usize, text: String },
    #[error("line {line}: bad operand `{text}`")]
    BadOperand { line: usize, text: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum VmError {
    #[error("illegal instruction at pc {pc}")]
    IllegalInstruction { pc: usize },
    #[error("stack underflow at pc {pc}")]
    StackUnderflow { pc: usize },
    #[error("stack overflow at pc {pc}")]
    StackOverflow { pc: usize },
    #[error("input index {index} out of range at pc {pc}")]
    InputOutOfRange { pc: usize, index: i64 },
    #[error("machine already halted")]
    Halted,
}

/// Read-only instruction list. Shared, never mutated after assembly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Code(Arc<[Instruction]>);

impl Code {
    pub fn new(instructions: Vec<Instruction>) -> Self {
        Self(instructions.into())
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Canonical text: one instruction per line, numeric jump targets.
    pub fn to_canonical(&self) -> String {
        self.0.iter().map(|i| format!("{i}\n")).collect()
    }
}

pub fn assemble(source: &str) -> Result<Code, AssembleError> {
    let mut labels = BTreeMap::new();
    let mut lines = Vec::new();
    for (n, raw) in source.lines().enumerate() {
        let line = n + 1;
        let text = raw.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        if let Some(label) = text.strip_suffix(':') {
            let label = label.trim().to_string();
            if labels.insert(label.clone(), lines.len()).is_some() {
                return Err(AssembleError::DuplicateLabel { line, label });
            }
            continue;
        }
        lines.push((line, text));
    }

    let target = |line: usize, operand: Option<&str>| -> Result<usize, AssembleError> {
        let operand = operand.ok_or_else(|| AssembleError::BadOperand { line, text: String::new() })?;
        if let Ok(n) = operand.parse::<usize>() {
            return Ok(n);
        }
        labels.get(operand).copied().ok_or_else(|| AssembleError::UndefinedLabel { line, label: operand.to_string() })
    };

    let mut out = Vec::with_capacity(lines.len());
    for (line, text) in lines {
        let mut parts = text.split_whitespace();
        let op = parts.next().unwrap_or_default().to_ascii_lowercase();
        let operand = parts.next();
        if parts.next().is_some() {
            return Err(AssembleError::BadOperand { line, text: text.to_string() });
        }
        let no_operand = |i: Instruction| match operand {
            None => Ok(i),
            Some(o) => Err(AssembleError::BadOperand { line, text: o.to_string() }),
        };
        let ins = match op.as_str() {
            "push" => {
                let o = operand.ok_or_else(|| AssembleError::BadOperand { line, text: text.to_string() })?;
                Instruction::Push(o.parse().map_err(|_| AssembleError::BadOperand { line, text: o.to_string() })?)
            }
            "pop" => no_operand(Instruction::Pop)?,
            "dup" => no_operand(Instruction::Dup)?,
            "over" => no_operand(Instruction::Over)?,
            "swap" => no_operand(Instruction::Swap)?,
            "add" => no_operand(Instruction::Add)?,
            "sub" => no_operand(Instruction::Sub)?,
            "mul" => no_operand(Instruction::Mul)?,
            "eq" => no_operand(Instruction::Eq)?,
            "lt" => no_operand(Instruction::Lt)?,
            "jmp" => Instruction::Jmp(target(line, operand)?),
            "jz" => Instruction::Jz(target(line, operand)?),
            "load" => no_operand(Instruction::Load)?,
            "inlen" => no_operand(Instruction::InLen)?,
            "store" => no_operand(Instruction::Store)?,
            "halt" => no_operand(Instruction::Halt)?,
            _ => return Err(AssembleError::UnknownInstruction { line, text: text.to_string() }),
        };
        out.push(ins);
    }
    Ok(Code::new(out))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VmState {
    pub pc: usize,
    pub stack: Vec<i64>,
    pub output: Vec<i64>,
    /// Instructions executed so far.
    pub steps: u64,
    pub halted: bool,
}

impl VmState {
    pub fn new() -> Self {
        Self::default()
    }

    fn pop(&mut self, pc: usize) -> Result<i64, VmError> {
        self.stack.pop().ok_or(VmError::StackUnderflow { pc })
    }

    fn push(&mut self, v: i64, pc: usize) -> Result<(), VmError> {
        if self.stack.len() >= MAX_STACK {
            return Err(VmError::StackOverflow { pc });
        }
        self.stack.push(v);
        Ok(())
    }
}

/// Apply one instruction. A faulting instruction leaves `steps` unchanged.
pub fn step(code: &Code, input: &[i64], state: &mut VmState) -> Result<(), VmError> {
    if state.halted {
        return Err(VmError::Halted);
    }
    let pc = state.pc;
    let ins = *code.instructions().get(pc).ok_or(VmError::IllegalInstruction { pc })?;
    let mut next = pc + 1;
    let mut s = state.clone_for_step();
    match ins {
        Instruction::Push(v) => s.push(v, pc)?,
        Instruction::Pop => {
            s.pop(pc)?;
        }
        Instruction::Dup => {
            let a = s.pop(pc)?;
            s.push(a, pc)?;
            s.push(a, pc)?;
        }
        Instruction::Over => {
            let b = s.pop(pc)?;
            let a = s.pop(pc)?;
            s.push(a, pc)?;
            s.push(b, pc)?;
            s.push(a, pc)?;
        }
        Instruction::Swap => {
            let b = s.pop(pc)?;
            let a = s.pop(pc)?;
            s.push(b, pc)?;
            s.push(a, pc)?;
        }
        Instruction::Add | Instruction::Sub | Instruction::Mul | Instruction::Eq | Instruction::Lt => {
            let b = s.pop(pc)?;
            let a = s.pop(pc)?;
            let r = match ins {
                Instruction::Add => a.wrapping_add(b),
                Instruction::Sub => a.wrapping_sub(b),
                Instruction::Mul => a.wrapping_mul(b),
                Instruction::Eq => (a == b) as i64,
                _ => (a < b) as i64,
            };
            s.push(r, pc)?;
        }
        Instruction::Jmp(t) => next = t,
        Instruction::Jz(t) => {
            if s.pop(pc)? == 0 {
                next = t;
            }
        }
        Instruction::Load => {
            let index = s.pop(pc)?;
            let v = usize::try_from(index)
                .ok()
                .and_then(|i| input.get(i))
                .copied()
                .ok_or(VmError::InputOutOfRange { pc, index })?;
            s.push(v, pc)?;
        }
        Instruction::InLen => s.push(input.len() as i64, pc)?,
        Instruction::Store => {
            let v = s.pop(pc)?;
            s.output.push(v);
        }
        Instruction::Halt => s.halted = true,
    }
    if !s.halted && next >= code.len() {
        return Err(VmError::IllegalInstruction { pc: next });
    }
    s.pc = next;
    s.steps += 1;
    *state = s;
    Ok(())
}

impl VmState {
    // Stack effects are applied to a copy so a faulting instruction leaves
    // the committed state untouched. Cheap for the small stacks guests use.
    fn clone_for_step(&self) -> Self {
        self.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Termination {
    Halted,
    /// The host stopped the enclave.
    Interrupted,
    /// The declared step budget ran out before `halt`.
    BudgetExhausted,
    Faulted(VmError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeteredRun {
    pub steps: u64,
    pub termination: Termination,
    pub output: Vec<i64>,
}

/// Run until halt, fault, `budget` steps, or the host interrupt at
/// `interrupt_at` steps, whichever comes first.
pub fn run_metered(code: &Code, input: &[i64], budget: u64, interrupt_at: Option<u64>) -> MeteredRun {
    let mut state = VmState::new();
    loop {
        if interrupt_at.is_some_and(|c| state.steps >= c) {
            return MeteredRun { steps: state.steps, termination: Termination::Interrupted, output: state.output };
        }
        if state.steps >= budget {
            return MeteredRun { steps: state.steps, termination: Termination::BudgetExhausted, output: state.output };
        }
        if let Err(e) = step(code, input, &mut state) {
            return MeteredRun { steps: state.steps, termination: Termination::Faulted(e), output: state.output };
        }
        if state.halted {
            return MeteredRun { steps: state.steps, termination: Termination::Halted, output: state.output };
        }
    }
}

pub fn encode_words(words: &[i64]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

pub fn decode_words(bytes: &[u8]) -> Option<Vec<i64>> {
    if !bytes.len().is_multiple_of(8) {
        return None;
    }
    Some(bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub const SUM_PROGRAM: &str = "\
# Sum every input word and store the total.
    push 0      # i
    push 0      # acc
loop:
    over        # i acc i
    inlen
    lt          # i acc (i < len)
    jz done
    over        # i acc i
    load        # i acc x
    add         # i acc'
    swap        # acc' i
    push 1
    add         # acc' i+1
    swap        # i+1 acc'
    jmp loop
done:
    store
    halt
";
