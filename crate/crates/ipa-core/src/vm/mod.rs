//! A miniature register VM with logical threads and a seeded scheduler.
//!
//! Programs are lists of functions made of labelled basic blocks. Execution
//! interleaves logical threads at instruction granularity: at every step the
//! scheduler picks uniformly (via SplitMix64) among the runnable threads, so
//! a `(program, input, seed)` triple fully determines the run. The
//! interpreter emits trace samples at function entries/exits (and optionally
//! basic-block entries), applies at most one fault-plan perturbation, and
//! reports the run outcome.

mod asm;
mod builtins;
mod interp;

pub use asm::{load_program, AsmError};
pub use builtins::{builtin, builtin_default_input, builtin_names, builtin_source, BuiltinError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::injector::FaultPlan;
use crate::trace::TraceFile;
use crate::value::{Value, VarType};

/// Sampling granularity for trace emission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    Function,
    BasicBlock,
}

impl Granularity {
    pub fn parse(s: &str) -> Option<Granularity> {
        match s {
            "function" => Some(Granularity::Function),
            "block" | "basic-block" => Some(Granularity::BasicBlock),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Function => "function",
            Granularity::BasicBlock => "block",
        }
    }
}

/// Seed for the interleaving scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSeed(pub u64);

/// How final outputs are compared against the golden output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputPolicy {
    /// Outputs must match element for element.
    Sequence,
    /// Array outputs match if they hold the same elements in any order.
    Multiset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Lt,
    Le,
    Eq,
    Ne,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn suffix(self) -> &'static str {
        match self {
            CmpOp::Lt => "lt",
            CmpOp::Le => "le",
            CmpOp::Eq => "eq",
            CmpOp::Ne => "ne",
            CmpOp::Gt => "gt",
            CmpOp::Ge => "ge",
        }
    }
}

/// Register slot within a function frame.
pub type Reg = u16;

/// Instruction operand: register or immediate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    ImmI(i64),
    ImmF(f64),
    ImmB(bool),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Insn {
    Const { dst: Reg, imm: Operand },
    Mov { dst: Reg, src: Operand },
    Arith { op: ArithOp, dst: Reg, a: Operand, b: Operand },
    Cmp { op: CmpOp, dst: Reg, a: Operand, b: Operand },
    Br { target: usize },
    BrCond { cond: Operand, then_target: usize, else_target: usize },
    Call { dst: Option<Reg>, func: usize, args: Vec<Operand> },
    Ret { value: Option<Operand> },
    Alloc { dst: Reg, size: Operand },
    Load { dst: Reg, addr: Operand, index: Operand },
    Store { addr: Operand, index: Operand, value: Operand },
    Lock { mutex: usize },
    Unlock { mutex: usize },
    SemWait { sem: usize },
    SemPost { sem: usize },
    Spawn { dst: Reg, func: usize, args: Vec<Operand> },
    Join { thread: Operand },
    IoRead { buf: Operand, size: Operand },
    IoWrite { buf: Operand, size: Operand },
    Output { value: Operand },
    Len { dst: Reg, arr: Operand },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub label: String,
    pub insns: Vec<Insn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    /// Parameters (name, type); they occupy the first register slots.
    pub params: Vec<(String, VarType)>,
    /// Scalar return type, if the function returns a value.
    pub ret: Option<VarType>,
    pub blocks: Vec<Block>,
    /// All register names, params first.
    pub regs: Vec<String>,
}

impl Function {
    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }
}

/// Static source metrics computed at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProgramMetadata {
    /// Count of instruction lines in the source.
    pub lines_of_code: usize,
    pub statements: usize,
    pub declarations: usize,
    pub array_declarations: usize,
    pub branches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub name: String,
    pub functions: Vec<Function>,
    pub entry: usize,
    pub mutex_names: Vec<String>,
    pub sem_names: Vec<String>,
    pub metadata: ProgramMetadata,
    pub output_policy: OutputPolicy,
}

impl Program {
    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    pub fn entry_function(&self) -> &Function {
        &self.functions[self.entry]
    }

    pub fn find_insn(&self, function: &str, block: &str, insn_index: usize) -> Option<&Insn> {
        let f = &self.functions[self.function_index(function)?];
        let b = &f.blocks[f.block_index(block)?];
        b.insns.get(insn_index)
    }

    /// Flat index of a static instruction, used for occurrence counting.
    pub fn flat_index(&self, fi: usize, bi: usize, ii: usize) -> usize {
        let mut idx = 0;
        for (i, f) in self.functions.iter().enumerate() {
            for (j, b) in f.blocks.iter().enumerate() {
                if i == fi && j == bi {
                    return idx + ii;
                }
                idx += b.insns.len();
            }
        }
        unreachable!("flat_index out of range")
    }

    pub fn total_insns(&self) -> usize {
        self.functions
            .iter()
            .map(|f| f.blocks.iter().map(|b| b.insns.len()).sum::<usize>())
            .sum()
    }
}

/// Dynamic execution counts per static instruction.
#[derive(Debug, Clone, Default)]
pub struct SiteCounts {
    pub counts: Vec<u64>,
}

impl SiteCounts {
    pub fn get(&self, p: &Program, function: &str, block: &str, insn_index: usize) -> Option<u64> {
        let fi = p.function_index(function)?;
        let bi = p.functions[fi].block_index(block)?;
        if insn_index >= p.functions[fi].blocks[bi].insns.len() {
            return None;
        }
        Some(self.counts[p.flat_index(fi, bi, insn_index)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrapReason {
    OutOfBounds,
    InvalidAddress,
    Deadlock,
    DivByZero,
    TypeError,
    InvalidAllocSize,
    StackOverflow,
    UninitRegister,
}

impl TrapReason {
    pub fn as_str(self) -> &'static str {
        match self {
            TrapReason::OutOfBounds => "out_of_bounds",
            TrapReason::InvalidAddress => "invalid_address",
            TrapReason::Deadlock => "deadlock",
            TrapReason::DivByZero => "div_by_zero",
            TrapReason::TypeError => "type_error",
            TrapReason::InvalidAllocSize => "invalid_alloc_size",
            TrapReason::StackOverflow => "stack_overflow",
            TrapReason::UninitRegister => "uninit_register",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Normal,
    Trap(TrapReason),
    Timeout,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outcome::Normal => write!(f, "Normal"),
            Outcome::Trap(r) => write!(f, "Trap({})", r.as_str()),
            Outcome::Timeout => write!(f, "Timeout"),
        }
    }
}

/// Everything one execution produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: TraceFile,
    pub output: Vec<Value>,
    pub outcome: Outcome,
    pub steps: u64,
    pub activated: bool,
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("input arity mismatch: entry takes {expected} values, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("input type mismatch for parameter `{param}`: expected {expected}")]
    InputType { param: String, expected: VarType },
    #[error("invalid fault plan: {0}")]
    BadPlan(String),
}

/// Default step budget when nothing better is known.
pub const FALLBACK_STEP_BUDGET: u64 = 10_000_000;

/// Execute a program. Pure in all arguments: identical arguments produce a
/// bit-identical [`RunResult`].
pub fn execute(
    program: &Program,
    input: &[Value],
    seed: ScheduleSeed,
    granularity: Granularity,
    plan: Option<&FaultPlan>,
    step_budget: u64,
) -> Result<RunResult, ExecError> {
    interp::run(program, input, seed, granularity, plan, step_budget, false)
        .map(|(result, _)| result)
}

/// Execute while counting dynamic executions of every static instruction.
pub fn execute_profiled(
    program: &Program,
    input: &[Value],
    seed: ScheduleSeed,
    granularity: Granularity,
    step_budget: u64,
) -> Result<(RunResult, SiteCounts), ExecError> {
    interp::run(program, input, seed, granularity, None, step_budget, true)
        .map(|(result, counts)| (result, counts.expect("profiled run returns counts")))
}

#[derive(Debug, Error)]
pub enum GoldenError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("golden seeds must be distinct")]
    DuplicateSeeds,
    #[error("fault-free run with seed {seed} ended {outcome}; benchmark bug")]
    NotNormal { seed: u64, outcome: Outcome },
}

/// Run `seeds.len()` fault-free profiling executions. Every run must end
/// `Normal`; anything else means the benchmark itself is broken.
pub fn golden_runs(
    program: &Program,
    input: &[Value],
    seeds: &[u64],
    granularity: Granularity,
    step_budget: u64,
) -> Result<Vec<TraceFile>, GoldenError> {
    for (i, s) in seeds.iter().enumerate() {
        if seeds[..i].contains(s) {
            return Err(GoldenError::DuplicateSeeds);
        }
    }
    let results = crate::batch::map_indexed(seeds.len(), |i| {
        execute(
            program,
            input,
            ScheduleSeed(seeds[i]),
            granularity,
            None,
            step_budget,
        )
    });
    let mut traces = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        let r = r?;
        if r.outcome != Outcome::Normal {
            return Err(GoldenError::NotNormal {
                seed: seeds[i],
                outcome: r.outcome,
            });
        }
        traces.push(r.trace);
    }
    Ok(traces)
}

/// Step budget for a configuration: `multiplier ×` the steps of the
/// fault-free seed-0 run.
pub fn default_step_budget(
    program: &Program,
    input: &[Value],
    granularity: Granularity,
    multiplier: u64,
) -> Result<u64, ExecError> {
    let r = execute(
        program,
        input,
        ScheduleSeed(0),
        granularity,
        None,
        FALLBACK_STEP_BUDGET,
    )?;
    Ok(r.steps.saturating_mul(multiplier).max(1))
}
