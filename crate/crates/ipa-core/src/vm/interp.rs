//! The execution engine: one sequential loop simulating logical threads.
//!
//! At every instruction boundary the scheduler draws uniformly among the
//! runnable threads from the seeded generator, so a run is a pure function
//! of `(program, input, seed, plan, granularity, budget)`. Blocked threads
//! (lock, semaphore, join) are excluded from the draw and re-execute their
//! blocking instruction once the condition holds.

use crate::injector::{site_compatible, FaultPlan, FaultType};
use crate::rng::SplitMix64;
use crate::trace::{Declaration, ProgramPoint, TraceFile, TraceSample};
use crate::value::{canon_f64, Value, VarType};

use super::{
    ArithOp, CmpOp, ExecError, Granularity, Insn, Operand, Outcome, Program, Reg, RunResult,
    ScheduleSeed, SiteCounts, TrapReason,
};

/// Hard cap on one allocation; keeps corrupted sizes from exhausting host
/// memory while leaving plenty of room for benchmark data.
const MAX_ALLOC_CELLS: i64 = 1 << 20;
/// Call depth cap; corrupted recursion traps instead of growing unboundedly.
const MAX_CALL_DEPTH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
enum RegValue {
    I64(i64),
    F64(f64),
    Bool(bool),
    Handle(u64),
    Thread(u64),
}

fn flip_bits(v: RegValue, bit: u8) -> RegValue {
    let bit = bit % 64;
    match v {
        RegValue::I64(x) => RegValue::I64(x ^ (1i64 << bit)),
        RegValue::F64(x) => RegValue::F64(f64::from_bits(x.to_bits() ^ (1u64 << bit))),
        RegValue::Bool(b) => RegValue::Bool(!b),
        RegValue::Handle(h) => RegValue::Handle(h ^ (1u64 << bit)),
        RegValue::Thread(t) => RegValue::Thread(t),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TState {
    Ready,
    BlockedLock(usize),
    BlockedSem(usize),
    BlockedJoin(u64),
    Done,
}

struct Frame {
    func: usize,
    block: usize,
    insn: usize,
    regs: Vec<Option<RegValue>>,
    nonce: u64,
    /// Caller register that receives the return value.
    ret_dst: Option<Reg>,
    /// Bit to flip in the returned value (call-result data corruption).
    corrupt_result: Option<u8>,
}

struct Thread {
    frames: Vec<Frame>,
    state: TState,
    nonce_next: u64,
    started: bool,
}

struct ResolvedPlan {
    fault: FaultType,
    func: usize,
    block: usize,
    insn: usize,
    ordinal: u64,
    bit_index: u8,
    size_delta: u64,
    arg_index: usize,
    seen: u64,
}

impl ResolvedPlan {
    fn at(&self, fi: usize, bi: usize, ii: usize) -> bool {
        self.func == fi && self.block == bi && self.insn == ii
    }

    /// Count one completed execution of the site instruction and report
    /// whether the one-shot perturbation fires now.
    fn tick(&mut self, fi: usize, bi: usize, ii: usize) -> bool {
        if !self.at(fi, bi, ii) {
            return false;
        }
        self.seen += 1;
        self.seen == self.ordinal
    }
}

struct Interp<'a> {
    program: &'a Program,
    granularity: Granularity,
    threads: Vec<Thread>,
    heap: Vec<Vec<RegValue>>,
    mutexes: Vec<Option<u64>>,
    sems: Vec<i64>,
    io_in: Vec<u8>,
    io_pos: usize,
    io_out: Vec<u8>,
    output: Vec<Value>,
    trace: TraceFile,
    plan: Option<ResolvedPlan>,
    activated: bool,
    counts: Option<Vec<u64>>,
    flat_base: Vec<Vec<usize>>,
}

/// Declarations for every traced point, in canonical program order. The
/// entry function is not traced: its arguments are the harness input, the
/// analogue of an untraceable argv.
pub(super) fn build_declarations(p: &Program, granularity: Granularity) -> Vec<Declaration> {
    let mut decls = Vec::new();
    for (fi, f) in p.functions.iter().enumerate() {
        if fi == p.entry {
            continue;
        }
        let params: Vec<(String, VarType)> = f.params.clone();
        if !params.is_empty() {
            decls.push(Declaration {
                point: ProgramPoint::entry(&f.name),
                vars: params.clone(),
            });
        }
        if !params.is_empty() || f.ret.is_some() {
            let mut vars = params.clone();
            if let Some(rt) = f.ret {
                vars.push(("return".to_string(), rt));
            }
            decls.push(Declaration {
                point: ProgramPoint::exit(&f.name),
                vars,
            });
        }
        if granularity == Granularity::BasicBlock && !params.is_empty() {
            for b in &f.blocks {
                decls.push(Declaration {
                    point: ProgramPoint::block(&f.name, &b.label),
                    vars: params.clone(),
                });
            }
        }
    }
    decls
}

pub(super) fn run(
    program: &Program,
    input: &[Value],
    seed: ScheduleSeed,
    granularity: Granularity,
    plan: Option<&FaultPlan>,
    step_budget: u64,
    count_sites: bool,
) -> Result<(RunResult, Option<SiteCounts>), ExecError> {
    // resolve and validate the plan first
    let resolved = match plan {
        None => None,
        Some(p) => {
            p.validate().map_err(|e| ExecError::BadPlan(e.to_string()))?;
            let fi = program
                .function_index(&p.site.function)
                .ok_or_else(|| ExecError::BadPlan(format!("unknown function `{}`", p.site.function)))?;
            let bi = program.functions[fi]
                .block_index(&p.site.block)
                .ok_or_else(|| ExecError::BadPlan(format!("unknown block `{}`", p.site.block)))?;
            let insn = program.functions[fi].blocks[bi]
                .insns
                .get(p.site.insn_index)
                .ok_or_else(|| ExecError::BadPlan("instruction index out of range".to_string()))?;
            if !site_compatible(program, fi, insn, p.fault_type) {
                return Err(ExecError::BadPlan(format!(
                    "site is not compatible with {}",
                    p.fault_type.name()
                )));
            }
            Some(ResolvedPlan {
                fault: p.fault_type,
                func: fi,
                block: bi,
                insn: p.site.insn_index,
                ordinal: p.site.ordinal.max(1),
                bit_index: p.bit_index.unwrap_or(0),
                size_delta: p.size_delta.unwrap_or(0),
                arg_index: p.arg_index.unwrap_or(0),
                seen: 0,
            })
        }
    };

    // bind entry arguments
    let entry = program.entry_function();
    if entry.params.len() != input.len() {
        return Err(ExecError::ArityMismatch {
            expected: entry.params.len(),
            got: input.len(),
        });
    }
    let mut heap: Vec<Vec<RegValue>> = Vec::new();
    let mut io_in: Vec<u8> = Vec::new();
    for v in input {
        if let Value::I64Array(xs) = v {
            io_in.extend(xs.iter().map(|x| (*x & 0xFF) as u8));
        }
    }
    let mut regs: Vec<Option<RegValue>> = vec![None; entry.regs.len()];
    for (i, ((pname, pty), v)) in entry.params.iter().zip(input).enumerate() {
        let rv = match (pty, v) {
            (VarType::I64, Value::I64(x)) => RegValue::I64(*x),
            (VarType::F64, Value::F64(x)) => RegValue::F64(canon_f64(*x)),
            (VarType::Bool, Value::Bool(b)) => RegValue::Bool(*b),
            (VarType::I64Array, Value::I64Array(xs)) => {
                heap.push(xs.iter().map(|x| RegValue::I64(*x)).collect());
                RegValue::Handle((heap.len() - 1) as u64)
            }
            (VarType::F64Array, Value::F64Array(xs)) => {
                heap.push(xs.iter().map(|x| RegValue::F64(canon_f64(*x))).collect());
                RegValue::Handle((heap.len() - 1) as u64)
            }
            _ => {
                return Err(ExecError::InputType {
                    param: pname.clone(),
                    expected: *pty,
                })
            }
        };
        regs[i] = Some(rv);
    }

    // flat instruction index bases for occurrence counting
    let mut flat_base = Vec::with_capacity(program.functions.len());
    let mut acc = 0usize;
    for f in &program.functions {
        let mut per_block = Vec::with_capacity(f.blocks.len());
        for b in &f.blocks {
            per_block.push(acc);
            acc += b.insns.len();
        }
        flat_base.push(per_block);
    }

    let mut interp = Interp {
        program,
        granularity,
        threads: vec![Thread {
            frames: vec![Frame {
                func: program.entry,
                block: 0,
                insn: 0,
                regs,
                nonce: 0,
                ret_dst: None,
                corrupt_result: None,
            }],
            state: TState::Ready,
            nonce_next: 1,
            started: false,
        }],
        heap,
        mutexes: vec![None; program.mutex_names.len()],
        sems: vec![0; program.sem_names.len()],
        io_in,
        io_pos: 0,
        io_out: Vec::new(),
        output: Vec::new(),
        trace: TraceFile {
            declarations: build_declarations(program, granularity),
            samples: Vec::new(),
        },
        plan: resolved,
        activated: false,
        counts: if count_sites {
            Some(vec![0; program.total_insns()])
        } else {
            None
        },
        flat_base,
    };

    let mut rng = SplitMix64::new(seed.0);
    let mut steps: u64 = 0;
    let outcome = loop {
        if steps == step_budget {
            break Outcome::Timeout;
        }
        if interp.threads.iter().all(|t| t.state == TState::Done) {
            break Outcome::Normal;
        }
        let runnable: Vec<usize> = (0..interp.threads.len())
            .filter(|&i| interp.can_step(i))
            .collect();
        if runnable.is_empty() {
            break Outcome::Trap(TrapReason::Deadlock);
        }
        let tid = runnable[rng.below(runnable.len() as u64) as usize];
        steps += 1;
        if let Err(reason) = interp.step(tid) {
            break Outcome::Trap(reason);
        }
    };

    let result = RunResult {
        trace: interp.trace,
        output: interp.output,
        outcome,
        steps,
        activated: interp.activated,
    };
    let counts = interp.counts.map(|counts| SiteCounts { counts });
    Ok((result, counts))
}

impl<'a> Interp<'a> {
    fn can_step(&self, tid: usize) -> bool {
        match self.threads[tid].state {
            TState::Ready => true,
            TState::BlockedLock(m) => self.mutexes[m].is_none(),
            TState::BlockedSem(s) => self.sems[s] > 0,
            TState::BlockedJoin(t) => {
                (t as usize) < self.threads.len() && self.threads[t as usize].state == TState::Done
            }
            TState::Done => false,
        }
    }

    fn count_completion(&mut self, fi: usize, bi: usize, ii: usize) {
        if let Some(c) = &mut self.counts {
            c[self.flat_base[fi][bi] + ii] += 1;
        }
    }

    /// One-shot fault hook: counts the completed occurrence and reports
    /// whether this execution is the planned one.
    fn plan_fires(&mut self, fault: FaultType, fi: usize, bi: usize, ii: usize) -> bool {
        match &mut self.plan {
            Some(p) if p.fault == fault => {
                if p.tick(fi, bi, ii) {
                    self.activated = true;
                    true
                } else {
                    false
                }
            }
            _ => false,
        }
    }

    fn is_fake_lock_site(&self, fi: usize, bi: usize, ii: usize) -> bool {
        matches!(&self.plan, Some(p) if p.fault == FaultType::RaceCondition && p.at(fi, bi, ii))
    }

    fn eval(&self, frame: &Frame, op: Operand) -> Result<RegValue, TrapReason> {
        match op {
            Operand::Reg(r) => frame.regs[r as usize].ok_or(TrapReason::UninitRegister),
            Operand::ImmI(v) => Ok(RegValue::I64(v)),
            Operand::ImmF(v) => Ok(RegValue::F64(v)),
            Operand::ImmB(v) => Ok(RegValue::Bool(v)),
        }
    }

    fn arith(op: ArithOp, a: RegValue, b: RegValue) -> Result<RegValue, TrapReason> {
        match (a, b) {
            (RegValue::I64(x), RegValue::I64(y)) => Ok(RegValue::I64(match op {
                ArithOp::Add => x.wrapping_add(y),
                ArithOp::Sub => x.wrapping_sub(y),
                ArithOp::Mul => x.wrapping_mul(y),
                ArithOp::Div => {
                    if y == 0 || (x == i64::MIN && y == -1) {
                        return Err(TrapReason::DivByZero);
                    }
                    x / y
                }
            })),
            (RegValue::F64(x), RegValue::F64(y)) => Ok(RegValue::F64(match op {
                ArithOp::Add => x + y,
                ArithOp::Sub => x - y,
                ArithOp::Mul => x * y,
                ArithOp::Div => x / y,
            })),
            _ => Err(TrapReason::TypeError),
        }
    }

    fn compare(op: CmpOp, a: RegValue, b: RegValue) -> Result<bool, TrapReason> {
        let eq_only = |eq: bool| match op {
            CmpOp::Eq => Ok(eq),
            CmpOp::Ne => Ok(!eq),
            _ => Err(TrapReason::TypeError),
        };
        match (a, b) {
            (RegValue::I64(x), RegValue::I64(y)) => Ok(match op {
                CmpOp::Lt => x < y,
                CmpOp::Le => x <= y,
                CmpOp::Eq => x == y,
                CmpOp::Ne => x != y,
                CmpOp::Gt => x > y,
                CmpOp::Ge => x >= y,
            }),
            (RegValue::F64(x), RegValue::F64(y)) => Ok(match op {
                // IEEE semantics: comparisons with NaN are false, Ne is true
                CmpOp::Lt => x < y,
                CmpOp::Le => x <= y,
                CmpOp::Eq => x == y,
                CmpOp::Ne => x != y,
                CmpOp::Gt => x > y,
                CmpOp::Ge => x >= y,
            }),
            (RegValue::Bool(x), RegValue::Bool(y)) => eq_only(x == y),
            (RegValue::Handle(x), RegValue::Handle(y)) => eq_only(x == y),
            (RegValue::Thread(x), RegValue::Thread(y)) => eq_only(x == y),
            _ => Err(TrapReason::TypeError),
        }
    }

    fn snapshot_array(&self, handle: u64, ty: VarType) -> Value {
        let cells = match self.heap.get(handle as usize) {
            Some(c) => c,
            // dangling handles snapshot as empty rather than trapping the tracer
            None => return if ty == VarType::F64Array { Value::F64Array(vec![]) } else { Value::I64Array(vec![]) },
        };
        if ty == VarType::F64Array {
            Value::F64Array(
                cells
                    .iter()
                    .map(|c| match c {
                        RegValue::F64(x) => canon_f64(*x),
                        RegValue::I64(x) => *x as f64,
                        RegValue::Bool(b) => u8::from(*b) as f64,
                        RegValue::Handle(h) => *h as f64,
                        RegValue::Thread(t) => *t as f64,
                    })
                    .collect(),
            )
        } else {
            Value::I64Array(
                cells
                    .iter()
                    .map(|c| match c {
                        RegValue::I64(x) => *x,
                        RegValue::F64(x) => *x as i64,
                        RegValue::Bool(b) => i64::from(*b),
                        RegValue::Handle(h) => *h as i64,
                        RegValue::Thread(t) => *t as i64,
                    })
                    .collect(),
            )
        }
    }

    fn coerce_traced(&self, v: Option<RegValue>, ty: VarType) -> Value {
        let v = match v {
            Some(v) => v,
            None => {
                return match ty {
                    VarType::I64 => Value::I64(0),
                    VarType::F64 => Value::F64(0.0),
                    VarType::Bool => Value::Bool(false),
                    VarType::I64Array => Value::I64Array(vec![]),
                    VarType::F64Array => Value::F64Array(vec![]),
                }
            }
        };
        match ty {
            VarType::I64 => Value::I64(match v {
                RegValue::I64(x) => x,
                RegValue::F64(x) => x as i64,
                RegValue::Bool(b) => i64::from(b),
                RegValue::Handle(h) => h as i64,
                RegValue::Thread(t) => t as i64,
            }),
            VarType::F64 => Value::f64(match v {
                RegValue::F64(x) => x,
                RegValue::I64(x) => x as f64,
                RegValue::Bool(b) => u8::from(b) as f64,
                RegValue::Handle(h) => h as f64,
                RegValue::Thread(t) => t as f64,
            }),
            VarType::Bool => Value::Bool(match v {
                RegValue::Bool(b) => b,
                RegValue::I64(x) => x != 0,
                RegValue::F64(x) => x != 0.0,
                RegValue::Handle(h) => h != 0,
                RegValue::Thread(t) => t != 0,
            }),
            VarType::I64Array | VarType::F64Array => match v {
                RegValue::Handle(h) => self.snapshot_array(h, ty),
                _ => {
                    if ty == VarType::F64Array {
                        Value::F64Array(vec![])
                    } else {
                        Value::I64Array(vec![])
                    }
                }
            },
        }
    }

    fn fn_traced(&self, fi: usize) -> bool {
        fi != self.program.entry
    }

    fn emit_enter(&mut self, tid: usize) {
        let frame = self.threads[tid].frames.last().unwrap();
        let fi = frame.func;
        if !self.fn_traced(fi) || self.program.functions[fi].params.is_empty() {
            return;
        }
        let f = &self.program.functions[fi];
        let bindings: Vec<(String, Value)> = f
            .params
            .iter()
            .enumerate()
            .map(|(i, (name, ty))| (name.clone(), self.coerce_traced(frame.regs[i], *ty)))
            .collect();
        let seq = self.trace.samples.len();
        self.trace.samples.push(TraceSample {
            point: ProgramPoint::entry(&f.name),
            nonce: frame.nonce,
            thread_id: tid as u64,
            bindings,
            seq,
        });
    }

    fn emit_exit(&mut self, tid: usize, ret: Option<RegValue>) {
        let frame = self.threads[tid].frames.last().unwrap();
        let fi = frame.func;
        let f = &self.program.functions[fi];
        if !self.fn_traced(fi) || (f.params.is_empty() && f.ret.is_none()) {
            return;
        }
        let mut bindings: Vec<(String, Value)> = f
            .params
            .iter()
            .enumerate()
            .map(|(i, (name, ty))| (name.clone(), self.coerce_traced(frame.regs[i], *ty)))
            .collect();
        if let Some(rt) = f.ret {
            bindings.push(("return".to_string(), self.coerce_traced(ret, rt)));
        }
        let seq = self.trace.samples.len();
        self.trace.samples.push(TraceSample {
            point: ProgramPoint::exit(&f.name),
            nonce: frame.nonce,
            thread_id: tid as u64,
            bindings,
            seq,
        });
    }

    fn emit_block(&mut self, tid: usize) {
        if self.granularity != Granularity::BasicBlock {
            return;
        }
        let frame = self.threads[tid].frames.last().unwrap();
        let fi = frame.func;
        let f = &self.program.functions[fi];
        if !self.fn_traced(fi) || f.params.is_empty() {
            return;
        }
        let label = f.blocks[frame.block].label.clone();
        let bindings: Vec<(String, Value)> = f
            .params
            .iter()
            .enumerate()
            .map(|(i, (name, ty))| (name.clone(), self.coerce_traced(frame.regs[i], *ty)))
            .collect();
        let seq = self.trace.samples.len();
        self.trace.samples.push(TraceSample {
            point: ProgramPoint::block(&f.name, label),
            nonce: frame.nonce,
            thread_id: tid as u64,
            bindings,
            seq,
        });
    }

    fn alloc_cells(&mut self, size: i64) -> Result<u64, TrapReason> {
        if size < 0 || size > MAX_ALLOC_CELLS {
            return Err(TrapReason::InvalidAllocSize);
        }
        self.heap.push(vec![RegValue::I64(0); size as usize]);
        Ok((self.heap.len() - 1) as u64)
    }

    fn heap_slot(&self, addr: RegValue, index: RegValue) -> Result<(usize, usize), TrapReason> {
        let h = match addr {
            RegValue::Handle(h) => h,
            _ => return Err(TrapReason::TypeError),
        };
        let i = match index {
            RegValue::I64(i) => i,
            _ => return Err(TrapReason::TypeError),
        };
        let cells = self
            .heap
            .get(h as usize)
            .ok_or(TrapReason::InvalidAddress)?;
        if i < 0 || i as usize >= cells.len() {
            return Err(TrapReason::OutOfBounds);
        }
        Ok((h as usize, i as usize))
    }

    fn step(&mut self, tid: usize) -> Result<(), TrapReason> {
        if !self.threads[tid].started {
            self.threads[tid].started = true;
            self.emit_enter(tid);
            self.emit_block(tid);
        }
        self.threads[tid].state = TState::Ready;

        let (fi, bi, ii, insn) = {
            let frame = self.threads[tid].frames.last().unwrap();
            let insn =
                self.program.functions[frame.func].blocks[frame.block].insns[frame.insn].clone();
            (frame.func, frame.block, frame.insn, insn)
        };

        macro_rules! frame_mut {
            () => {
                self.threads[tid].frames.last_mut().unwrap()
            };
        }
        macro_rules! frame_ref {
            () => {
                self.threads[tid].frames.last().unwrap()
            };
        }

        match insn {
            Insn::Const { dst, imm } => {
                let mut v = self.eval(frame_ref!(), imm)?;
                if self.plan_fires(FaultType::DataCorruption, fi, bi, ii) {
                    v = flip_bits(v, self.plan.as_ref().unwrap().bit_index);
                }
                frame_mut!().regs[dst as usize] = Some(v);
            }
            Insn::Mov { dst, src } => {
                let v = self.eval(frame_ref!(), src)?;
                frame_mut!().regs[dst as usize] = Some(v);
            }
            Insn::Arith { op, dst, a, b } => {
                let va = self.eval(frame_ref!(), a)?;
                let vb = self.eval(frame_ref!(), b)?;
                let mut v = Self::arith(op, va, vb)?;
                if self.plan_fires(FaultType::DataCorruption, fi, bi, ii) {
                    v = flip_bits(v, self.plan.as_ref().unwrap().bit_index);
                }
                frame_mut!().regs[dst as usize] = Some(v);
            }
            Insn::Cmp { op, dst, a, b } => {
                let va = self.eval(frame_ref!(), a)?;
                let vb = self.eval(frame_ref!(), b)?;
                let mut v = RegValue::Bool(Self::compare(op, va, vb)?);
                if self.plan_fires(FaultType::DataCorruption, fi, bi, ii) {
                    v = flip_bits(v, self.plan.as_ref().unwrap().bit_index);
                }
                frame_mut!().regs[dst as usize] = Some(v);
            }
            Insn::Br { target } => {
                self.count_completion(fi, bi, ii);
                let f = frame_mut!();
                f.block = target;
                f.insn = 0;
                self.emit_block(tid);
                return Ok(());
            }
            Insn::BrCond {
                cond,
                then_target,
                else_target,
            } => {
                let c = match self.eval(frame_ref!(), cond)? {
                    RegValue::Bool(b) => b,
                    _ => return Err(TrapReason::TypeError),
                };
                self.count_completion(fi, bi, ii);
                let target = if c { then_target } else { else_target };
                let f = frame_mut!();
                f.block = target;
                f.insn = 0;
                self.emit_block(tid);
                return Ok(());
            }
            Insn::Call { dst, func, args } => {
                if self.threads[tid].frames.len() >= MAX_CALL_DEPTH {
                    return Err(TrapReason::StackOverflow);
                }
                let mut vals = Vec::with_capacity(args.len());
                for a in &args {
                    vals.push(self.eval(frame_ref!(), *a)?);
                }
                if self.plan_fires(FaultType::FunctionCallCorruption, fi, bi, ii) {
                    let p = self.plan.as_ref().unwrap();
                    let k = p.arg_index % vals.len().max(1);
                    if !vals.is_empty() {
                        vals[k] = flip_bits(vals[k], p.bit_index);
                    }
                }
                // one-shot data corruption of the call result binds at return
                let corrupt_result = match &mut self.plan {
                    Some(p) if p.fault == FaultType::DataCorruption && p.at(fi, bi, ii) => {
                        p.seen += 1;
                        (p.seen == p.ordinal).then_some(p.bit_index)
                    }
                    _ => None,
                };
                self.count_completion(fi, bi, ii);
                self.bind_and_push(tid, func, &vals, dst, corrupt_result)?;
                frame_advance_caller(self, tid);
                self.emit_enter(tid);
                self.emit_block(tid);
                return Ok(());
            }
            Insn::Ret { value } => {
                let ret = match value {
                    Some(op) => Some(self.eval(frame_ref!(), op)?),
                    None => None,
                };
                self.count_completion(fi, bi, ii);
                self.emit_exit(tid, ret);
                let popped = self.threads[tid].frames.pop().unwrap();
                if self.threads[tid].frames.is_empty() {
                    self.threads[tid].state = TState::Done;
                } else if let Some(dst) = popped.ret_dst {
                    let mut v = ret.ok_or(TrapReason::TypeError)?;
                    if let Some(bit) = popped.corrupt_result {
                        v = flip_bits(v, bit);
                        self.activated = true;
                    }
                    self.threads[tid].frames.last_mut().unwrap().regs[dst as usize] = Some(v);
                }
                return Ok(());
            }
            Insn::Alloc { dst, size } => {
                let mut sz = match self.eval(frame_ref!(), size)? {
                    RegValue::I64(s) => s,
                    _ => return Err(TrapReason::TypeError),
                };
                if self.plan_fires(FaultType::BufferOverflowMalloc, fi, bi, ii) {
                    let d = self.plan.as_ref().unwrap().size_delta as i64;
                    sz = (sz - d).max(0);
                }
                let mut handle = self.alloc_cells(sz)?;
                if self.plan_fires(FaultType::InvalidPointer, fi, bi, ii) {
                    let bit = self.plan.as_ref().unwrap().bit_index % 64;
                    handle ^= 1u64 << bit;
                }
                frame_mut!().regs[dst as usize] = Some(RegValue::Handle(handle));
            }
            Insn::Load { dst, addr, index } => {
                let va = self.eval(frame_ref!(), addr)?;
                let vi = self.eval(frame_ref!(), index)?;
                let (h, i) = self.heap_slot(va, vi)?;
                let mut v = self.heap[h][i];
                if self.plan_fires(FaultType::DataCorruption, fi, bi, ii) {
                    v = flip_bits(v, self.plan.as_ref().unwrap().bit_index);
                }
                frame_mut!().regs[dst as usize] = Some(v);
            }
            Insn::Store { addr, index, value } => {
                let va = self.eval(frame_ref!(), addr)?;
                let vi = self.eval(frame_ref!(), index)?;
                let vv = self.eval(frame_ref!(), value)?;
                let (h, i) = self.heap_slot(va, vi)?;
                self.heap[h][i] = vv;
            }
            Insn::Lock { mutex } => {
                if self.is_fake_lock_site(fi, bi, ii) {
                    // run-wide fake mutex: acquisition is skipped entirely
                    self.activated = true;
                    self.count_completion(fi, bi, ii);
                } else if self.mutexes[mutex].is_none() {
                    self.mutexes[mutex] = Some(tid as u64);
                    self.count_completion(fi, bi, ii);
                } else {
                    self.threads[tid].state = TState::BlockedLock(mutex);
                    return Ok(());
                }
            }
            Insn::Unlock { mutex } => {
                // only the owner releases; unlocking a mutex we do not hold
                // is a no-op (the fake-mutex path relies on this)
                if self.mutexes[mutex] == Some(tid as u64) {
                    self.mutexes[mutex] = None;
                }
            }
            Insn::SemWait { sem } => {
                if self.sems[sem] > 0 {
                    self.sems[sem] -= 1;
                    self.count_completion(fi, bi, ii);
                } else {
                    self.threads[tid].state = TState::BlockedSem(sem);
                    return Ok(());
                }
            }
            Insn::SemPost { sem } => {
                self.sems[sem] += 1;
            }
            Insn::Spawn { dst, func, args } => {
                let mut vals = Vec::with_capacity(args.len());
                for a in &args {
                    vals.push(self.eval(frame_ref!(), *a)?);
                }
                self.count_completion(fi, bi, ii);
                let new_tid = self.threads.len() as u64;
                let regs = self.bind_params(func, &vals)?;
                self.threads.push(Thread {
                    frames: vec![Frame {
                        func,
                        block: 0,
                        insn: 0,
                        regs,
                        nonce: 0,
                        ret_dst: None,
                        corrupt_result: None,
                    }],
                    state: TState::Ready,
                    nonce_next: 1,
                    started: false,
                });
                frame_mut!().regs[dst as usize] = Some(RegValue::Thread(new_tid));
            }
            Insn::Join { thread } => {
                let t = match self.eval(frame_ref!(), thread)? {
                    RegValue::Thread(t) => t,
                    _ => return Err(TrapReason::TypeError),
                };
                if (t as usize) >= self.threads.len() {
                    return Err(TrapReason::TypeError);
                }
                if self.threads[t as usize].state == TState::Done {
                    self.count_completion(fi, bi, ii);
                } else {
                    self.threads[tid].state = TState::BlockedJoin(t);
                    return Ok(());
                }
            }
            Insn::IoRead { buf, size } => {
                let vb = self.eval(frame_ref!(), buf)?;
                let vs = self.eval(frame_ref!(), size)?;
                let mut sz = match vs {
                    RegValue::I64(s) => s,
                    _ => return Err(TrapReason::TypeError),
                };
                if self.plan_fires(FaultType::FileIoBufferOverflow, fi, bi, ii) {
                    sz = sz.wrapping_add(self.plan.as_ref().unwrap().size_delta as i64);
                }
                let h = match vb {
                    RegValue::Handle(h) => h as usize,
                    _ => return Err(TrapReason::TypeError),
                };
                let len = self.heap.get(h).ok_or(TrapReason::InvalidAddress)?.len();
                if sz < 0 || sz as usize > len {
                    return Err(TrapReason::OutOfBounds);
                }
                let avail = self.io_in.len() - self.io_pos;
                let k = (sz as usize).min(avail);
                for j in 0..k {
                    self.heap[h][j] = RegValue::I64(self.io_in[self.io_pos + j] as i64);
                }
                self.io_pos += k;
            }
            Insn::IoWrite { buf, size } => {
                let vb = self.eval(frame_ref!(), buf)?;
                let vs = self.eval(frame_ref!(), size)?;
                let mut sz = match vs {
                    RegValue::I64(s) => s,
                    _ => return Err(TrapReason::TypeError),
                };
                if self.plan_fires(FaultType::FileIoBufferOverflow, fi, bi, ii) {
                    sz = sz.wrapping_add(self.plan.as_ref().unwrap().size_delta as i64);
                }
                let h = match vb {
                    RegValue::Handle(h) => h as usize,
                    _ => return Err(TrapReason::TypeError),
                };
                let cells = self.heap.get(h).ok_or(TrapReason::InvalidAddress)?;
                if sz < 0 || sz as usize > cells.len() {
                    return Err(TrapReason::OutOfBounds);
                }
                for j in 0..sz as usize {
                    let byte = match cells[j] {
                        RegValue::I64(x) => (x & 0xFF) as u8,
                        RegValue::F64(x) => (x as i64 & 0xFF) as u8,
                        RegValue::Bool(b) => u8::from(b),
                        RegValue::Handle(x) => (x & 0xFF) as u8,
                        RegValue::Thread(x) => (x & 0xFF) as u8,
                    };
                    self.io_out.push(byte);
                }
            }
            Insn::Output { value } => {
                let v = self.eval(frame_ref!(), value)?;
                let out = match v {
                    RegValue::I64(x) => Value::I64(x),
                    RegValue::F64(x) => Value::f64(x),
                    RegValue::Bool(b) => Value::Bool(b),
                    RegValue::Handle(h) => {
                        let ty = match self.heap.get(h as usize) {
                            Some(cells) if cells.iter().all(|c| matches!(c, RegValue::F64(_))) && !cells.is_empty() => {
                                VarType::F64Array
                            }
                            _ => VarType::I64Array,
                        };
                        self.snapshot_array(h, ty)
                    }
                    RegValue::Thread(t) => Value::I64(t as i64),
                };
                self.output.push(out);
            }
            Insn::Len { dst, arr } => {
                let v = self.eval(frame_ref!(), arr)?;
                let h = match v {
                    RegValue::Handle(h) => h,
                    _ => return Err(TrapReason::TypeError),
                };
                let len = self
                    .heap
                    .get(h as usize)
                    .ok_or(TrapReason::InvalidAddress)?
                    .len();
                let mut v = RegValue::I64(len as i64);
                if self.plan_fires(FaultType::DataCorruption, fi, bi, ii) {
                    v = flip_bits(v, self.plan.as_ref().unwrap().bit_index);
                }
                frame_mut!().regs[dst as usize] = Some(v);
            }
        }

        // plain instructions fall through here: count the completion (the
        // blocking ones counted themselves on success) and advance the pc
        match self.program.functions[fi].blocks[bi].insns[ii] {
            Insn::Lock { .. } | Insn::SemWait { .. } | Insn::Join { .. } | Insn::Spawn { .. } => {}
            _ => self.count_completion(fi, bi, ii),
        }
        self.threads[tid].frames.last_mut().unwrap().insn += 1;
        Ok(())
    }

    fn bind_params(
        &mut self,
        func: usize,
        vals: &[RegValue],
    ) -> Result<Vec<Option<RegValue>>, TrapReason> {
        let f = &self.program.functions[func];
        let mut regs: Vec<Option<RegValue>> = vec![None; f.regs.len()];
        for (i, ((_, ty), v)) in f.params.iter().zip(vals).enumerate() {
            let ok = matches!(
                (ty, v),
                (VarType::I64, RegValue::I64(_))
                    | (VarType::F64, RegValue::F64(_))
                    | (VarType::Bool, RegValue::Bool(_))
                    | (VarType::I64Array, RegValue::Handle(_))
                    | (VarType::F64Array, RegValue::Handle(_))
            );
            if !ok {
                return Err(TrapReason::TypeError);
            }
            regs[i] = Some(*v);
        }
        Ok(regs)
    }

    fn bind_and_push(
        &mut self,
        tid: usize,
        func: usize,
        vals: &[RegValue],
        ret_dst: Option<Reg>,
        corrupt_result: Option<u8>,
    ) -> Result<(), TrapReason> {
        let regs = self.bind_params(func, vals)?;
        let nonce = self.threads[tid].nonce_next;
        self.threads[tid].nonce_next += 1;
        self.threads[tid].frames.push(Frame {
            func,
            block: 0,
            insn: 0,
            regs,
            nonce,
            ret_dst,
            corrupt_result,
        });
        Ok(())
    }
}

/// Advance the caller's pc past the call before the callee starts.
fn frame_advance_caller(interp: &mut Interp, tid: usize) {
    let frames = &mut interp.threads[tid].frames;
    let n = frames.len();
    frames[n - 2].insn += 1;
}
