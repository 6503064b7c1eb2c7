//! Line-oriented assembly for the mini VM.
//!
//! ```text
//! @output multiset            ; optional, default sequence
//! func addChunk(env: i64[], x: i64) -> i64 {
//! entry:
//!   cmp_lt c, x, 0
//!   br_cond c, neg, body
//! neg:
//!   sub x, 0, x
//!   br body
//! body:
//!   lock m
//!   ...
//!   ret one
//! }
//! ```
//!
//! One instruction per line; `;` or `#` starts a comment. Every block ends
//! in `br`, `br_cond` or `ret`. Loading normalizes each function to a single
//! exit block and computes source metrics.

use std::collections::HashMap;

use thiserror::Error;

use crate::value::VarType;
use crate::vm::{
    ArithOp, Block, CmpOp, Function, Insn, Operand, OutputPolicy, Program, ProgramMetadata, Reg,
};

#[derive(Debug, Error)]
#[error("line {line}: {msg}")]
pub struct AsmError {
    pub line: usize,
    pub msg: String,
}

fn err(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError {
        line,
        msg: msg.into(),
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars().next().unwrap().is_ascii_alphabetic()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Raw (pre-resolution) instruction with names instead of indices.
enum RawInsn {
    Plain(Insn),
    Br { label: String },
    BrCond { cond: Operand, then_label: String, else_label: String },
    Call { dst: Option<Reg>, func: String, args: Vec<Operand> },
    Spawn { dst: Reg, func: String, args: Vec<Operand> },
    Lock { name: String },
    Unlock { name: String },
    SemWait { name: String },
    SemPost { name: String },
}

struct RawBlock {
    label: String,
    line: usize,
    insns: Vec<(usize, RawInsn)>,
}

struct RawFunction {
    name: String,
    params: Vec<(String, VarType)>,
    ret: Option<VarType>,
    blocks: Vec<RawBlock>,
    regs: Vec<String>,
}

struct FnParser {
    regs: Vec<String>,
    by_name: HashMap<String, Reg>,
}

impl FnParser {
    fn new(params: &[(String, VarType)]) -> FnParser {
        let mut p = FnParser {
            regs: Vec::new(),
            by_name: HashMap::new(),
        };
        for (name, _) in params {
            p.intern(name);
        }
        p
    }

    fn intern(&mut self, name: &str) -> Reg {
        if let Some(&r) = self.by_name.get(name) {
            return r;
        }
        let r = self.regs.len() as Reg;
        self.regs.push(name.to_string());
        self.by_name.insert(name.to_string(), r);
        r
    }

    fn operand(&mut self, tok: &str, line: usize) -> Result<Operand, AsmError> {
        let tok = tok.trim();
        if tok.is_empty() {
            return Err(err(line, "empty operand"));
        }
        if tok == "true" {
            return Ok(Operand::ImmB(true));
        }
        if tok == "false" {
            return Ok(Operand::ImmB(false));
        }
        if let Ok(v) = tok.parse::<i64>() {
            return Ok(Operand::ImmI(v));
        }
        if let Ok(v) = tok.parse::<f64>() {
            return Ok(Operand::ImmF(v));
        }
        if !is_ident(tok) {
            return Err(err(line, format!("bad operand `{}`", tok)));
        }
        Ok(Operand::Reg(self.intern(tok)))
    }

    fn dst(&mut self, tok: &str, line: usize) -> Result<Reg, AsmError> {
        let tok = tok.trim();
        if !is_ident(tok) {
            return Err(err(line, format!("destination must be a register, got `{}`", tok)));
        }
        Ok(self.intern(tok))
    }
}

fn parse_param(tok: &str, line: usize) -> Result<(String, VarType), AsmError> {
    let (name, ty) = tok
        .split_once(':')
        .ok_or_else(|| err(line, format!("bad parameter `{}`", tok)))?;
    let name = name.trim();
    let ty = ty.trim();
    if !is_ident(name) || name == "return" {
        return Err(err(line, format!("bad parameter name `{}`", name)));
    }
    let ty = VarType::parse(ty).ok_or_else(|| err(line, format!("unknown type `{}`", ty)))?;
    Ok((name.to_string(), ty))
}

fn parse_header(line_no: usize, text: &str) -> Result<RawFunction, AsmError> {
    // func name(p: ty, ...) [-> ty] {
    let rest = text.trim().strip_prefix("func ").ok_or_else(|| {
        err(line_no, "expected `func name(params) {` or a directive")
    })?;
    let rest = rest
        .strip_suffix('{')
        .ok_or_else(|| err(line_no, "function header must end with `{`"))?
        .trim();
    let open = rest
        .find('(')
        .ok_or_else(|| err(line_no, "missing `(` in function header"))?;
    let close = rest
        .rfind(')')
        .ok_or_else(|| err(line_no, "missing `)` in function header"))?;
    let name = rest[..open].trim();
    if !is_ident(name) {
        return Err(err(line_no, format!("bad function name `{}`", name)));
    }
    let params_text = &rest[open + 1..close];
    let mut params = Vec::new();
    if !params_text.trim().is_empty() {
        for tok in params_text.split(',') {
            let p = parse_param(tok.trim(), line_no)?;
            if params.iter().any(|(n, _): &(String, VarType)| n == &p.0) {
                return Err(err(line_no, format!("duplicate parameter `{}`", p.0)));
            }
            params.push(p);
        }
    }
    let after = rest[close + 1..].trim();
    let ret = if after.is_empty() {
        None
    } else if let Some(ty) = after.strip_prefix("->") {
        let ty = ty.trim();
        let ty = VarType::parse(ty).ok_or_else(|| err(line_no, format!("unknown return type `{}`", ty)))?;
        if ty.is_array() {
            return Err(err(line_no, "array return types are not supported"));
        }
        Some(ty)
    } else {
        return Err(err(line_no, format!("unexpected tokens `{}` in header", after)));
    };
    Ok(RawFunction {
        name: name.to_string(),
        params,
        ret,
        blocks: Vec::new(),
        regs: Vec::new(),
    })
}

fn parse_insn(p: &mut FnParser, line_no: usize, text: &str) -> Result<RawInsn, AsmError> {
    let (mnemonic, rest) = match text.split_once(char::is_whitespace) {
        Some((m, r)) => (m, r.trim()),
        None => (text, ""),
    };
    let ops: Vec<&str> = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',').map(|s| s.trim()).collect()
    };
    let want = |n: usize| -> Result<(), AsmError> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(err(line_no, format!("`{}` takes {} operands, got {}", mnemonic, n, ops.len())))
        }
    };

    let arith = |op: ArithOp, p: &mut FnParser| -> Result<RawInsn, AsmError> {
        if ops.len() != 3 {
            return Err(err(line_no, format!("`{}` takes 3 operands", mnemonic)));
        }
        Ok(RawInsn::Plain(Insn::Arith {
            op,
            dst: p.dst(ops[0], line_no)?,
            a: p.operand(ops[1], line_no)?,
            b: p.operand(ops[2], line_no)?,
        }))
    };
    let cmp = |op: CmpOp, p: &mut FnParser| -> Result<RawInsn, AsmError> {
        if ops.len() != 3 {
            return Err(err(line_no, format!("`{}` takes 3 operands", mnemonic)));
        }
        Ok(RawInsn::Plain(Insn::Cmp {
            op,
            dst: p.dst(ops[0], line_no)?,
            a: p.operand(ops[1], line_no)?,
            b: p.operand(ops[2], line_no)?,
        }))
    };

    match mnemonic {
        "const" => {
            want(2)?;
            let dst = p.dst(ops[0], line_no)?;
            let imm = p.operand(ops[1], line_no)?;
            if matches!(imm, Operand::Reg(_)) {
                return Err(err(line_no, "`const` needs an immediate operand"));
            }
            Ok(RawInsn::Plain(Insn::Const { dst, imm }))
        }
        "add" => arith(ArithOp::Add, p),
        "sub" => arith(ArithOp::Sub, p),
        "mul" => arith(ArithOp::Mul, p),
        "div" => arith(ArithOp::Div, p),
        "cmp_lt" => cmp(CmpOp::Lt, p),
        "cmp_le" => cmp(CmpOp::Le, p),
        "cmp_eq" => cmp(CmpOp::Eq, p),
        "cmp_ne" => cmp(CmpOp::Ne, p),
        "cmp_gt" => cmp(CmpOp::Gt, p),
        "cmp_ge" => cmp(CmpOp::Ge, p),
        "br" => {
            want(1)?;
            if !is_ident(ops[0]) {
                return Err(err(line_no, "bad branch label"));
            }
            Ok(RawInsn::Br {
                label: ops[0].to_string(),
            })
        }
        "br_cond" => {
            want(3)?;
            Ok(RawInsn::BrCond {
                cond: p.operand(ops[0], line_no)?,
                then_label: ops[1].to_string(),
                else_label: ops[2].to_string(),
            })
        }
        "call" | "spawn" => {
            if ops.len() < 2 {
                return Err(err(line_no, format!("`{}` takes dst, func[, args...]", mnemonic)));
            }
            let func = ops[1].to_string();
            if !is_ident(&func) {
                return Err(err(line_no, format!("bad callee `{}`", func)));
            }
            let mut args = Vec::new();
            for a in &ops[2..] {
                args.push(p.operand(a, line_no)?);
            }
            if mnemonic == "call" {
                let dst = if ops[0] == "_" {
                    None
                } else {
                    Some(p.dst(ops[0], line_no)?)
                };
                Ok(RawInsn::Call { dst, func, args })
            } else {
                Ok(RawInsn::Spawn {
                    dst: p.dst(ops[0], line_no)?,
                    func,
                    args,
                })
            }
        }
        "ret" => {
            if ops.len() > 1 {
                return Err(err(line_no, "`ret` takes at most one operand"));
            }
            let value = if ops.is_empty() {
                None
            } else {
                Some(p.operand(ops[0], line_no)?)
            };
            Ok(RawInsn::Plain(Insn::Ret { value }))
        }
        "alloc" => {
            want(2)?;
            Ok(RawInsn::Plain(Insn::Alloc {
                dst: p.dst(ops[0], line_no)?,
                size: p.operand(ops[1], line_no)?,
            }))
        }
        "load" => {
            want(3)?;
            Ok(RawInsn::Plain(Insn::Load {
                dst: p.dst(ops[0], line_no)?,
                addr: p.operand(ops[1], line_no)?,
                index: p.operand(ops[2], line_no)?,
            }))
        }
        "store" => {
            want(3)?;
            Ok(RawInsn::Plain(Insn::Store {
                addr: p.operand(ops[0], line_no)?,
                index: p.operand(ops[1], line_no)?,
                value: p.operand(ops[2], line_no)?,
            }))
        }
        "lock" | "unlock" | "sem_wait" | "sem_post" => {
            want(1)?;
            if !is_ident(ops[0]) {
                return Err(err(line_no, format!("bad sync object name `{}`", ops[0])));
            }
            let name = ops[0].to_string();
            Ok(match mnemonic {
                "lock" => RawInsn::Lock { name },
                "unlock" => RawInsn::Unlock { name },
                "sem_wait" => RawInsn::SemWait { name },
                _ => RawInsn::SemPost { name },
            })
        }
        "join" => {
            want(1)?;
            Ok(RawInsn::Plain(Insn::Join {
                thread: p.operand(ops[0], line_no)?,
            }))
        }
        "io_read" | "io_write" => {
            want(2)?;
            let buf = p.operand(ops[0], line_no)?;
            let size = p.operand(ops[1], line_no)?;
            Ok(RawInsn::Plain(if mnemonic == "io_read" {
                Insn::IoRead { buf, size }
            } else {
                Insn::IoWrite { buf, size }
            }))
        }
        "output" => {
            want(1)?;
            Ok(RawInsn::Plain(Insn::Output {
                value: p.operand(ops[0], line_no)?,
            }))
        }
        "len" => {
            want(2)?;
            Ok(RawInsn::Plain(Insn::Len {
                dst: p.dst(ops[0], line_no)?,
                arr: p.operand(ops[1], line_no)?,
            }))
        }
        other => Err(err(line_no, format!("unknown instruction `{}`", other))),
    }
}

fn strip_comment(line: &str) -> &str {
    let cut = line.find(|c| c == ';' || c == '#').unwrap_or(line.len());
    line[..cut].trim()
}

/// Parse, validate and normalize a program from assembly text.
pub fn load_program(name: &str, source: &str) -> Result<Program, AsmError> {
    let mut output_policy = OutputPolicy::Sequence;
    let mut raw_fns: Vec<RawFunction> = Vec::new();
    let mut current: Option<(RawFunction, FnParser)> = None;
    let mut insn_lines = 0usize;

    for (idx, raw_line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw_line);
        if line.is_empty() {
            continue;
        }
        match &mut current {
            None => {
                if let Some(rest) = line.strip_prefix("@output") {
                    match rest.trim() {
                        "multiset" => output_policy = OutputPolicy::Multiset,
                        "sequence" => output_policy = OutputPolicy::Sequence,
                        other => return Err(err(line_no, format!("unknown output policy `{}`", other))),
                    }
                    continue;
                }
                let f = parse_header(line_no, line)?;
                if raw_fns.iter().any(|g| g.name == f.name) {
                    return Err(err(line_no, format!("duplicate function `{}`", f.name)));
                }
                let parser = FnParser::new(&f.params);
                current = Some((f, parser));
            }
            Some((f, parser)) => {
                if line == "}" {
                    if f.blocks.is_empty() {
                        return Err(err(line_no, format!("function `{}` has an empty body", f.name)));
                    }
                    let (mut done, parser) = current.take().unwrap();
                    done.regs = parser.regs;
                    raw_fns.push(done);
                    continue;
                }
                if let Some(label) = line.strip_suffix(':') {
                    let label = label.trim();
                    if !is_ident(label) {
                        return Err(err(line_no, format!("bad block label `{}`", label)));
                    }
                    if f.blocks.iter().any(|b| b.label == label) {
                        return Err(err(line_no, format!("duplicate block label `{}`", label)));
                    }
                    f.blocks.push(RawBlock {
                        label: label.to_string(),
                        line: line_no,
                        insns: Vec::new(),
                    });
                    continue;
                }
                let block = f
                    .blocks
                    .last_mut()
                    .ok_or_else(|| err(line_no, "instruction before first block label"))?;
                let insn = parse_insn(parser, line_no, line)?;
                insn_lines += 1;
                block.insns.push((line_no, insn));
            }
        }
    }
    if current.is_some() {
        return Err(err(source.lines().count(), "unterminated function (missing `}`)"));
    }
    if raw_fns.is_empty() {
        return Err(err(1, "program has no functions"));
    }

    // global name tables
    let fn_index: HashMap<String, usize> = raw_fns
        .iter()
        .enumerate()
        .map(|(i, f)| (f.name.clone(), i))
        .collect();
    let mut mutex_names: Vec<String> = Vec::new();
    let mut sem_names: Vec<String> = Vec::new();
    let intern = |table: &mut Vec<String>, name: &str| -> usize {
        if let Some(i) = table.iter().position(|n| n == name) {
            i
        } else {
            table.push(name.to_string());
            table.len() - 1
        }
    };

    let mut functions = Vec::with_capacity(raw_fns.len());
    for rf in &raw_fns {
        let mut blocks = Vec::with_capacity(rf.blocks.len());
        let block_index: HashMap<&str, usize> = rf
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.label.as_str(), i))
            .collect();
        for rb in &rf.blocks {
            let mut insns = Vec::with_capacity(rb.insns.len());
            if rb.insns.is_empty() {
                return Err(err(rb.line, format!("block `{}` is empty", rb.label)));
            }
            for (k, (line_no, ri)) in rb.insns.iter().enumerate() {
                let resolve = |label: &str| -> Result<usize, AsmError> {
                    block_index
                        .get(label)
                        .copied()
                        .ok_or_else(|| err(*line_no, format!("unknown block label `{}`", label)))
                };
                let insn = match ri {
                    RawInsn::Plain(i) => i.clone(),
                    RawInsn::Br { label } => Insn::Br {
                        target: resolve(label)?,
                    },
                    RawInsn::BrCond {
                        cond,
                        then_label,
                        else_label,
                    } => Insn::BrCond {
                        cond: cond.clone(),
                        then_target: resolve(then_label)?,
                        else_target: resolve(else_label)?,
                    },
                    RawInsn::Call { dst, func, args } => {
                        let &fi = fn_index
                            .get(func)
                            .ok_or_else(|| err(*line_no, format!("unknown function `{}`", func)))?;
                        let callee = &raw_fns[fi];
                        if callee.params.len() != args.len() {
                            return Err(err(
                                *line_no,
                                format!(
                                    "`{}` takes {} args, got {}",
                                    func,
                                    callee.params.len(),
                                    args.len()
                                ),
                            ));
                        }
                        if callee.ret.is_some() != dst.is_some() {
                            return Err(err(
                                *line_no,
                                format!(
                                    "call dst mismatch: `{}` {} a value",
                                    func,
                                    if callee.ret.is_some() { "returns" } else { "does not return" }
                                ),
                            ));
                        }
                        Insn::Call {
                            dst: *dst,
                            func: fi,
                            args: args.clone(),
                        }
                    }
                    RawInsn::Spawn { dst, func, args } => {
                        let &fi = fn_index
                            .get(func)
                            .ok_or_else(|| err(*line_no, format!("unknown function `{}`", func)))?;
                        if raw_fns[fi].params.len() != args.len() {
                            return Err(err(
                                *line_no,
                                format!(
                                    "`{}` takes {} args, got {}",
                                    func,
                                    raw_fns[fi].params.len(),
                                    args.len()
                                ),
                            ));
                        }
                        Insn::Spawn {
                            dst: *dst,
                            func: fi,
                            args: args.clone(),
                        }
                    }
                    RawInsn::Lock { name } => Insn::Lock {
                        mutex: intern(&mut mutex_names, name),
                    },
                    RawInsn::Unlock { name } => Insn::Unlock {
                        mutex: intern(&mut mutex_names, name),
                    },
                    RawInsn::SemWait { name } => Insn::SemWait {
                        sem: intern(&mut sem_names, name),
                    },
                    RawInsn::SemPost { name } => Insn::SemPost {
                        sem: intern(&mut sem_names, name),
                    },
                };
                let is_terminator =
                    matches!(insn, Insn::Br { .. } | Insn::BrCond { .. } | Insn::Ret { .. });
                let last = k == rb.insns.len() - 1;
                if is_terminator != last {
                    return Err(err(
                        *line_no,
                        if last {
                            format!("block `{}` must end with br, br_cond or ret", rb.label)
                        } else {
                            format!("unreachable code after terminator in `{}`", rb.label)
                        },
                    ));
                }
                if let Insn::Ret { value } = &insn {
                    if value.is_some() != rf.ret.is_some() {
                        return Err(err(
                            *line_no,
                            format!(
                                "`ret` must {} a value in `{}`",
                                if rf.ret.is_some() { "carry" } else { "not carry" },
                                rf.name
                            ),
                        ));
                    }
                }
                insns.push(insn);
            }
            blocks.push(Block {
                label: rb.label.clone(),
                insns,
            });
        }
        functions.push(Function {
            name: rf.name.clone(),
            params: rf.params.clone(),
            ret: rf.ret,
            blocks,
            regs: rf.regs.clone(),
        });
    }

    let entry = fn_index
        .get("main")
        .copied()
        .ok_or_else(|| err(1, "program must define a `main` entry function"))?;

    for f in &mut functions {
        normalize_single_exit(f)?;
    }

    let metadata = ProgramMetadata {
        lines_of_code: insn_lines,
        statements: insn_lines,
        declarations: functions.iter().map(|f| f.params.len()).sum(),
        array_declarations: functions
            .iter()
            .flat_map(|f| &f.blocks)
            .flat_map(|b| &b.insns)
            .filter(|i| matches!(i, Insn::Alloc { .. }))
            .count(),
        branches: functions
            .iter()
            .flat_map(|f| &f.blocks)
            .flat_map(|b| &b.insns)
            .filter(|i| matches!(i, Insn::BrCond { .. }))
            .count(),
    };

    Ok(Program {
        name: name.to_string(),
        functions,
        entry,
        mutex_names,
        sem_names,
        metadata,
        output_policy,
    })
}

/// Rewrite a function so that exactly one block ends in `ret`. Multiple
/// returns are redirected through a synthesized `__exit` block via an
/// internal move into `__ret`.
fn normalize_single_exit(f: &mut Function) -> Result<(), AsmError> {
    let ret_blocks: Vec<usize> = f
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| matches!(b.insns.last(), Some(Insn::Ret { .. })))
        .map(|(i, _)| i)
        .collect();
    if ret_blocks.is_empty() {
        return Err(err(0, format!("function `{}` never returns", f.name)));
    }
    if ret_blocks.len() == 1 {
        return Ok(());
    }
    let ret_reg: Option<Reg> = if f.ret.is_some() {
        let r = f.regs.len() as Reg;
        f.regs.push("__ret".to_string());
        Some(r)
    } else {
        None
    };
    let exit_index = f.blocks.len();
    for bi in ret_blocks {
        let block = &mut f.blocks[bi];
        let Some(Insn::Ret { value }) = block.insns.pop() else {
            unreachable!()
        };
        if let (Some(r), Some(v)) = (ret_reg, value) {
            block.insns.push(Insn::Mov { dst: r, src: v });
        }
        block.insns.push(Insn::Br { target: exit_index });
    }
    f.blocks.push(Block {
        label: "__exit".to_string(),
        insns: vec![Insn::Ret {
            value: ret_reg.map(Operand::Reg),
        }],
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program_loads() {
        let src = "func main(n: i64) {\nentry:\n  output n\n  ret\n}\n";
        let p = load_program("t", src).unwrap();
        assert_eq!(p.functions.len(), 1);
        assert_eq!(p.metadata.lines_of_code, 2);
        assert_eq!(p.metadata.declarations, 1);
    }

    #[test]
    fn empty_body_is_an_error() {
        let src = "func main(n: i64) {\n}\n";
        assert!(load_program("t", src).is_err());
    }

    #[test]
    fn unknown_label_is_an_error() {
        let src = "func main(n: i64) {\nentry:\n  br nowhere\n}\n";
        let e = load_program("t", src).unwrap_err();
        assert!(e.msg.contains("nowhere"));
    }

    #[test]
    fn call_arity_checked() {
        let src = "func f(a: i64) -> i64 {\ne:\n  ret a\n}\nfunc main(n: i64) {\ne:\n  call r, f, n, n\n  ret\n}\n";
        assert!(load_program("t", src).is_err());
    }

    #[test]
    fn two_rets_normalize_to_one_exit() {
        let src = "func main(n: i64) -> i64 {\n\
                   entry:\n  cmp_lt c, n, 0\n  br_cond c, a, b\n\
                   a:\n  ret 0\n\
                   b:\n  ret 1\n}\n";
        let p = load_program("t", src).unwrap();
        let f = &p.functions[0];
        let rets = f
            .blocks
            .iter()
            .filter(|b| matches!(b.insns.last(), Some(Insn::Ret { .. })))
            .count();
        assert_eq!(rets, 1);
        assert_eq!(f.blocks.last().unwrap().label, "__exit");
    }
}
