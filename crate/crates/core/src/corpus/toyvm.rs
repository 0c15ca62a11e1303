//! Reference interpreter for the toy three-address assembly dialect.
//!
//! Eight signed 64-bit registers `r0`..`r7`, all zero at start, and a zero
//! flag set only by `cmp`. One instruction per line, `;` starts a comment,
//! `name:` defines a label.
//!
//! | instruction     | effect                                  |
//! |-----------------|-----------------------------------------|
//! | `mov rd, x`     | `rd = x`                                |
//! | `add rd, x`     | `rd = rd + x` (wrapping)                |
//! | `sub rd, x`     | `rd = rd - x` (wrapping)                |
//! | `mul rd, x`     | `rd = rd * x` (wrapping)                |
//! | `cmp ra, x`     | `zf = (ra == x)`                        |
//! | `jmp label`     | jump                                    |
//! | `jz label`      | jump when `zf` is set                   |
//! | `ret [x]`       | exit with `x mod 256` (`r0` by default) |
//!
//! `x` is a register or a decimal / `0x` hexadecimal immediate.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

pub const NUM_REGISTERS: usize = 8;
pub const DEFAULT_BUDGET: u64 = 100_000;
pub const MNEMONICS: [&str; 8] = ["mov", "add", "sub", "mul", "jmp", "jz", "cmp", "ret"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VmError {
    #[error("line {line}: unknown instruction {mnemonic:?}")]
    UnknownInstruction { line: usize, mnemonic: String },
    #[error("line {line}: bad operand {operand:?}")]
    BadOperand { line: usize, operand: String },
    #[error("line {line}: expected {expected} operand(s), found {found}")]
    Arity {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: undefined label {label:?}")]
    UndefinedLabel { line: usize, label: String },
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("instruction budget of {0} exhausted")]
    BudgetExceeded(u64),
    #[error("execution ran past the last instruction without ret")]
    FellOffEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Operand {
    Reg(usize),
    Imm(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Mov,
    Add,
    Sub,
    Mul,
    Cmp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Insn {
    Alu(Op, usize, Operand),
    Jmp(usize),
    Jz(usize),
    Ret(Operand),
}

fn parse_register(s: &str) -> Option<usize> {
    let n = s.strip_prefix('r')?;
    if n.len() != 1 {
        return None;
    }
    let idx = n.parse::<usize>().ok()?;
    (idx < NUM_REGISTERS).then_some(idx)
}

fn parse_immediate(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x") {
        i64::from_str_radix(hex, 16).ok()?
    } else {
        if body.is_empty() || !body.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        body.parse::<i64>().ok()?
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

fn parse_operand(s: &str, line: usize) -> Result<Operand, VmError> {
    parse_register(s)
        .map(Operand::Reg)
        .or_else(|| parse_immediate(s).map(Operand::Imm))
        .ok_or_else(|| VmError::BadOperand {
            line,
            operand: s.to_string(),
        })
}

struct Line<'a> {
    number: usize,
    mnemonic: &'a str,
    operands: Vec<&'a str>,
}

/// Assembles the text into instructions with resolved label targets.
fn assemble(asm: &str) -> Result<Vec<Insn>, VmError> {
    let mut labels = BTreeMap::new();
    let mut lines = Vec::new();
    for (i, raw) in asm.lines().enumerate() {
        let number = i + 1;
        let code = raw.split(';').next().unwrap_or("").trim();
        if code.is_empty() {
            continue;
        }
        if let Some(label) = code.strip_suffix(':') {
            if labels
                .insert(label.trim().to_string(), lines.len())
                .is_some()
            {
                return Err(VmError::DuplicateLabel(label.trim().to_string()));
            }
            continue;
        }
        let (mnemonic, rest) = match code.find(char::is_whitespace) {
            Some(p) => (&code[..p], code[p..].trim()),
            None => (code, ""),
        };
        let operands = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(str::trim).collect()
        };
        lines.push(Line {
            number,
            mnemonic,
            operands,
        });
    }

    let arity = |l: &Line<'_>, n: usize| {
        if l.operands.len() == n {
            Ok(())
        } else {
            Err(VmError::Arity {
                line: l.number,
                expected: n,
                found: l.operands.len(),
            })
        }
    };
    let target = |l: &Line<'_>| {
        labels
            .get(l.operands[0])
            .copied()
            .ok_or_else(|| VmError::UndefinedLabel {
                line: l.number,
                label: l.operands[0].to_string(),
            })
    };

    lines
        .iter()
        .map(|l| {
            let alu = |op| -> Result<Insn, VmError> {
                arity(l, 2)?;
                let dst = parse_register(l.operands[0]).ok_or_else(|| VmError::BadOperand {
                    line: l.number,
                    operand: l.operands[0].to_string(),
                })?;
                Ok(Insn::Alu(op, dst, parse_operand(l.operands[1], l.number)?))
            };
            match l.mnemonic {
                "mov" => alu(Op::Mov),
                "add" => alu(Op::Add),
                "sub" => alu(Op::Sub),
                "mul" => alu(Op::Mul),
                "cmp" => alu(Op::Cmp),
                "jmp" => arity(l, 1).and_then(|_| target(l)).map(Insn::Jmp),
                "jz" => arity(l, 1).and_then(|_| target(l)).map(Insn::Jz),
                "ret" => match l.operands.len() {
                    0 => Ok(Insn::Ret(Operand::Reg(0))),
                    1 => Ok(Insn::Ret(parse_operand(l.operands[0], l.number)?)),
                    n => Err(VmError::Arity {
                        line: l.number,
                        expected: 1,
                        found: n,
                    }),
                },
                other => Err(VmError::UnknownInstruction {
                    line: l.number,
                    mnemonic: other.to_string(),
                }),
            }
        })
        .collect()
}

/// Runs toy assembly to completion and returns its exit code.
pub fn run_toy_vm(asm: &str) -> Result<u8, VmError> {
    run_toy_vm_with_budget(asm, DEFAULT_BUDGET)
}

pub fn run_toy_vm_with_budget(asm: &str, budget: u64) -> Result<u8, VmError> {
    let program = assemble(asm)?;
    let mut regs = [0i64; NUM_REGISTERS];
    let mut zf = false;
    let mut pc = 0usize;
    let mut executed = 0u64;
    loop {
        let Some(insn) = program.get(pc) else {
            return Err(VmError::FellOffEnd);
        };
        if executed == budget {
            return Err(VmError::BudgetExceeded(budget));
        }
        executed += 1;
        let value = |o: &Operand, regs: &[i64; NUM_REGISTERS]| match *o {
            Operand::Reg(r) => regs[r],
            Operand::Imm(v) => v,
        };
        pc += 1;
        match insn {
            Insn::Alu(op, dst, src) => {
                let x = value(src, &regs);
                let d = &mut regs[*dst];
                match op {
                    Op::Mov => *d = x,
                    Op::Add => *d = d.wrapping_add(x),
                    Op::Sub => *d = d.wrapping_sub(x),
                    Op::Mul => *d = d.wrapping_mul(x),
                    Op::Cmp => zf = *d == x,
                }
            }
            Insn::Jmp(t) => pc = *t,
            Insn::Jz(t) => {
                if zf {
                    pc = *t;
                }
            }
            Insn::Ret(o) => return Ok(value(o, &regs).rem_euclid(256) as u8),
        }
    }
}
