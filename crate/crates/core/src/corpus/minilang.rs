//! A tiny C subset with a reference interpreter and a code generator targeting
//! the toy assembly dialect. Programs look like
//!
//! ```text
//! int main() { int a = 3; int b = a * 2; return a + b - 1; }
//! ```
//!
//! Every program is valid C, so the same text can be fed to a real compiler.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const MAX_VARS: usize = 3;
const VAR_NAMES: [char; MAX_VARS] = ['a', 'b', 'c'];
const FIRST_VAR_REG: usize = 1;
const FIRST_TEMP_REG: usize = FIRST_VAR_REG + MAX_VARS;
const LAST_REG: usize = 7;
/// Generated programs keep every intermediate value within this magnitude so
/// C `int` arithmetic never overflows.
const VALUE_BOUND: i64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul => 2,
        }
    }

    fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Lit(i64),
    Var(usize),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

/// `int main() { int a = e0; int b = e1; ... return e; }`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub decls: Vec<Expr>,
    pub ret: Expr,
}

/// A generated program with its compiled assembly and ground-truth exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniProgram {
    pub source: String,
    pub asm: String,
    pub expected_exit_code: u8,
}

impl Expr {
    fn eval(&self, vars: &[i64]) -> Result<i64> {
        Ok(match self {
            Expr::Lit(v) => *v,
            Expr::Var(i) => *vars.get(*i).ok_or_else(|| {
                Error::Parse(format!(
                    "variable {} used before declaration",
                    VAR_NAMES[*i]
                ))
            })?,
            Expr::Bin(op, l, r) => {
                let (a, b) = (l.eval(vars)?, r.eval(vars)?);
                match op {
                    BinOp::Add => a.checked_add(b),
                    BinOp::Sub => a.checked_sub(b),
                    BinOp::Mul => a.checked_mul(b),
                }
                .filter(|v| i32::try_from(*v).is_ok())
                .ok_or_else(|| Error::Parse("arithmetic overflows C int".into()))?
            }
        })
    }

    /// Largest magnitude of any intermediate value.
    fn peak(&self, vars: &[i64]) -> Result<i64> {
        Ok(match self {
            Expr::Lit(v) => v.abs(),
            Expr::Var(_) => self.eval(vars)?.abs(),
            Expr::Bin(_, l, r) => l.peak(vars)?.max(r.peak(vars)?).max(self.eval(vars)?.abs()),
        })
    }

    fn depth(&self) -> usize {
        match self {
            Expr::Bin(_, l, r) => 1 + l.depth().max(r.depth()),
            _ => 0,
        }
    }

    fn write_to(&self, out: &mut String) {
        match self {
            Expr::Lit(v) => {
                let _ = write!(out, "{v}");
            }
            Expr::Var(i) => out.push(VAR_NAMES[*i]),
            Expr::Bin(op, l, r) => {
                let wrap = |e: &Expr, strict: bool, out: &mut String| {
                    let needs = match e {
                        Expr::Bin(inner, _, _) => {
                            inner.precedence() < op.precedence()
                                || (strict && inner.precedence() == op.precedence())
                        }
                        _ => false,
                    };
                    if needs {
                        out.push('(');
                        e.write_to(out);
                        out.push(')');
                    } else {
                        e.write_to(out);
                    }
                };
                wrap(l, false, out);
                let _ = write!(out, " {} ", op.symbol());
                // Right operands of equal precedence are parenthesized so the
                // printed text re-parses to the same tree.
                wrap(r, true, out);
            }
        }
    }
}

impl Program {
    pub fn to_source(&self) -> String {
        let mut s = String::from("int main() {");
        for (i, e) in self.decls.iter().enumerate() {
            let _ = write!(s, " int {} = ", VAR_NAMES[i]);
            e.write_to(&mut s);
            s.push(';');
        }
        s.push_str(" return ");
        self.ret.write_to(&mut s);
        s.push_str("; }");
        s
    }

    /// Direct interpretation of the AST; the C process exit status is the
    /// returned `int` modulo 256.
    pub fn interpret(&self) -> Result<u8> {
        let mut vars = Vec::with_capacity(self.decls.len());
        for e in &self.decls {
            vars.push(e.eval(&vars)?);
        }
        Ok(self.ret.eval(&vars)?.rem_euclid(256) as u8)
    }

    /// Compiles to toy assembly. Variables live in `r1..r3`, expression
    /// temporaries in `r4..r7` and the return value in `r0`.
    pub fn compile(&self) -> Result<String> {
        if self.decls.len() > MAX_VARS {
            return Err(Error::Parse(format!(
                "at most {MAX_VARS} variables are supported"
            )));
        }
        let mut out = String::new();
        for (i, e) in self.decls.iter().enumerate() {
            gen_expr(e, FIRST_VAR_REG + i, FIRST_TEMP_REG, &mut out)?;
        }
        gen_expr(&self.ret, 0, FIRST_TEMP_REG, &mut out)?;
        out.push_str("ret r0");
        Ok(out)
    }

    fn peak(&self) -> Result<i64> {
        let mut vars = Vec::new();
        let mut peak = 0;
        for e in &self.decls {
            peak = peak.max(e.peak(&vars)?);
            vars.push(e.eval(&vars)?);
        }
        Ok(peak.max(self.ret.peak(&vars)?))
    }
}

fn operand_text(e: &Expr) -> Option<String> {
    match e {
        Expr::Lit(v) => Some(format!("{v}")),
        Expr::Var(i) => Some(format!("r{}", FIRST_VAR_REG + i)),
        Expr::Bin(..) => None,
    }
}

fn gen_expr(e: &Expr, target: usize, next_temp: usize, out: &mut String) -> Result<()> {
    match e {
        Expr::Lit(_) | Expr::Var(_) => {
            let _ = writeln!(
                out,
                "mov r{target}, {}",
                operand_text(e).unwrap_or_default()
            );
        }
        Expr::Bin(op, l, r) => {
            gen_expr(l, target, next_temp, out)?;
            match operand_text(r) {
                Some(x) => {
                    let _ = writeln!(out, "{} r{target}, {x}", op.mnemonic());
                }
                None => {
                    if next_temp > LAST_REG {
                        return Err(Error::Parse(
                            "expression too deep for the register file".into(),
                        ));
                    }
                    gen_expr(r, next_temp, next_temp + 1, out)?;
                    let _ = writeln!(out, "{} r{target}, r{next_temp}", op.mnemonic());
                }
            }
        }
    }
    Ok(())
}

/// Parses the mini-language back into a [`Program`].
pub fn parse(src: &str) -> Result<Program> {
    let mut p = Parser {
        s: src.as_bytes(),
        pos: 0,
        declared: 0,
    };
    p.keyword("int")?;
    p.keyword("main")?;
    p.punct(b'(')?;
    p.punct(b')')?;
    p.punct(b'{')?;
    let mut decls = Vec::new();
    loop {
        p.skip_ws();
        if p.peek_word() == Some("return") {
            p.keyword("return")?;
            let ret = p.expr()?;
            p.punct(b';')?;
            p.punct(b'}')?;
            p.skip_ws();
            if p.pos != p.s.len() {
                return Err(p.error("trailing text"));
            }
            return Ok(Program { decls, ret });
        }
        p.keyword("int")?;
        p.skip_ws();
        let name = p
            .peek_word()
            .ok_or_else(|| p.error("expected variable name"))?;
        let expected = VAR_NAMES
            .get(decls.len())
            .ok_or_else(|| p.error("too many variables"))?;
        if name.len() != 1 || !name.starts_with(*expected) {
            return Err(p.error("variables must be declared as a, b, c in order"));
        }
        p.pos += 1;
        p.punct(b'=')?;
        let e = p.expr()?;
        p.punct(b';')?;
        decls.push(e);
        p.declared = decls.len();
    }
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
    declared: usize,
}

impl Parser<'_> {
    fn error(&self, what: &str) -> Error {
        Error::Parse(format!("{what} at byte {}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek_word(&self) -> Option<&str> {
        let start = self.pos;
        let mut end = start;
        while end < self.s.len() && (self.s[end].is_ascii_alphanumeric() || self.s[end] == b'_') {
            end += 1;
        }
        (end > start).then(|| core::str::from_utf8(&self.s[start..end]).unwrap_or(""))
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        self.skip_ws();
        if self.peek_word() == Some(kw) {
            self.pos += kw.len();
            Ok(())
        } else {
            Err(self.error(&format!("expected `{kw}`")))
        }
    }

    fn punct(&mut self, c: u8) -> Result<()> {
        self.skip_ws();
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            self.skip_ws();
            let op = match self.s.get(self.pos) {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.atom()?;
        loop {
            self.skip_ws();
            if self.s.get(self.pos) != Some(&b'*') {
                return Ok(lhs);
            }
            self.pos += 1;
            let rhs = self.atom()?;
            lhs = Expr::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        self.skip_ws();
        match self.s.get(self.pos) {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.punct(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() => {
                let start = self.pos;
                while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                let text = core::str::from_utf8(&self.s[start..self.pos]).unwrap_or("");
                text.parse()
                    .map(Expr::Lit)
                    .map_err(|_| self.error("integer literal too large"))
            }
            Some(c) => match VAR_NAMES[..self.declared]
                .iter()
                .position(|v| *v as u8 == *c)
            {
                Some(i) => {
                    self.pos += 1;
                    Ok(Expr::Var(i))
                }
                None => Err(self.error("expected literal, declared variable or `(`")),
            },
            None => Err(self.error("unexpected end of input")),
        }
    }
}

fn random_expr(rng: &mut Rng, depth: usize, vars: usize) -> Expr {
    let leaf = depth == 0 || rng::below(rng, 3) == 0;
    if leaf {
        if vars > 0 && rng::below(rng, 2) == 0 {
            Expr::Var(rng::below(rng, vars as u64) as usize)
        } else {
            Expr::Lit(rng::below(rng, 10) as i64)
        }
    } else {
        let op = [BinOp::Add, BinOp::Sub, BinOp::Mul][rng::below(rng, 3) as usize];
        Expr::Bin(
            op,
            Box::new(random_expr(rng, depth - 1, vars)),
            Box::new(random_expr(rng, depth - 1, vars)),
        )
    }
}

/// Shape limits for generated programs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenConfig {
    /// Local variables per program, at most 3.
    pub max_vars: usize,
    /// Expression nesting depth, at most 2.
    pub max_depth: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_vars: MAX_VARS,
            max_depth: 2,
        }
    }
}

fn random_program(rng: &mut Rng, cfg: &GenConfig) -> Program {
    loop {
        let n_vars = rng::below(rng, cfg.max_vars as u64 + 1) as usize;
        let decls: Vec<Expr> = (0..n_vars)
            .map(|i| random_expr(rng, cfg.max_depth, i))
            .collect();
        let ret = random_expr(rng, cfg.max_depth, n_vars);
        let p = Program { decls, ret };
        if matches!(p.peak(), Ok(v) if v <= VALUE_BOUND) {
            return p;
        }
    }
}

impl MiniProgram {
    pub fn from_program(p: &Program) -> Result<Self> {
        Ok(MiniProgram {
            source: p.to_source(),
            asm: p.compile()?,
            expected_exit_code: p.interpret()?,
        })
    }
}

/// Generates `n` random programs with their compiled assembly and exit codes.
/// Deterministic in `seed`.
pub fn gen_mini_corpus(n: usize, seed: u64) -> Result<Vec<MiniProgram>> {
    gen_mini_corpus_with(n, seed, &GenConfig::default())
}

pub fn gen_mini_corpus_with(n: usize, seed: u64, cfg: &GenConfig) -> Result<Vec<MiniProgram>> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    if cfg.max_vars > MAX_VARS || cfg.max_depth > 2 {
        return Err(Error::Config(format!(
            "at most {MAX_VARS} variables and depth 2 are supported, got {cfg:?}"
        )));
    }
    let mut rng = rng::seeded(seed);
    (0..n)
        .map(|_| {
            let p = random_program(&mut rng, cfg);
            debug_assert!(p.ret.depth() <= cfg.max_depth);
            MiniProgram::from_program(&p)
        })
        .collect()
}
