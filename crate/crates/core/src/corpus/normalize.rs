//! Assembly text normalization: instruction canonicalization, register
//! renaming and address randomization.
//!
//! Canonical form, per line:
//! - mnemonic (and any `rep`/`lock` style prefix) lower-cased;
//! - registers and size keywords (`dword`, `ptr`, ...) lower-cased;
//! - hexadecimal literals (`0X1F`, `1Fh`) rewritten as lowercase `0x1f`;
//! - whitespace runs collapsed, no space before a comma and exactly one after;
//! - `label:` prefixes and `;` comments kept, comment text trimmed.
//!
//! Renaming maps each distinct register name (case-insensitive) to `REG<n>` in
//! order of first appearance within one input. Address randomization treats
//! hex literals of at least `0x1000`, plus the hex suffix of disassembler
//! auto-names such as `sub_401000` or `FUN_00401000`, as absolute addresses
//! and replaces each distinct value by `ADDR_<k>`, where `k` is drawn without
//! replacement from a seeded pool. Comments are never rewritten.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::rng::{self, Rng};

/// Hex literals at or above this value are treated as absolute addresses.
pub const ADDRESS_THRESHOLD: u64 = 0x1000;
/// Size of the placeholder pool `ADDR_0 .. ADDR_{POOL-1}`.
pub const ADDRESS_POOL: u64 = 1 << 16;

const AUTO_NAME_PREFIXES: [&str; 13] = [
    "sub", "loc", "off", "unk", "byte", "word", "dword", "qword", "FUN", "LAB", "DAT", "PTR", "UNK",
];
const SIZE_KEYWORDS: [&str; 13] = [
    "byte", "word", "dword", "qword", "tbyte", "oword", "xmmword", "ymmword", "ptr", "short",
    "near", "far", "offset",
];
const INSTRUCTION_PREFIXES: [&str; 6] = ["rep", "repe", "repz", "repne", "repnz", "lock"];
const SEGMENT_REGISTERS: [&str; 6] = ["cs", "ds", "es", "fs", "gs", "ss"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormalizationConfig {
    pub canonicalize: bool,
    pub rename_registers: bool,
    pub randomize_addresses: bool,
    pub rng_seed: u64,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            canonicalize: true,
            rename_registers: true,
            randomize_addresses: true,
            rng_seed: 0,
        }
    }
}

impl NormalizationConfig {
    pub fn canonical_only() -> Self {
        Self {
            canonicalize: true,
            rename_registers: false,
            randomize_addresses: false,
            rng_seed: 0,
        }
    }
}

/// General-purpose, vector and toy-dialect registers that take part in
/// renaming. Segment registers and instruction pointers are recognized for
/// casing but keep their names.
pub fn is_renamable_register(lower: &str) -> bool {
    const FIXED: [&str; 36] = [
        "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp", "eax", "ebx", "ecx", "edx", "esi",
        "edi", "ebp", "esp", "ax", "bx", "cx", "dx", "si", "di", "bp", "sp", "al", "bl", "cl",
        "dl", "ah", "bh", "ch", "dh", "sil", "dil", "bpl", "spl",
    ];
    if FIXED.contains(&lower) {
        return true;
    }
    let numbered = |prefix: &str, max: u32, suffixes: &[&str]| {
        lower.strip_prefix(prefix).is_some_and(|rest| {
            let digits_end = rest
                .find(|c: char| !c.is_ascii_digit())
                .unwrap_or(rest.len());
            let (digits, suffix) = rest.split_at(digits_end);
            !digits.is_empty()
                && (digits == "0" || !digits.starts_with('0'))
                && digits.parse::<u32>().is_ok_and(|n| n <= max)
                && suffixes.contains(&suffix)
        })
    };
    numbered("r", 15, &["", "d", "w", "b"])
        || numbered("xmm", 31, &[""])
        || numbered("ymm", 31, &[""])
        || numbered("zmm", 31, &[""])
}

pub fn is_register(lower: &str) -> bool {
    is_renamable_register(lower)
        || SEGMENT_REGISTERS.contains(&lower)
        || matches!(lower, "rip" | "eip" | "ip")
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Word(String),
    Number(String),
    Space,
    Punct(char),
}

fn is_word_start(c: char) -> bool {
    c.is_ascii_alphabetic() || matches!(c, '_' | '.' | '$' | '@' | '?')
}

fn is_word_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$' | '@' | '?')
}

/// Splits a line into tokens, keeping the exact text of spaces so a
/// non-canonicalizing pass can reproduce the input byte for byte.
fn lex(line: &str) -> Vec<(Tok, &str)> {
    let mut out = Vec::new();
    let mut chars = line.char_indices().peekable();
    while let Some((start, c)) = chars.next() {
        let mut end = start + c.len_utf8();
        let mut take_while = |pred: fn(char) -> bool, end: &mut usize| {
            while let Some(&(i, n)) = chars.peek() {
                if !pred(n) {
                    break;
                }
                *end = i + n.len_utf8();
                chars.next();
            }
        };
        let tok = if c.is_whitespace() {
            take_while(char::is_whitespace, &mut end);
            Tok::Space
        } else if is_word_start(c) {
            take_while(is_word_continue, &mut end);
            Tok::Word(line[start..end].to_string())
        } else if c.is_ascii_digit() {
            take_while(|n| n.is_ascii_alphanumeric(), &mut end);
            Tok::Number(line[start..end].to_string())
        } else {
            Tok::Punct(c)
        };
        out.push((tok, &line[start..end]));
    }
    out
}

/// Value of a hexadecimal literal in `0x..` or `..h` form.
fn hex_value(s: &str) -> Option<u64> {
    let body = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .or_else(|| {
            s.strip_suffix('h')
                .or_else(|| s.strip_suffix('H'))
                .filter(|b| !b.is_empty())
        })?;
    if body.is_empty() || !body.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    u64::from_str_radix(body, 16).ok()
}

fn canonical_hex(s: &str) -> String {
    match hex_value(s) {
        Some(v) => format!("{v:#x}"),
        None if s.starts_with("0X") => s.to_ascii_lowercase(),
        None => s.to_string(),
    }
}

/// Splits `sub_401000` into (`sub`, 0x401000).
fn auto_name_address(word: &str) -> Option<(&str, u64)> {
    let (prefix, hex) = word.split_once('_')?;
    if !AUTO_NAME_PREFIXES.contains(&prefix)
        || hex.len() < 4
        || !hex.bytes().all(|b| b.is_ascii_hexdigit())
    {
        return None;
    }
    Some((prefix, u64::from_str_radix(hex, 16).ok()?))
}

struct State {
    registers: BTreeMap<String, usize>,
    addresses: BTreeMap<u64, u64>,
    used: BTreeSet<u64>,
    rng: Rng,
}

impl State {
    fn register(&mut self, lower: &str) -> String {
        let next = self.registers.len();
        let n = *self.registers.entry(lower.to_string()).or_insert(next);
        format!("REG{n}")
    }

    fn address(&mut self, value: u64) -> String {
        if let Some(k) = self.addresses.get(&value) {
            return format!("ADDR_{k}");
        }
        let k = loop {
            let k = rng::below(&mut self.rng, ADDRESS_POOL);
            if self.used.insert(k) {
                break k;
            }
        };
        self.addresses.insert(value, k);
        format!("ADDR_{k}")
    }
}

/// Normalizes newline-separated assembly text. Deterministic in `cfg`.
pub fn normalize_asm(asm: &str, cfg: &NormalizationConfig) -> String {
    let mut state = State {
        registers: BTreeMap::new(),
        addresses: BTreeMap::new(),
        used: BTreeSet::new(),
        rng: rng::seeded(cfg.rng_seed),
    };
    let lines: Vec<String> = asm
        .split('\n')
        .map(|l| normalize_line(l, cfg, &mut state))
        .collect();
    lines.join("\n")
}

fn normalize_line(line: &str, cfg: &NormalizationConfig, state: &mut State) -> String {
    let lexed = lex(line);
    let comment_at = lexed
        .iter()
        .position(|(t, _)| *t == Tok::Punct(';'))
        .unwrap_or(lexed.len());

    let mut toks: Vec<(Tok, String)> = Vec::with_capacity(lexed.len());
    for (i, (tok, text)) in lexed.into_iter().enumerate() {
        let rewritten = if i >= comment_at {
            None
        } else {
            match &tok {
                Tok::Word(w) => {
                    let lower = w.to_ascii_lowercase();
                    if cfg.rename_registers && is_renamable_register(&lower) {
                        Some(state.register(&lower))
                    } else if cfg.randomize_addresses {
                        auto_name_address(w)
                            .map(|(prefix, v)| format!("{prefix}_{}", state.address(v)))
                    } else {
                        None
                    }
                }
                Tok::Number(n) if cfg.randomize_addresses => hex_value(n)
                    .filter(|v| *v >= ADDRESS_THRESHOLD)
                    .map(|v| state.address(v)),
                _ => None,
            }
        };
        match rewritten {
            // A rewritten token is a placeholder word and stays exempt from casing.
            Some(s) => toks.push((Tok::Word(s.clone()), s)),
            None => toks.push((tok, text.to_string())),
        }
    }

    if !cfg.canonicalize {
        return toks.into_iter().map(|(_, s)| s).collect();
    }
    canonical_line(&toks, comment_at)
}

fn canonical_line(toks: &[(Tok, String)], comment_at: usize) -> String {
    let (code, comment) = toks.split_at(comment_at.min(toks.len()));
    let comment_text: Option<String> = comment.split_first().map(|(_, rest)| {
        rest.iter()
            .map(|(_, s)| s.as_str())
            .collect::<String>()
            .trim()
            .to_string()
    });

    let code: Vec<&(Tok, String)> = code.iter().collect();
    let mut i = 0;
    let skip_space = |i: &mut usize| {
        while *i < code.len() && code[*i].0 == Tok::Space {
            *i += 1;
        }
    };
    let mut out = String::new();

    skip_space(&mut i);
    // `label:` prefix
    if let (Some((Tok::Word(_), label)), Some((Tok::Punct(':'), _))) =
        (code.get(i).map(|t| (&t.0, &t.1)), code.get(i + 1))
    {
        let at_boundary = matches!(code.get(i + 2), None | Some((Tok::Space, _)));
        if at_boundary {
            out.push_str(label);
            out.push(':');
            i += 2;
            skip_space(&mut i);
        }
    }

    if let Some((Tok::Word(m), _)) = code.get(i) {
        if !out.is_empty() {
            out.push(' ');
        }
        let mut mnemonic = m.to_ascii_lowercase();
        i += 1;
        if INSTRUCTION_PREFIXES.contains(&mnemonic.as_str()) {
            let mut j = i;
            skip_space(&mut j);
            if let Some((Tok::Word(next), _)) = code.get(j) {
                mnemonic.push(' ');
                mnemonic.push_str(&next.to_ascii_lowercase());
                i = j + 1;
            }
        }
        out.push_str(&mnemonic);
    }

    let operands = canonical_operands(&code[i..]);
    if !operands.is_empty() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&operands);
    }

    if let Some(c) = comment_text {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push(';');
        if !c.is_empty() {
            out.push(' ');
            out.push_str(&c);
        }
    }
    out
}

fn canonical_operands(toks: &[&(Tok, String)]) -> String {
    let mut operands: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut pending_space = false;
    for tok in toks.iter().map(|t| &t.0) {
        match tok {
            Tok::Punct(',') => {
                operands.push(core::mem::take(&mut current));
                pending_space = false;
                continue;
            }
            Tok::Space => {
                pending_space = !current.is_empty();
                continue;
            }
            _ => {}
        }
        if pending_space {
            current.push(' ');
            pending_space = false;
        }
        match tok {
            Tok::Word(w) => {
                let lower = w.to_ascii_lowercase();
                if is_register(&lower) || SIZE_KEYWORDS.contains(&lower.as_str()) {
                    current.push_str(&lower);
                } else {
                    current.push_str(w);
                }
            }
            Tok::Number(n) => current.push_str(&canonical_hex(n)),
            Tok::Punct(c) => current.push(*c),
            Tok::Space => {}
        }
    }
    if !current.is_empty() || !operands.is_empty() {
        operands.push(current);
    }
    operands.join(", ")
}
