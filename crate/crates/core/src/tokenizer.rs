//! Hybrid instruction-aware / byte-level tokenizer.
//!
//! IDs are laid out as six special tokens, then the 256 byte tokens, then one
//! token per known mnemonic. For assembly text, the first whitespace-delimited
//! word of each line (after indentation) becomes a single opcode token when it
//! is a known mnemonic; every other byte, and all source text, is emitted
//! byte by byte. Decoding is lossless.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::corpus::{toyvm, Sample, Task};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const PREFIX_ASM2SRC: u32 = 4;
pub const PREFIX_SRC2ASM: u32 = 5;
pub const NUM_SPECIALS: u32 = 6;
pub const BYTE_BASE: u32 = NUM_SPECIALS;
pub const OPCODE_BASE: u32 = BYTE_BASE + 256;
pub const DEFAULT_MAX_CONTEXT: usize = 1024;

pub const SPECIAL_NAMES: [&str; NUM_SPECIALS as usize] = [
    "<|pad|>",
    "<|bos|>",
    "<|eos|>",
    "<|sep|>",
    "<|asm2src|>",
    "<|src2asm|>",
];

/// Name recorded in vocab files for the built-in mnemonic list.
pub const BUILTIN_MNEMONIC_SOURCE: &str = "builtin:toy+x86";

/// Common x86/x86-64 mnemonics seen in disassembler listings.
pub const X86_MNEMONICS: &[&str] = &[
    "mov",
    "movzx",
    "movsx",
    "movsxd",
    "lea",
    "push",
    "pop",
    "call",
    "ret",
    "retn",
    "jmp",
    "je",
    "jne",
    "jz",
    "jnz",
    "ja",
    "jae",
    "jb",
    "jbe",
    "jg",
    "jge",
    "jl",
    "jle",
    "js",
    "jns",
    "jo",
    "jno",
    "jp",
    "jnp",
    "jc",
    "jnc",
    "jecxz",
    "loop",
    "cmp",
    "test",
    "add",
    "adc",
    "sub",
    "sbb",
    "mul",
    "imul",
    "div",
    "idiv",
    "inc",
    "dec",
    "neg",
    "not",
    "and",
    "or",
    "xor",
    "shl",
    "shr",
    "sal",
    "sar",
    "rol",
    "ror",
    "rcl",
    "rcr",
    "nop",
    "int",
    "int3",
    "leave",
    "enter",
    "xchg",
    "cmpxchg",
    "cdq",
    "cwd",
    "cbw",
    "cwde",
    "cdqe",
    "cqo",
    "sete",
    "setne",
    "setz",
    "setnz",
    "setg",
    "setge",
    "setl",
    "setle",
    "seta",
    "setae",
    "setb",
    "setbe",
    "cmove",
    "cmovne",
    "cmovg",
    "cmovge",
    "cmovl",
    "cmovle",
    "cmova",
    "cmovb",
    "movsb",
    "movsw",
    "movsd",
    "movsq",
    "stosb",
    "stosw",
    "stosd",
    "stosq",
    "lodsb",
    "scasb",
    "cmpsb",
    "rep",
    "repe",
    "repne",
    "lock",
    "hlt",
    "cld",
    "std",
    "bt",
    "bts",
    "btr",
    "bsf",
    "bsr",
    "bswap",
    "syscall",
    "sysenter",
    "movd",
    "movq",
    "movaps",
    "movups",
    "movdqa",
    "movdqu",
    "pxor",
    "xorps",
    "addss",
    "subss",
    "mulss",
    "divss",
    "cvtsi2sd",
    "cvttsd2si",
    "ucomisd",
    "comisd",
    "iret",
    "pushad",
    "popad",
    "pushfd",
    "popfd",
    "endbr64",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Role {
    Assembly,
    Source,
}

impl Role {
    /// Roles of the (input, output) sides for a task.
    pub fn for_task(task: Task) -> (Role, Role) {
        match task {
            Task::AsmToSrc => (Role::Assembly, Role::Source),
            Task::SrcToAsm => (Role::Source, Role::Assembly),
        }
    }
}

/// Token ids plus the role they were encoded under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub role: Role,
    /// Set when the stream is longer than the vocabulary's context window.
    pub excluded: bool,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// What a single id stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind<'a> {
    Special(&'static str),
    Byte(u8),
    Opcode(&'a str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    mnemonics: Vec<String>,
    index: BTreeMap<String, u32>,
    max_context: usize,
    mnemonic_source: String,
}

pub fn prefix_token(task: Task) -> u32 {
    match task {
        Task::AsmToSrc => PREFIX_ASM2SRC,
        Task::SrcToAsm => PREFIX_SRC2ASM,
    }
}

pub fn prefix_task(id: u32) -> Option<Task> {
    match id {
        PREFIX_ASM2SRC => Some(Task::AsmToSrc),
        PREFIX_SRC2ASM => Some(Task::SrcToAsm),
        _ => None,
    }
}

impl Vocab {
    /// Builds a vocabulary over the toy dialect mnemonics plus `extra`.
    /// Duplicates are dropped, first occurrence wins.
    pub fn new<'a>(
        extra: impl IntoIterator<Item = &'a str>,
        max_context: usize,
        mnemonic_source: impl Into<String>,
    ) -> Result<Self> {
        if max_context == 0 {
            return Err(Error::Config("max_context must be at least 1".into()));
        }
        let mut vocab = Vocab {
            mnemonics: Vec::new(),
            index: BTreeMap::new(),
            max_context,
            mnemonic_source: mnemonic_source.into(),
        };
        for m in toyvm::MNEMONICS.iter().copied().chain(extra) {
            if m.is_empty() || m.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid mnemonic {m:?}")));
            }
            if !vocab.index.contains_key(m) {
                let id = OPCODE_BASE + vocab.mnemonics.len() as u32;
                vocab.index.insert(m.to_string(), id);
                vocab.mnemonics.push(m.to_string());
            }
        }
        Ok(vocab)
    }

    pub fn builtin(max_context: usize) -> Result<Self> {
        Self::new(
            X86_MNEMONICS.iter().copied(),
            max_context,
            BUILTIN_MNEMONIC_SOURCE,
        )
    }

    pub fn len(&self) -> usize {
        OPCODE_BASE as usize + self.mnemonics.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_context(&self) -> usize {
        self.max_context
    }

    pub fn mnemonic_source(&self) -> &str {
        &self.mnemonic_source
    }

    pub fn mnemonics(&self) -> &[String] {
        &self.mnemonics
    }

    pub fn opcode_id(&self, mnemonic: &str) -> Option<u32> {
        self.index.get(mnemonic).copied()
    }

    pub fn kind(&self, id: u32) -> Option<TokenKind<'_>> {
        if id < NUM_SPECIALS {
            Some(TokenKind::Special(SPECIAL_NAMES[id as usize]))
        } else if id < OPCODE_BASE {
            Some(TokenKind::Byte((id - BYTE_BASE) as u8))
        } else {
            self.mnemonics
                .get((id - OPCODE_BASE) as usize)
                .map(|m| TokenKind::Opcode(m))
        }
    }

    /// Display form of every token in id order, as stored in vocab files.
    pub fn tokens(&self) -> Vec<String> {
        (0..self.len() as u32)
            .map(|id| match self.kind(id) {
                Some(TokenKind::Special(s)) => s.to_string(),
                Some(TokenKind::Byte(b)) => format!("<0x{b:02X}>"),
                Some(TokenKind::Opcode(m)) => m.to_string(),
                None => unreachable!("ids below len() are valid"),
            })
            .collect()
    }

    /// Inverse of [`Vocab::tokens`]; rejects lists whose fixed prefix is wrong.
    pub fn from_tokens(
        tokens: &[String],
        max_context: usize,
        mnemonic_source: impl Into<String>,
    ) -> Result<Self> {
        if tokens.len() < OPCODE_BASE as usize {
            return Err(Error::Config(format!(
                "vocab has {} tokens, fewer than the fixed prefix",
                tokens.len()
            )));
        }
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            if tokens[i] != *name {
                return Err(Error::Config(format!(
                    "token {i} should be {name}, found {:?}",
                    tokens[i]
                )));
            }
        }
        for b in 0..=255u8 {
            let expected = format!("<0x{b:02X}>");
            if tokens[(BYTE_BASE + b as u32) as usize] != expected {
                return Err(Error::Config(format!(
                    "byte token {expected} missing or out of order"
                )));
            }
        }
        let opcodes = &tokens[OPCODE_BASE as usize..];
        let toy = toyvm::MNEMONICS.len();
        if opcodes.len() < toy
            || opcodes[..toy]
                .iter()
                .zip(toyvm::MNEMONICS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Config(
                "vocab must start its opcodes with the toy dialect mnemonics".into(),
            ));
        }
        let vocab = Self::new(
            opcodes[toy..].iter().map(String::as_str),
            max_context,
            mnemonic_source,
        )?;
        if vocab.mnemonics.len() != opcodes.len() {
            return Err(Error::Config("duplicate mnemonic in vocab".into()));
        }
        Ok(vocab)
    }

    /// Encodes text under the given role. Never fails: unknown text falls
    /// back to byte tokens.
    pub fn encode(&self, text: &str, role: Role) -> TokenStream {
        let mut ids = Vec::with_capacity(text.len());
        let bytes =
            |s: &str, ids: &mut Vec<u32>| ids.extend(s.bytes().map(|b| BYTE_BASE + b as u32));
        match role {
            Role::Source => bytes(text, &mut ids),
            Role::Assembly => {
                for (n, line) in text.split('\n').enumerate() {
                    if n > 0 {
                        ids.push(BYTE_BASE + b'\n' as u32);
                    }
                    let body = line.trim_start();
                    bytes(&line[..line.len() - body.len()], &mut ids);
                    let word_end = body.find(char::is_whitespace).unwrap_or(body.len());
                    match self.opcode_id(&body[..word_end]) {
                        Some(id) => {
                            ids.push(id);
                            bytes(&body[word_end..], &mut ids);
                        }
                        None => bytes(body, &mut ids),
                    }
                }
            }
        }
        let excluded = ids.len() > self.max_context;
        TokenStream {
            ids,
            role,
            excluded,
        }
    }

    /// Raw bytes for a stream; specials contribute nothing.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match self.kind(id) {
                Some(TokenKind::Special(_)) => {}
                Some(TokenKind::Byte(b)) => out.push(b),
                Some(TokenKind::Opcode(m)) => out.extend_from_slice(m.as_bytes()),
                None => {
                    return Err(Error::TokenOutOfRange {
                        id,
                        size: self.len(),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Decodes ids to text. Invalid UTF-8 (possible in generated output) is
    /// replaced with U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }
}

/// Token ids of a full training sequence and where its output segment starts.
///
/// Layout: `BOS, PREFIX(task) x n_prefix, input..., SEP, output..., EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEncoding {
    pub ids: Vec<u32>,
    /// Index of the first output token (the position right after `SEP`).
    pub output_start: usize,
}

/// Number of special tokens wrapped around each pair.
pub fn pair_overhead(n_prefix: usize) -> usize {
    3 + n_prefix
}

/// Generation prompt: `BOS, PREFIX(task) x n_prefix, input..., SEP`.
pub fn prompt_ids(vocab: &Vocab, task: Task, input: &str, n_prefix: usize) -> Vec<u32> {
    let (in_role, _) = Role::for_task(task);
    let mut ids = Vec::with_capacity(input.len() + pair_overhead(n_prefix));
    ids.push(BOS);
    ids.extend(std::iter::repeat_n(prefix_token(task), n_prefix));
    ids.extend(vocab.encode(input, in_role).ids);
    ids.push(SEP);
    ids
}

pub fn encode_pair(vocab: &Vocab, sample: &Sample, n_prefix: usize) -> PairEncoding {
    let mut ids = prompt_ids(vocab, sample.task, &sample.input_text, n_prefix);
    let output_start = ids.len();
    let (_, out_role) = Role::for_task(sample.task);
    ids.extend(vocab.encode(&sample.output_text, out_role).ids);
    ids.push(EOS);
    PairEncoding { ids, output_start }
}

/// Pretraining sequence: `BOS, text..., EOS`.
pub fn encode_document(vocab: &Vocab, text: &str, role: Role) -> TokenStream {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(vocab.encode(text, role).ids);
    ids.push(EOS);
    let excluded = ids.len() > vocab.max_context;
    TokenStream {
        ids,
        role,
        excluded,
    }
}

/// Total sequence length of a pair including its special tokens.
pub fn pair_len(vocab: &Vocab, sample: &Sample, n_prefix: usize) -> usize {
    let (in_role, out_role) = Role::for_task(sample.task);
    vocab.encode(&sample.input_text, in_role).len()
        + vocab.encode(&sample.output_text, out_role).len()
        + pair_overhead(n_prefix)
}

/// Splits samples into those that fit `max_context` (specials included) and
/// those that do not. Nothing is ever truncated; order is preserved.
pub fn filter_by_length(
    vocab: &Vocab,
    samples: Vec<Sample>,
    max_context: usize,
    n_prefix: usize,
) -> (Vec<Sample>, Vec<Sample>) {
    samples
        .into_iter()
        .partition(|s| pair_len(vocab, s, n_prefix) <= max_context)
}
