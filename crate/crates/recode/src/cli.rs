//! The `recode` command-line tool.

use std::ffi::OsString;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use recode_core::adaptation::AdaptationConfig;
use recode_core::corpus::{gen_mini_corpus_with, normalize_asm, GenConfig};
use recode_core::eval::{compare_perplexity, evaluate_corpus, EvalOptions, Metric, ModelBundle};
use recode_core::eval::{Reexecutor, SandboxConfig, DEFAULT_COMPILE_COMMAND};
use recode_core::model::Sampling;
use recode_core::tokenizer::{filter_by_length, DEFAULT_MAX_CONTEXT};
use recode_core::train::{
    finetune_with, pretrain_clm_with, Schedule, StepRecord, TrainConfig, Trainable,
};
use recode_core::{
    AdaptationState, BackboneParams, ModelConfig, NormalizationConfig, Role, Sample, Strategy,
    Task, Vocab,
};
use serde_json::json;

use crate::checkpoint::{
    load_adaptation, load_backbone, save_adaptation, save_backbone, BackboneCheckpoint,
};
use crate::config::{pick, FileConfig};
use crate::error::{exit, Error, Result};
use crate::jsonl::{ingest_jsonl, write_jsonl};
use crate::manifest::RunManifest;
use crate::pipeline::{corpus_loss, mini_corpus_samples, pretraining_documents};
use crate::report_io::{loss_csv, write_report};
use crate::sandbox::GccSandbox;
use crate::vocab_io::{load_vocab, save_vocab, vocab_with_mnemonics};

#[derive(Debug, Parser)]
#[command(
    name = "recode",
    version,
    about = "Assembly/source translation with a small adapted decoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic mini-language corpus (both directions per program).
    Gen(GenArgs),
    /// Validate a JSONL corpus and drop samples longer than the context window.
    Ingest(IngestArgs),
    /// Normalize assembly text, or the assembly side of a JSONL corpus.
    Normalize(NormalizeArgs),
    /// Write a vocabulary file, or encode text with one.
    Tokenize(TokenizeArgs),
    /// Pretrain a backbone with causal language modelling.
    Pretrain(PretrainArgs),
    /// Fine-tune adapters, LoRA and prefixes on a frozen backbone.
    Finetune(FinetuneArgs),
    /// Translate one input.
    Translate(TranslateArgs),
    /// Translate and score a corpus.
    Eval(EvalArgs),
    /// Output perplexity of the bare backbone against the adapted bundle.
    ComparePpl(ComparePplArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Asm2src,
    Src2asm,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Asm2src => Task::AsmToSrc,
            TaskArg::Src2asm => Task::SrcToAsm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Ma,
    S2s,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::Ma => Strategy::MultiAdapter,
            StrategyArg::S2s => Strategy::Seq2SeqUnified,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Joint,
    AdaptersFirst,
    LoraFirst,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Schedule {
        match s {
            ScheduleArg::Joint => Schedule::Joint,
            ScheduleArg::AdaptersFirst => Schedule::AdaptersFirst,
            ScheduleArg::LoraFirst => Schedule::LoraFirst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Asm,
    Src,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UnitArg {
    Char,
    Token,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(0..=3))]
    pub max_vars: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(0..=2))]
    pub max_depth: u64,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    /// Vocabulary file; defaults to the builtin vocabulary.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_CONTEXT)]
    pub max_context: usize,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArgs,
    /// Prefix tokens assumed in the sequence layout.
    #[arg(long, default_value_t = 1)]
    pub n_prefix: usize,
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output file; stdout when omitted (plain text input only).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Treat the input as a JSONL corpus and normalize its assembly side.
    #[arg(long)]
    pub jsonl: bool,
    #[arg(long)]
    pub no_canonicalize: bool,
    #[arg(long)]
    pub no_rename: bool,
    #[arg(long)]
    pub no_randomize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    /// Write the vocabulary here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra mnemonics, one per line, added after the toy dialect's.
    #[arg(long, conflicts_with = "vocab")]
    pub mnemonics: Option<PathBuf>,
    #[command(flatten)]
    pub vocab: VocabArgs,
    /// Print the token ids of this file.
    #[arg(long)]
    pub encode: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RoleArg::Asm)]
    pub role: RoleArg,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// TOML or JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    /// Also write `<out>.step<N>` every N steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

impl TrainFlags {
    fn resolve(&self, file: &FileConfig, trainable: Trainable) -> TrainConfig {
        let base = file.train.clone();
        TrainConfig {
            seed: pick(self.seed, None, base.seed),
            max_steps: pick(self.max_steps, None, base.max_steps),
            batch_size: pick(self.batch_size, None, base.batch_size),
            grad_accum_steps: pick(self.grad_accum, None, base.grad_accum_steps),
            learning_rate: pick(self.lr, None, base.learning_rate),
            weight_decay: pick(self.weight_decay, None, base.weight_decay),
            warmup_steps: pick(self.warmup_steps, None, base.warmup_steps),
            max_grad_norm: self.max_grad_norm.or(base.max_grad_norm),
            trainable,
            ..base
        }
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub tied_head: bool,
    /// Train on raw assembly instead of normalized assembly.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tasks to build adapters or prefixes for; defaults to both.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub tasks: Vec<TaskArg>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long)]
    pub adapter_rank: Option<usize>,
    /// 0 disables LoRA.
    #[arg(long)]
    pub lora_rank: Option<usize>,
    #[arg(long)]
    pub lora_alpha: Option<f64>,
    #[arg(long)]
    pub n_prefix: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BundleArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    /// Adaptation checkpoint; the bare backbone is used when omitted.
    #[arg(long)]
    pub adaptation: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Input file, `-` for stdin. One trailing newline is ignored.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub bundle: BundleArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sample at this temperature instead of decoding greedily.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Convex adapter mixing, e.g. `asm2src=0.7,src2asm=0.3`.
    #[arg(long)]
    pub mix: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub bundle: BundleArgs,
    /// Report path prefix; writes `<out>.json` and `<out>.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated subset of edit, sem, reexec.
    #[arg(long, default_value = "edit,sem")]
    pub metrics: String,
    #[arg(long, default_value = DEFAULT_COMPILE_COMMAND)]
    pub compiler: String,
    /// Seconds of wall-clock time per program.
    #[arg(long, default_value_t = 5.0)]
    pub time_limit: f64,
    /// Resident memory per program, e.g. 256M.
    #[arg(long, default_value = "256M", value_parser = parse_size)]
    pub mem_limit: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, value_enum, default_value_t = UnitArg::Char)]
    pub unit: UnitArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ComparePplArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub adaptation: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Byte count with an optional binary suffix: `1048576`, `512K`, `256M`, `1G`.
pub fn parse_size(s: &str) -> std::result::Result<u64, String> {
    let t = s.trim();
    let t = t
        .strip_suffix("iB")
        .or_else(|| t.strip_suffix('B'))
        .unwrap_or(t);
    let (digits, shift) = match t.chars().last() {
        Some('K' | 'k') => (&t[..t.len() - 1], 10),
        Some('M' | 'm') => (&t[..t.len() - 1], 20),
        Some('G' | 'g') => (&t[..t.len() - 1], 30),
        _ => (t, 0),
    };
    let n: u64 = digits
        .trim()
        .parse()
        .map_err(|_| format!("invalid size {s:?}"))?;
    if n == 0 {
        return Err("size must be positive".into());
    }
    n.checked_mul(1 << shift)
        .ok_or_else(|| format!("size {s:?} overflows"))
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit::USAGE
            } else {
                exit::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => exit::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a),
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Normalize(a) => cmd_normalize(&a),
        Command::Tokenize(a) => cmd_tokenize(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Translate(a) => cmd_translate(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::ComparePpl(a) => cmd_compare_ppl(&a),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configuration serializes")
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_input(path: &Path) -> Result<String> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| Error::io("<stdin>", e))?;
        return Ok(s);
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl VocabArgs {
    fn load(&self) -> Result<Vocab> {
        match &self.vocab {
            Some(p) => load_vocab(p),
            None => Ok(Vocab::builtin(self.max_context)?),
        }
    }
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let cfg = GenConfig {
        max_vars: a.max_vars as usize,
        max_depth: a.max_depth as usize,
    };
    let mut m = RunManifest::start(
        "gen",
        Some(a.seed),
        json!({"n": a.n, "max_vars": a.max_vars, "max_depth": a.max_depth}),
    );
    let programs = gen_mini_corpus_with(a.n as usize, a.seed, &cfg)?;
    let samples = mini_corpus_samples(&programs);
    write_jsonl(&a.out, &samples)?;
    m.output(&a.out)?;
    m.summary = json!({"programs": programs.len(), "samples": samples.len()});
    m.finish(&a.out)?;
    eprintln!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    if a.n_prefix == 0 {
        return Err(Error::Usage("--n-prefix must be at least 1".into()));
    }
    let vocab = a.vocab.load()?;
    let mut m = RunManifest::start(
        "ingest",
        None,
        json!({"max_context": vocab.max_context(), "n_prefix": a.n_prefix, "vocab": a.vocab.vocab}),
    );
    m.input(&a.input)?;
    let samples = ingest_jsonl(&a.input)?;
    let total = samples.len();
    let (kept, excluded) = filter_by_length(&vocab, samples, vocab.max_context(), a.n_prefix);
    write_jsonl(&a.out, &kept)?;
    m.output(&a.out)?;
    let ids: Vec<&str> = excluded.iter().map(|s| s.id.as_str()).collect();
    m.summary = json!({"samples": total, "kept": kept.len(), "excluded": ids});
    m.finish(&a.out)?;
    eprintln!(
        "kept {} of {} samples; {} exceed the {}-token context window",
        kept.len(),
        total,
        excluded.len(),
        vocab.max_context()
    );
    Ok(())
}

fn cmd_normalize(a: &NormalizeArgs) -> Result<()> {
    let cfg = NormalizationConfig {
        canonicalize: !a.no_canonicalize,
        rename_registers: !a.no_rename,
        randomize_addresses: !a.no_randomize,
        rng_seed: a.seed,
    };
    if a.jsonl {
        let out = a
            .out
            .as_ref()
            .ok_or_else(|| Error::Usage("--jsonl needs --out".into()))?;
        let mut m = RunManifest::start("normalize", Some(a.seed), to_json(&cfg));
        m.input(&a.input)?;
        let samples = ingest_jsonl(&a.input)?;
        let normalized = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let c = NormalizationConfig {
                    rng_seed: a.seed.wrapping_add(i as u64),
                    ..cfg
                };
                let asm = normalize_asm(s.asm_text(), &c);
                Sample::from_pair(s.id.clone(), s.source_text(), &asm, s.task)
                    .map(|x| x.with_expected_exit(s.expected_exit))
            })
            .collect::<recode_core::Result<Vec<_>>>()?;
        write_jsonl(out, &normalized)?;
        m.output(out)?;
        m.finish(out)?;
        return Ok(());
    }
    let text = read_input(&a.input)?;
    let normalized = normalize_asm(&text, &cfg);
    match &a.out {
        Some(out) => {
            let mut m = RunManifest::start("normalize", Some(a.seed), to_json(&cfg));
            if a.input.as_os_str() != "-" {
                m.input(&a.input)?;
            }
            write_file(out, &normalized)?;
            m.output(out)?;
            m.finish(out)?;
        }
        None => println!("{normalized}"),
    }
    Ok(())
}

fn cmd_tokenize(a: &TokenizeArgs) -> Result<()> {
    if a.out.is_none() && a.encode.is_none() {
        return Err(Error::Usage(
            "nothing to do: pass --out and/or --encode".into(),
        ));
    }
    let vocab = match &a.mnemonics {
        Some(p) => vocab_with_mnemonics(p, a.vocab.max_context)?,
        None => a.vocab.load()?,
    };
    if let Some(out) = &a.out {
        let mut m = RunManifest::start(
            "tokenize",
            None,
            json!({"max_context": vocab.max_context(), "mnemonic_source": vocab.mnemonic_source(), "size": vocab.len()}),
        );
        if let Some(p) = &a.mnemonics {
            m.input(p)?;
        }
        save_vocab(out, &vocab)?;
        m.output(out)?;
        m.finish(out)?;
    }
    if let Some(path) = &a.encode {
        let text = read_input(path)?;
        let role = match a.role {
            RoleArg::Asm => Role::Assembly,
            RoleArg::Src => Role::Source,
        };
        let ids: Vec<String> = vocab
            .encode(&text, role)
            .ids
            .iter()
            .map(u32::to_string)
            .collect();
        println!("{}", ids.join(" "));
    }
    Ok(())
}

/// Runs `train`, saving periodic checkpoints through `save` and surfacing the
/// first write error.
fn with_checkpoints<P>(
    every: Option<usize>,
    out: &Path,
    save: impl Fn(&Path, &P) -> Result<()>,
) -> (
    impl FnMut(&StepRecord, &P),
    std::rc::Rc<std::cell::RefCell<Option<Error>>>,
) {
    let failure = std::rc::Rc::new(std::cell::RefCell::new(None));
    let slot = failure.clone();
    let out = out.to_path_buf();
    let hook = move |rec: &StepRecord, p: &P| {
        if let Some(n) = every.filter(|n| *n > 0) {
            if rec.step.is_multiple_of(n) && slot.borrow().is_none() {
                if let Err(e) = save(&with_suffix(&out, &format!(".step{}", rec.step)), p) {
                    *slot.borrow_mut() = Some(e);
                }
            }
        }
    };
    (hook, failure)
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let file = FileConfig::load_opt(a.train.config.as_deref())?;
    let vocab = a.vocab.load()?;
    let fm = &file.model;
    let defaults = ModelConfig::for_vocab(&vocab);
    let model = ModelConfig {
        d_model: pick(a.d_model, fm.d_model, defaults.d_model),
        n_layers: pick(a.n_layers, fm.n_layers, defaults.n_layers),
        n_heads: pick(a.n_heads, fm.n_heads, defaults.n_heads),
        d_ff: pick(a.d_ff, fm.d_ff, defaults.d_ff),
        dropout: pick(a.dropout, fm.dropout, defaults.dropout),
        tied_head: a.tied_head || fm.tied_head.unwrap_or(defaults.tied_head),
        ..defaults
    };
    model.validate()?;
    let train = a.train.resolve(&file, Trainable::FullBackbone);
    train.validate()?;
    let fnorm = &file.normalize;
    let normalize = !a.no_normalize && fnorm.enabled.unwrap_or(true);
    let norm = NormalizationConfig {
        canonicalize: fnorm.canonicalize.unwrap_or(true),
        rename_registers: fnorm.rename_registers.unwrap_or(true),
        randomize_addresses: fnorm.randomize_addresses.unwrap_or(true),
        rng_seed: train.seed,
    };
    let mut m = RunManifest::start(
        "pretrain",
        Some(train.seed),
        json!({"model": to_json(&model), "train": to_json(&train), "normalize": normalize.then_some(to_json(&norm))}),
    );
    m.input(&a.corpus)?;
    if let Some(v) = &a.vocab.vocab {
        m.input(v)?;
    }
    if let Some(c) = &a.train.config {
        m.input(c)?;
    }

    let samples = ingest_jsonl(&a.corpus)?;
    let docs = pretraining_documents(&samples, &vocab, normalize.then_some(&norm));
    if docs.excluded > 0 {
        eprintln!(
            "excluded {} documents longer than the {}-token context window",
            docs.excluded,
            vocab.max_context()
        );
    }
    let init = BackboneParams::init(model, train.seed)?;
    let (hook, failure) = with_checkpoints(
        a.train.checkpoint_every,
        &a.out,
        |p: &Path, b: &BackboneParams| save_backbone(p, b, &vocab),
    );
    let (params, history) = pretrain_clm_with(&init, &docs.ids, &train, hook)?;
    if let Some(e) = failure.borrow_mut().take() {
        return Err(e);
    }
    save_backbone(&a.out, &params, &vocab)?;
    let loss_path = with_suffix(&a.out, ".loss.csv");
    write_file(&loss_path, loss_csv(&history))?;
    let final_loss = corpus_loss(&params, &docs.ids)?;
    m.output(&a.out)?;
    m.output(&loss_path)?;
    m.summary = json!({
        "documents": docs.ids.len(),
        "excluded_documents": docs.excluded,
        "steps": history.len(),
        "last_batch_loss": history.last().map(|r| r.loss),
        "final_loss": final_loss,
    });
    m.finish(&a.out)?;
    eprintln!(
        "pretrained {} steps; corpus loss {final_loss:.6}",
        history.len()
    );
    Ok(())
}

fn cmd_finetune(a: &FinetuneArgs) -> Result<()> {
    let file = FileConfig::load_opt(a.train.config.as_deref())?;
    let BackboneCheckpoint {
        params: mut backbone,
        vocab,
    } = load_backbone(&a.backbone)?;
    backbone.frozen = true;
    let strategy: Strategy = a.strategy.into();
    let fa = &file.adaptation;
    let defaults = AdaptationConfig::new(strategy);
    let tasks: Vec<Task> = if a.tasks.is_empty() {
        defaults.tasks.clone()
    } else {
        a.tasks.iter().map(|&t| t.into()).collect()
    };
    let lora_rank = pick(a.lora_rank, fa.lora_rank, defaults.lora_rank.unwrap_or(0));
    let acfg = AdaptationConfig {
        strategy,
        tasks,
        adapter_rank: pick(a.adapter_rank, fa.adapter_rank, defaults.adapter_rank),
        lora_rank: (lora_rank > 0).then_some(lora_rank),
        lora_alpha: a.lora_alpha.or(fa.lora_alpha),
        n_prefix: pick(a.n_prefix, fa.n_prefix, defaults.n_prefix),
        init_std: pick(None, fa.init_std, defaults.init_std),
    };
    let mut train = a.train.resolve(&file, Trainable::AdaptationOnly);
    if let Some(s) = a.schedule {
        train.schedule = s.into();
    }
    train.validate()?;
    let mut m = RunManifest::start(
        "finetune",
        Some(train.seed),
        json!({"adaptation": to_json(&acfg), "train": to_json(&train)}),
    );
    m.input(&a.backbone)?;
    m.input(&a.data)?;
    if let Some(c) = &a.train.config {
        m.input(c)?;
    }

    let init = AdaptationState::new(&acfg, &backbone, train.seed)?;
    let samples = ingest_jsonl(&a.data)?;
    let total = samples.len();
    let (kept, excluded) = filter_by_length(&vocab, samples, vocab.max_context(), init.n_prefix());
    if !excluded.is_empty() {
        eprintln!(
            "excluded {} samples longer than the {}-token context window",
            excluded.len(),
            vocab.max_context()
        );
    }
    let model = backbone.config.clone();
    let (hook, failure) = with_checkpoints(
        a.train.checkpoint_every,
        &a.out,
        |p: &Path, s: &AdaptationState| save_adaptation(p, s, &acfg, &model),
    );
    let (state, history) = finetune_with(&backbone, &init, &kept, &vocab, &train, hook)?;
    if let Some(e) = failure.borrow_mut().take() {
        return Err(e);
    }
    save_adaptation(&a.out, &state, &acfg, &backbone.config)?;
    let loss_path = with_suffix(&a.out, ".loss.csv");
    write_file(&loss_path, loss_csv(&history))?;
    m.output(&a.out)?;
    m.output(&loss_path)?;
    m.summary = json!({
        "samples": total,
        "kept": kept.len(),
        "excluded": excluded.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(),
        "steps": history.len(),
        "final_loss": history.last().map(|r| r.loss),
        "tasks": state.tasks(),
    });
    m.finish(&a.out)?;
    eprintln!(
        "fine-tuned {} steps ({strategy}); last loss {:?}",
        history.len(),
        history.last().map(|r| r.loss)
    );
    Ok(())
}

fn load_bundle(b: &BundleArgs, m: &mut RunManifest) -> Result<ModelBundle> {
    m.input(&b.backbone)?;
    let ck = load_backbone(&b.backbone)?;
    let adaptation = match &b.adaptation {
        Some(p) => {
            m.input(p)?;
            Some(load_adaptation(p, &ck.params)?.0)
        }
        None => None,
    };
    Ok(ModelBundle::new(ck.params, adaptation, ck.vocab)?)
}

fn parse_mix(s: &str) -> Result<std::collections::BTreeMap<Task, f64>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (t, w) = p
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--mix entry {p:?} is not task=weight")))?;
            let task: Task = t
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("unknown task {t:?} in --mix")))?;
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("invalid weight {w:?} in --mix")))?;
            Ok((task, w))
        })
        .collect()
}

fn sampling(temperature: Option<f64>, seed: u64) -> Result<Sampling> {
    match temperature {
        None => Ok(Sampling::Greedy),
        Some(t) if t > 0.0 && t.is_finite() => Ok(Sampling::Sampled {
            seed,
            temperature: t,
        }),
        Some(t) => Err(Error::Usage(format!("--temperature {t} must be positive"))),
    }
}

fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    let task: Task = a.task.into();
    let mode = sampling(a.temperature, a.seed)?;
    let mut m = RunManifest::start(
        "translate",
        Some(a.seed),
        json!({"task": task, "decoding": format!("{mode:?}"), "mix": a.mix}),
    );
    let mut bundle = load_bundle(&a.bundle, &mut m)?;
    if let Some(mix) = &a.mix {
        let weights = parse_mix(mix)?;
        let st = bundle
            .adaptation
            .as_mut()
            .ok_or_else(|| Error::Usage("--mix needs --adaptation".into()))?;
        st.set_mixing(weights)?;
    }
    let raw = read_input(&a.input)?;
    let input = raw.strip_suffix('\n').unwrap_or(&raw);
    let input = input.strip_suffix('\r').unwrap_or(input);
    let (text, _) = bundle.translate(task, input, mode).map_err(|e| match e {
        recode_core::Error::ContextOverflow { len, max } => Error::format(
            &a.input,
            format!("input needs {len} tokens with its specials, over the {max}-token context window; longer inputs are refused, not truncated"),
        ),
        other => other.into(),
    })?;
    match &a.out {
        Some(out) => {
            if a.input.as_os_str() != "-" {
                m.input(&a.input)?;
            }
            write_file(out, &text)?;
            m.output(out)?;
            m.finish(out)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}").map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let metrics = Metric::parse_list(&a.metrics).map_err(|e| Error::Usage(e.to_string()))?;
    let sandbox = SandboxConfig {
        compile_command: a.compiler.clone(),
        time_limit_secs: a.time_limit,
        memory_limit_bytes: a.mem_limit,
    };
    let opts = EvalOptions {
        metrics,
        unit: match a.unit {
            UnitArg::Char => recode_core::eval::Unit::Char,
            UnitArg::Token => recode_core::eval::Unit::Token,
        },
        sampling: sampling(a.temperature, a.seed)?,
        seed: a.seed,
    };
    let runner = if opts.metrics.contains(&Metric::Reexec) {
        Some(GccSandbox::new(sandbox.clone(), a.jobs).map_err(|e| Error::Usage(e.to_string()))?)
    } else {
        None
    };
    let mut m = RunManifest::start(
        "eval",
        Some(a.seed),
        json!({"metrics": a.metrics, "sandbox": to_json(&sandbox), "jobs": a.jobs, "unit": opts.unit, "decoding": format!("{:?}", opts.sampling)}),
    );
    let bundle = load_bundle(&a.bundle, &mut m)?;
    m.input(&a.data)?;
    let samples = ingest_jsonl(&a.data)?;
    let report = evaluate_corpus(
        &bundle,
        &samples,
        &opts,
        runner.as_ref().map(|r| r as &dyn Reexecutor),
    )?;
    let [json_path, csv_path] = write_report(&a.out, &report)?;
    m.output(&json_path)?;
    m.output(&csv_path)?;
    m.summary = to_json(&report.overall);
    m.finish(&json_path)?;
    for (task, agg) in &report.per_task {
        eprintln!(
            "{task}: {} evaluated, {} excluded, {} failed, exact {}, edit {:?}, sem {:?}, reexec {:?}",
            agg.evaluated, agg.excluded, agg.failed, agg.exact_matches, agg.mean_edit_sim, agg.mean_sem_sim, agg.reexec_rate
        );
    }
    Ok(())
}

fn cmd_compare_ppl(a: &ComparePplArgs) -> Result<()> {
    let mut m = RunManifest::start("compare-ppl", None, json!({}));
    m.input(&a.backbone)?;
    m.input(&a.adaptation)?;
    m.input(&a.data)?;
    let ck = load_backbone(&a.backbone)?;
    let (state, _) = load_adaptation(&a.adaptation, &ck.params)?;
    let base = ModelBundle::new(ck.params.clone(), None, ck.vocab.clone())?;
    let adapted = ModelBundle::new(ck.params, Some(state), ck.vocab)?;
    let samples = ingest_jsonl(&a.data)?;
    let cmp = compare_perplexity(&base, &adapted, &samples)?;
    let text = serde_json::to_string_pretty(&cmp).expect("comparison serializes") + "\n";
    match &a.out {
        Some(out) => {
            write_file(out, &text)?;
            m.output(out)?;
            m.summary = to_json(&cmp);
            m.finish(out)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}
