//! Evaluation: edit similarity, embedding-based semantic similarity,
//! re-executability of generated source, perplexity, and the reports that
//! collect them.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::adaptation::AdaptationState;
use crate::corpus::{Sample, Task};
use crate::error::{Error, Result};
use crate::model::{generate, masked_nll, BackboneParams, Generation, LossMask, Sampling};
use crate::tokenizer::{self, Role, Vocab};

mod edit;
mod reexec;
mod semantic;

pub use edit::{edit_similarity, edit_similarity_in, levenshtein, similarity_of, Unit};
pub use reexec::{FailureStage, ReexecOutcome, Reexecutor, SandboxConfig, DEFAULT_COMPILE_COMMAND};
pub use semantic::semantic_similarity;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Backbone, optional adaptation and the vocabulary they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub backbone: BackboneParams,
    pub adaptation: Option<AdaptationState>,
    pub vocab: Vocab,
}

impl ModelBundle {
    pub fn new(
        backbone: BackboneParams,
        adaptation: Option<AdaptationState>,
        vocab: Vocab,
    ) -> Result<Self> {
        if vocab.len() != backbone.config.vocab_size {
            return Err(Error::Shape(format!(
                "vocabulary of {} tokens for a model with {} outputs",
                vocab.len(),
                backbone.config.vocab_size
            )));
        }
        if let Some(a) = &adaptation {
            a.validate_against(&backbone.config)?;
        }
        Ok(ModelBundle {
            backbone,
            adaptation,
            vocab,
        })
    }

    pub fn n_prefix(&self) -> usize {
        self.adaptation
            .as_ref()
            .map_or(1, AdaptationState::n_prefix)
    }

    pub fn max_context(&self) -> usize {
        self.backbone
            .config
            .max_context
            .min(self.vocab.max_context())
    }

    /// Adaptation routed to `task`.
    pub fn routed(&self, task: Task) -> Result<Option<AdaptationState>> {
        self.adaptation
            .as_ref()
            .map(|a| a.select_task(task))
            .transpose()
    }

    pub fn prompt(&self, task: Task, input: &str) -> Result<Vec<u32>> {
        let ids = tokenizer::prompt_ids(&self.vocab, task, input, self.n_prefix());
        let max = self.max_context();
        if ids.len() >= max {
            return Err(Error::ContextOverflow {
                len: ids.len() + 1,
                max,
            });
        }
        Ok(ids)
    }

    /// Translates `input`, generating until EOS or the context is full.
    pub fn translate(
        &self,
        task: Task,
        input: &str,
        mode: Sampling,
    ) -> Result<(String, Generation)> {
        let prompt = self.prompt(task, input)?;
        let routed = self.routed(task)?;
        let max_new = self.max_context() - prompt.len();
        let g = generate(&self.backbone, routed.as_ref(), &prompt, mode, max_new)?;
        Ok((self.vocab.decode(g.output())?, g))
    }

    /// Summed NLL and token count of a sample's reference output.
    pub fn reference_nll(&self, sample: &Sample) -> Result<(f64, usize)> {
        let enc = tokenizer::encode_pair(&self.vocab, sample, self.n_prefix());
        let routed = self.routed(sample.task)?;
        masked_nll(
            &self.backbone,
            routed.as_ref(),
            &enc.ids,
            &LossMask::OutputFrom(enc.output_start),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Metric {
    Edit,
    Sem,
    Reexec,
}

impl Metric {
    pub fn tag(self) -> &'static str {
        match self {
            Metric::Edit => "edit",
            Metric::Sem => "sem",
            Metric::Reexec => "reexec",
        }
    }

    /// Parses a comma-separated list such as `edit,sem`; empty means none.
    pub fn parse_list(s: &str) -> Result<BTreeSet<Metric>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl core::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edit" => Ok(Metric::Edit),
            "sem" => Ok(Metric::Sem),
            "reexec" => Ok(Metric::Reexec),
            other => Err(Error::Config(format!(
                "unknown metric {other:?} (expected edit, sem or reexec)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub metrics: BTreeSet<Metric>,
    pub unit: Unit,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            metrics: [Metric::Edit, Metric::Sem].into_iter().collect(),
            unit: Unit::Char,
            sampling: Sampling::Greedy,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SampleRecord {
    pub id: String,
    pub task: Task,
    pub excluded: bool,
    pub prediction: Option<String>,
    pub exact_match: Option<bool>,
    pub edit_sim: Option<f64>,
    pub sem_sim: Option<f64>,
    pub reexec: Option<u8>,
    pub reexec_stage: Option<FailureStage>,
    pub reexec_detail: Option<String>,
    /// Teacher-forced NLL of the reference output and its token count.
    pub reference_nll: Option<f64>,
    pub reference_tokens: Option<usize>,
    pub error: Option<String>,
}

impl SampleRecord {
    /// A record with nothing scored yet.
    pub fn new(id: impl Into<String>, task: Task) -> Self {
        SampleRecord {
            id: id.into(),
            task,
            excluded: false,
            prediction: None,
            exact_match: None,
            edit_sim: None,
            sem_sim: None,
            reexec: None,
            reexec_stage: None,
            reexec_detail: None,
            reference_nll: None,
            reference_tokens: None,
            error: None,
        }
    }

    /// Counted in aggregates: not excluded and translated without error.
    pub fn evaluated(&self) -> bool {
        !self.excluded && self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Aggregate {
    pub samples: usize,
    pub evaluated: usize,
    pub excluded: usize,
    pub failed: usize,
    pub exact_matches: usize,
    pub mean_edit_sim: Option<f64>,
    pub mean_sem_sim: Option<f64>,
    pub reexec_passed: usize,
    pub reexec_scored: usize,
    pub reexec_rate: Option<f64>,
    pub perplexity: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Aggregate {
    /// Derived purely from the records; excluded and failed samples only
    /// contribute to their counters.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a SampleRecord> + Clone) -> Self {
        let all: Vec<&SampleRecord> = records.into_iter().collect();
        let ok: Vec<&SampleRecord> = all.iter().copied().filter(|r| r.evaluated()).collect();
        let reexec: Vec<u8> = ok.iter().filter_map(|r| r.reexec).collect();
        let reexec_passed = reexec.iter().filter(|s| **s == 1).count();
        let (nll, tokens) = ok
            .iter()
            .filter_map(|r| Some((r.reference_nll?, r.reference_tokens?)))
            .fold((0.0, 0usize), |(s, n), (a, b)| (s + a, n + b));
        Aggregate {
            samples: all.len(),
            evaluated: ok.len(),
            excluded: all.iter().filter(|r| r.excluded).count(),
            failed: all
                .iter()
                .filter(|r| !r.excluded && r.error.is_some())
                .count(),
            exact_matches: ok.iter().filter(|r| r.exact_match == Some(true)).count(),
            mean_edit_sim: mean(ok.iter().filter_map(|r| r.edit_sim)),
            mean_sem_sim: mean(ok.iter().filter_map(|r| r.sem_sim)),
            reexec_passed,
            reexec_scored: reexec.len(),
            reexec_rate: (!reexec.is_empty()).then(|| reexec_passed as f64 / reexec.len() as f64),
            perplexity: (tokens > 0).then(|| libm::exp(nll / tokens as f64)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalEnvironment {
    pub metrics: Vec<Metric>,
    pub unit: Unit,
    pub seed: u64,
    pub decoding: String,
    pub compiler_command: Option<String>,
    pub compiler: Option<String>,
    pub time_limit_secs: Option<f64>,
    pub memory_limit_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub schema_version: u32,
    pub records: Vec<SampleRecord>,
    pub per_task: BTreeMap<Task, Aggregate>,
    pub overall: Aggregate,
    pub environment: EvalEnvironment,
}

impl EvalReport {
    pub fn from_records(records: Vec<SampleRecord>, environment: EvalEnvironment) -> Self {
        let mut per_task = BTreeMap::new();
        for task in Task::ALL {
            if records.iter().any(|r| r.task == task) {
                per_task.insert(
                    task,
                    Aggregate::from_records(records.iter().filter(|r| r.task == task)),
                );
            }
        }
        let overall = Aggregate::from_records(records.iter());
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            records,
            per_task,
            overall,
            environment,
        }
    }

    /// True when every aggregate matches a recomputation from the records.
    pub fn aggregates_consistent(&self) -> bool {
        let again = EvalReport::from_records(self.records.clone(), self.environment.clone());
        again.per_task == self.per_task && again.overall == self.overall
    }
}

fn describe(mode: Sampling) -> String {
    match mode {
        Sampling::Greedy => String::from("greedy"),
        Sampling::Sampled { seed, temperature } => {
            format!("sampled(seed={seed}, temperature={temperature})")
        }
    }
}

/// Translates and scores every sample. Samples that do not fit the context
/// window are reported as excluded; a failing sample records its error and
/// never aborts the run. Re-executability applies to assembly-to-source
/// samples only, and requires a working `reexec` backend up front.
pub fn evaluate_corpus(
    bundle: &ModelBundle,
    samples: &[Sample],
    opts: &EvalOptions,
    reexec: Option<&dyn Reexecutor>,
) -> Result<EvalReport> {
    let mut env = EvalEnvironment {
        metrics: opts.metrics.iter().copied().collect(),
        unit: opts.unit,
        seed: opts.seed,
        decoding: describe(opts.sampling),
        compiler_command: None,
        compiler: None,
        time_limit_secs: None,
        memory_limit_bytes: None,
    };
    let reexec = if opts.metrics.contains(&Metric::Reexec) {
        let r = reexec.ok_or_else(|| {
            Error::EnvironmentUnavailable(String::from("no re-execution sandbox configured"))
        })?;
        r.sandbox().validate()?;
        env.compiler = Some(r.environment()?);
        env.compiler_command = Some(r.sandbox().compile_command.clone());
        env.time_limit_secs = Some(r.sandbox().time_limit_secs);
        env.memory_limit_bytes = Some(r.sandbox().memory_limit_bytes);
        Some(r)
    } else {
        None
    };

    let n_prefix = bundle.n_prefix();
    let max = bundle.max_context();
    let mut records = Vec::with_capacity(samples.len());
    let mut jobs: Vec<(usize, (String, Option<u8>))> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mut rec = SampleRecord::new(s.id.clone(), s.task);
        if tokenizer::pair_len(&bundle.vocab, s, n_prefix) > max {
            rec.excluded = true;
            records.push(rec);
            continue;
        }
        let mode = match opts.sampling {
            Sampling::Sampled { seed, temperature } => Sampling::Sampled {
                seed: seed ^ opts.seed.wrapping_add(i as u64),
                temperature,
            },
            Sampling::Greedy => Sampling::Greedy,
        };
        match bundle.translate(s.task, &s.input_text, mode) {
            Err(e) => rec.error = Some(e.to_string()),
            Ok((pred, _)) => {
                let (_, out_role) = Role::for_task(s.task);
                rec.exact_match = Some(pred == s.output_text);
                if opts.metrics.contains(&Metric::Edit) {
                    rec.edit_sim = Some(edit_similarity_in(
                        opts.unit,
                        &bundle.vocab,
                        out_role,
                        &pred,
                        &s.output_text,
                    ));
                }
                if opts.metrics.contains(&Metric::Sem) {
                    match semantic_similarity(
                        &bundle.backbone,
                        &bundle.vocab,
                        out_role,
                        &s.output_text,
                        &pred,
                    ) {
                        Ok(v) => rec.sem_sim = Some(v),
                        Err(Error::EmptyInput | Error::ContextOverflow { .. }) => {
                            rec.sem_sim = Some(0.0)
                        }
                        Err(e) => rec.error = Some(e.to_string()),
                    }
                }
                if reexec.is_some() && s.task == Task::AsmToSrc {
                    jobs.push((records.len(), (pred.clone(), s.expected_exit)));
                }
                match bundle.reference_nll(s) {
                    Ok((nll, n)) => {
                        rec.reference_nll = Some(nll);
                        rec.reference_tokens = Some(n);
                    }
                    Err(e) => rec.error = Some(e.to_string()),
                }
                rec.prediction = Some(pred);
            }
        }
        records.push(rec);
    }

    if let Some(r) = reexec {
        let batch: Vec<(String, Option<u8>)> = jobs.iter().map(|(_, j)| j.clone()).collect();
        for ((idx, _), outcome) in jobs.iter().zip(r.reexecute_batch(&batch)) {
            let rec = &mut records[*idx];
            match outcome {
                Ok(o) => {
                    rec.reexec = Some(o.score);
                    rec.reexec_stage = o.stage;
                    rec.reexec_detail = (!o.detail.is_empty()).then_some(o.detail);
                }
                Err(e @ Error::EnvironmentUnavailable(_)) => return Err(e),
                Err(e) => rec.error = Some(e.to_string()),
            }
        }
    }
    Ok(EvalReport::from_records(records, env))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PerplexityComparison {
    pub ppl_base: f64,
    pub ppl_adapted: f64,
    /// `ppl_adapted - ppl_base`; negative means adaptation helped.
    pub delta: f64,
    pub tokens: usize,
}

/// Output-segment perplexity of two bundles over the same token streams.
/// Both use the adapted bundle's sequence layout; samples that do not fit
/// the context are skipped.
pub fn compare_perplexity(
    base: &ModelBundle,
    adapted: &ModelBundle,
    samples: &[Sample],
) -> Result<PerplexityComparison> {
    if base.vocab != adapted.vocab {
        return Err(Error::Config(String::from(
            "bundles use different tokenizers",
        )));
    }
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n_prefix = adapted.n_prefix();
    let max = base.max_context().min(adapted.max_context());
    let mut totals = [0.0f64; 2];
    let mut tokens = 0;
    for s in samples {
        let enc = tokenizer::encode_pair(&adapted.vocab, s, n_prefix);
        if enc.ids.len() > max {
            continue;
        }
        let mask = LossMask::OutputFrom(enc.output_start);
        let mut count = 0;
        for (k, b) in [base, adapted].into_iter().enumerate() {
            let routed = b.routed(s.task)?;
            let (nll, n) = masked_nll(&b.backbone, routed.as_ref(), &enc.ids, &mask)?;
            totals[k] += nll;
            count = n;
        }
        tokens += count;
    }
    if tokens == 0 {
        return Err(Error::EmptyCorpus);
    }
    let ppl_base = libm::exp(totals[0] / tokens as f64);
    let ppl_adapted = libm::exp(totals[1] / tokens as f64);
    Ok(PerplexityComparison {
        ppl_base,
        ppl_adapted,
        delta: ppl_adapted - ppl_base,
        tokens,
    })
}
