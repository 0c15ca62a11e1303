//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use recode::pipeline::{mini_corpus_samples, pretraining_documents};
use recode::report_io::report_body_json;
use recode::sandbox::GccSandbox;
use recode_core::adaptation::{lora_merge, AdaptationConfig};
use recode_core::corpus::{gen_mini_corpus_with, GenConfig};
use recode_core::eval::{
    compare_perplexity, edit_similarity, evaluate_corpus, EvalOptions, EvalReport, Metric,
    ModelBundle, Reexecutor, SandboxConfig,
};
use recode_core::model::{
    forward, generate_scored, loss_and_grads, sequence_logprob, GradRequest, Gradients, LossMask,
    Sampling,
};
use recode_core::train::{finetune, pretrain_clm, TrainConfig, Trainable};
use recode_core::{
    rng, tokenizer, AdaptationState, BackboneParams, ModelConfig, NormalizationConfig, Sample,
    Strategy, Task, Tensor, Vocab,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- 1: edit similarity against a brute-force recursion ----

fn brute_distance(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], memo: &mut [[Option<usize>; 7]; 7]) -> usize {
        if let Some(v) = memo[a.len()][b.len()] {
            return v;
        }
        let v = match (a.split_last(), b.split_last()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = go(ra, rb, memo) + usize::from(x != y);
                sub.min(go(ra, b, memo) + 1).min(go(a, rb, memo) + 1)
            }
        };
        memo[a.len()][b.len()] = Some(v);
        v
    }
    go(a, b, &mut [[None; 7]; 7])
}

fn all_strings(max_len: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut layer = vec![String::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|s| ['a', 'b', 'c'].map(|c| format!("{s}{c}")))
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

fn criterion_edit_oracle() -> Outcome {
    let start = Instant::now();
    let strings = all_strings(6);
    let mut pairs = 0usize;
    for a in &strings {
        for b in &strings {
            let max = a.len().max(b.len());
            let want = if max == 0 {
                1.0
            } else {
                1.0 - brute_distance(a.as_bytes(), b.as_bytes()) as f64 / max as f64
            };
            let got = edit_similarity(a, b);
            check(got == want, || format!("{a:?} vs {b:?}: {got} != {want}"))?;
            pairs += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{pairs} pairs over {{a,b,c}} up to length 6 match exactly in {secs:.2}s"
    ))
}

// ---- 2: finite-difference gradients ----

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-3;

fn fd_model(tied: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_context: 12,
        dropout: 0.0,
        tied_head: tied,
    }
}

fn plain_loss(
    p: &BackboneParams,
    st: Option<&AdaptationState>,
    ids: &[u32],
    mask: &LossMask,
) -> f64 {
    let req = GradRequest::default();
    let mut g = Gradients::zeros(p, st, &req);
    loss_and_grads(p, ids, mask, st, &req, 1.0, &mut g).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn fd_backbone(
    p: &BackboneParams,
    st: Option<&AdaptationState>,
    ids: &[u32],
    mask: &LossMask,
) -> Result<(usize, f64), String> {
    let req = GradRequest {
        backbone: true,
        adaptation: false,
        dropout_seed: None,
    };
    let mut g = Gradients::zeros(p, st, &req);
    loss_and_grads(p, ids, mask, st, &req, 1.0, &mut g).map_err(|e| e.to_string())?;
    let grads = g.backbone.unwrap();
    let analytic: Vec<(String, Tensor)> = grads
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let (mut n, mut worst) = (0, 0.0f64);
    for (ti, (name, a)) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let mut plus = p.clone();
            plus.tensors_mut()[ti].data_mut()[j] += FD_STEP;
            let mut minus = p.clone();
            minus.tensors_mut()[ti].data_mut()[j] -= FD_STEP;
            let num = (plain_loss(&plus, st, ids, mask) - plain_loss(&minus, st, ids, mask))
                / (2.0 * FD_STEP);
            let e = rel_err(a.data()[j], num);
            check(e < FD_TOL, || {
                format!("{name}[{j}]: analytic {} numeric {num}", a.data()[j])
            })?;
            worst = worst.max(e);
            n += 1;
        }
    }
    Ok((n, worst))
}

fn fd_adaptation(
    p: &BackboneParams,
    st: &AdaptationState,
    ids: &[u32],
    mask: &LossMask,
) -> Result<(usize, f64), String> {
    let req = GradRequest {
        backbone: false,
        adaptation: true,
        dropout_seed: None,
    };
    let mut g = Gradients::zeros(p, Some(st), &req);
    loss_and_grads(p, ids, mask, Some(st), &req, 1.0, &mut g).map_err(|e| e.to_string())?;
    let grads = g.adaptation.unwrap();
    let analytic: Vec<(String, Tensor)> = grads
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let (mut n, mut worst) = (0, 0.0f64);
    for (ti, (name, a)) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let mut plus = st.clone();
            plus.named_tensors_mut()[ti].1.data_mut()[j] += FD_STEP;
            let mut minus = st.clone();
            minus.named_tensors_mut()[ti].1.data_mut()[j] -= FD_STEP;
            let num = (plain_loss(p, Some(&plus), ids, mask)
                - plain_loss(p, Some(&minus), ids, mask))
                / (2.0 * FD_STEP);
            let e = rel_err(a.data()[j], num);
            check(e < FD_TOL, || {
                format!("{name}[{j}]: analytic {} numeric {num}", a.data()[j])
            })?;
            worst = worst.max(e);
            n += 1;
        }
    }
    Ok((n, worst))
}

/// Adaptation state with every tensor moved away from its identity init.
fn perturbed(
    p: &BackboneParams,
    strategy: Strategy,
    n_prefix: usize,
    seed: u64,
) -> AdaptationState {
    let cfg = AdaptationConfig {
        adapter_rank: 3,
        lora_rank: Some(2),
        lora_alpha: Some(3.0),
        n_prefix,
        ..AdaptationConfig::new(strategy)
    };
    let mut st = AdaptationState::new(&cfg, p, seed).unwrap();
    let mut r = rng::seeded(seed ^ 0x5eed);
    for (_, t) in st.named_tensors_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rng::normal(&mut r);
        }
    }
    st
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut total = 0;
    let mut worst = 0.0f64;
    let mut tally = |r: (usize, f64)| {
        total += r.0;
        worst = worst.max(r.1);
    };
    for tied in [false, true] {
        let p = BackboneParams::init(fd_model(tied), 21).unwrap();
        let ids = [1, 7, 3, 9, 4, 11, 6, 2];
        tally(fd_backbone(&p, None, &ids, &LossMask::All)?);
        tally(fd_backbone(&p, None, &ids, &LossMask::OutputFrom(4))?);
    }
    let p = BackboneParams::init(fd_model(false), 22).unwrap();
    for (strategy, task, n_prefix) in [
        (Strategy::MultiAdapter, Task::AsmToSrc, 1),
        (Strategy::Seq2SeqUnified, Task::SrcToAsm, 2),
    ] {
        let mut st = perturbed(&p, strategy, n_prefix, 8);
        st.set_active_task(task).unwrap();
        let pre = tokenizer::prefix_token(task);
        let mut ids = vec![tokenizer::BOS];
        ids.extend(std::iter::repeat_n(pre, n_prefix));
        ids.extend([7, 9, 10, tokenizer::SEP, 8, 11, 6, tokenizer::EOS]);
        let mask = LossMask::OutputFrom(n_prefix + 5);
        tally(fd_adaptation(&p, &st, &ids, &mask)?);
        tally(fd_backbone(&p, Some(&st), &ids, &mask)?);
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{total} backbone/adapter/LoRA/prefix entries within {FD_TOL:e} (worst {worst:.2e}) in {secs:.1}s"
    ))
}

// ---- 3 and 4: identity at init, LoRA merge ----

fn random_ids(r: &mut rng::Rng, vocab: usize, max_len: usize) -> Vec<u32> {
    let len = 2 + rng::below(r, (max_len - 1) as u64) as usize;
    let mut ids: Vec<u32> = (0..len)
        .map(|_| rng::below(r, vocab as u64) as u32)
        .collect();
    ids[0] = tokenizer::BOS;
    if len > 2 && rng::below(r, 2) == 0 {
        ids[1] = tokenizer::prefix_token(Task::ALL[rng::below(r, 2) as usize]);
    }
    ids
}

fn probe_model(seed: u64) -> BackboneParams {
    let v = Vocab::builtin(48).unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        d_ff: 32,
        ..ModelConfig::for_vocab(&v)
    };
    BackboneParams::init(cfg, seed).unwrap()
}

fn criterion_identity_at_init() -> Outcome {
    let p = probe_model(31);
    let mut r = rng::seeded(32);
    let states: Vec<AdaptationState> = [Strategy::MultiAdapter, Strategy::Seq2SeqUnified]
        .into_iter()
        .map(|s| {
            let cfg = AdaptationConfig {
                adapter_rank: 4,
                lora_rank: Some(4),
                ..AdaptationConfig::new(s)
            };
            AdaptationState::new(&cfg, &p, 33).unwrap()
        })
        .collect();
    for i in 0..100 {
        let ids = random_ids(&mut r, p.config.vocab_size, p.config.max_context);
        let bare = forward(&p, &ids, None).unwrap();
        for st in &states {
            let task = Task::ALL[i % 2];
            let routed = st.select_task(task).unwrap();
            let adapted = forward(&p, &ids, Some(&routed)).unwrap();
            let same = bare
                .data()
                .iter()
                .zip(adapted.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            check(same, || {
                format!("input {i} ({}): logits differ", st.strategy)
            })?;
        }
    }
    Ok("100 random inputs, both strategies, logits bit-identical to the bare backbone".into())
}

fn criterion_lora_merge() -> Outcome {
    let p = probe_model(41);
    let mut st = perturbed(&p, Strategy::MultiAdapter, 1, 42);
    for a in st.adapters.values_mut() {
        for l in &mut a.layers {
            l.up.fill(0.0);
        }
    }
    let merged = lora_merge(&p, st.lora.as_ref().unwrap()).map_err(|e| e.to_string())?;
    let mut r = rng::seeded(43);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let ids = random_ids(&mut r, p.config.vocab_size, p.config.max_context);
        let factored = forward(&p, &ids, Some(&st)).unwrap();
        let folded = forward(&merged, &ids, None).unwrap();
        worst = worst.max(factored.max_abs_diff(&folded));
    }
    let delta = forward(&p, &[1, 9, 20, 30], None)
        .unwrap()
        .max_abs_diff(&forward(&merged, &[1, 9, 20, 30], None).unwrap());
    check(delta > 1e-3, || {
        format!("LoRA delta too small to be meaningful ({delta:e})")
    })?;
    check(worst <= 1e-5, || {
        format!("max abs logit difference {worst:e}")
    })?;
    Ok(format!("100 probes, max abs logit difference {worst:.2e}"))
}

// ---- 5: frozen backbone and task isolation ----

fn criterion_isolation() -> Outcome {
    let programs = gen_mini_corpus_with(
        8,
        51,
        &GenConfig {
            max_vars: 1,
            max_depth: 1,
        },
    )
    .unwrap();
    let data: Vec<Sample> = mini_corpus_samples(&programs)
        .into_iter()
        .filter(|s| s.task == Task::AsmToSrc)
        .collect();
    let vocab = Vocab::builtin(128).unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        ..ModelConfig::for_vocab(&vocab)
    };
    let mut backbone = BackboneParams::init(cfg, 52).unwrap();
    backbone.frozen = true;
    let acfg = AdaptationConfig {
        adapter_rank: 4,
        lora_rank: Some(2),
        ..AdaptationConfig::new(Strategy::MultiAdapter)
    };
    let init = AdaptationState::new(&acfg, &backbone, 53).unwrap();
    let train = TrainConfig {
        batch_size: 4,
        grad_accum_steps: 1,
        learning_rate: 1e-2,
        max_steps: 500,
        weight_decay: 0.01,
        trainable: Trainable::AdaptationOnly,
        ..TrainConfig::default()
    };
    let before = (
        backbone.checksum(),
        init.adapters[&Task::SrcToAsm].checksum(),
        init.adapters[&Task::AsmToSrc].checksum(),
    );
    let (state, history) =
        finetune(&backbone, &init, &data, &vocab, &train).map_err(|e| e.to_string())?;
    check(history.len() == 500, || format!("{} steps", history.len()))?;
    let after = (
        backbone.checksum(),
        state.adapters[&Task::SrcToAsm].checksum(),
        state.adapters[&Task::AsmToSrc].checksum(),
    );
    check(after.0 == before.0, || "backbone checksum changed".into())?;
    check(after.1 == before.1, || {
        "SrcToAsm adapter checksum changed".into()
    })?;
    check(after.2 != before.2, || {
        "AsmToSrc adapter never moved".into()
    })?;
    check(
        state.adapters[&Task::SrcToAsm] == init.adapters[&Task::SrcToAsm],
        || "SrcToAsm adapter differs".into(),
    )?;
    Ok(format!(
        "500 AsmToSrc-only steps (loss {:.3} -> {:.3}); backbone {:016x} and SrcToAsm adapter {:016x} unchanged",
        history[0].loss,
        history[499].loss,
        after.0,
        after.1
    ))
}

// ---- 6, 7, 9: the memorization run ----

struct Memorized {
    bundle: ModelBundle,
    base: ModelBundle,
    samples: Vec<Sample>,
    train_secs: f64,
}

fn memorization_run() -> Result<Memorized, String> {
    let start = Instant::now();
    let programs = gen_mini_corpus_with(
        16,
        42,
        &GenConfig {
            max_vars: 1,
            max_depth: 1,
        },
    )
    .map_err(|e| e.to_string())?;
    let samples = mini_corpus_samples(&programs);
    let vocab = Vocab::builtin(256).unwrap();
    let model = ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        ..ModelConfig::for_vocab(&vocab)
    };
    let norm = NormalizationConfig {
        rng_seed: 1,
        ..NormalizationConfig::default()
    };
    let docs = pretraining_documents(&samples, &vocab, Some(&norm));
    let pre = TrainConfig {
        batch_size: 8,
        grad_accum_steps: 1,
        learning_rate: 3e-3,
        max_steps: 200,
        seed: 1,
        ..TrainConfig::default()
    };
    let init = BackboneParams::init(model, 1).unwrap();
    let (mut backbone, _) = pretrain_clm(&init, &docs.ids, &pre).map_err(|e| e.to_string())?;
    backbone.frozen = true;
    let acfg = AdaptationConfig {
        adapter_rank: 16,
        lora_rank: Some(8),
        ..AdaptationConfig::new(Strategy::MultiAdapter)
    };
    let state0 = AdaptationState::new(&acfg, &backbone, 1).unwrap();
    let ft = TrainConfig {
        max_steps: 500,
        trainable: Trainable::AdaptationOnly,
        ..pre
    };
    let (state, _) =
        finetune(&backbone, &state0, &samples, &vocab, &ft).map_err(|e| e.to_string())?;
    let base =
        ModelBundle::new(backbone.clone(), None, vocab.clone()).map_err(|e| e.to_string())?;
    let bundle = ModelBundle::new(backbone, Some(state), vocab).map_err(|e| e.to_string())?;
    Ok(Memorized {
        bundle,
        base,
        samples,
        train_secs: start.elapsed().as_secs_f64(),
    })
}

fn criterion_memorization(m: &Memorized) -> Outcome {
    let start = Instant::now();
    let opts = EvalOptions {
        metrics: [Metric::Edit, Metric::Sem].into_iter().collect(),
        ..EvalOptions::default()
    };
    let report = evaluate_corpus(&m.bundle, &m.samples, &opts, None).map_err(|e| e.to_string())?;
    let o = &report.overall;
    let exact = o.exact_matches;
    let edit = o.mean_edit_sim.unwrap_or(0.0);
    check(m.samples.len() == 32 && o.evaluated == 32, || {
        format!("{} evaluated of {}", o.evaluated, m.samples.len())
    })?;
    check(exact >= 30, || format!("{exact}/32 exact"))?;
    check(edit >= 0.95, || format!("mean edit_sim {edit}"))?;
    for r in report
        .records
        .iter()
        .filter(|r| r.exact_match == Some(true))
    {
        check(r.sem_sim == Some(1.0), || {
            format!("{}: exact match with sem_sim {:?}", r.id, r.sem_sim)
        })?;
    }
    let total = m.train_secs + start.elapsed().as_secs_f64();
    check(total <= 600.0, || format!("took {total:.0}s"))?;
    Ok(format!("{exact}/32 exact, mean edit_sim {edit:.4}, sem_sim 1.0 on every exact match, {total:.0}s end to end"))
}

fn criterion_perplexity(m: &Memorized) -> Outcome {
    let cmp = compare_perplexity(&m.base, &m.bundle, &m.samples).map_err(|e| e.to_string())?;
    check(cmp.delta < 0.0, || {
        format!("ppl_base {} ppl_adapted {}", cmp.ppl_base, cmp.ppl_adapted)
    })?;
    let same = compare_perplexity(&m.base, &m.base, &m.samples).map_err(|e| e.to_string())?;
    check(same.delta == 0.0, || {
        format!("self comparison delta {}", same.delta)
    })?;
    Ok(format!(
        "ppl_base {:.3} -> ppl_adapted {:.3} (delta {:.3}) over {} tokens",
        cmp.ppl_base, cmp.ppl_adapted, cmp.delta, cmp.tokens
    ))
}

fn criterion_factorization(m: &Memorized) -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut cases: Vec<(BackboneParams, Option<AdaptationState>, Vec<u32>)> = Vec::new();
    for s in m.samples.iter().take(6) {
        let prompt = m.bundle.prompt(s.task, &s.input_text).unwrap();
        cases.push((
            m.bundle.backbone.clone(),
            m.bundle.routed(s.task).unwrap(),
            prompt,
        ));
    }
    let p = probe_model(91);
    for (i, strategy) in [Strategy::MultiAdapter, Strategy::Seq2SeqUnified]
        .into_iter()
        .enumerate()
    {
        let st = perturbed(&p, strategy, 1, 92 + i as u64);
        cases.push((
            p.clone(),
            Some(st),
            vec![
                tokenizer::BOS,
                tokenizer::PREFIX_ASM2SRC,
                300,
                40,
                tokenizer::SEP,
            ],
        ));
    }
    cases.push((p.clone(), None, vec![tokenizer::BOS, 70, 71]));
    for (params, st, prompt) in &cases {
        let budget = (params.config.max_context - prompt.len()).min(40);
        for mode in [
            Sampling::Greedy,
            Sampling::Sampled {
                seed: 7,
                temperature: 0.9,
            },
        ] {
            let g = generate_scored(params, st.as_ref(), prompt, mode, budget)
                .map_err(|e| e.to_string())?;
            let incremental = g.total_logprob();
            let teacher = sequence_logprob(params, st.as_ref(), &g.generation.ids, prompt.len())
                .map_err(|e| e.to_string())?;
            let d = (incremental - teacher).abs();
            check(d <= 1e-5, || {
                format!("sum {incremental} vs teacher-forced {teacher}")
            })?;
            worst = worst.max(d);
            checked += 1;
        }
    }
    Ok(format!("{checked} generations, per-token sum equals teacher-forced log-probability within {worst:.2e}"))
}

// ---- 8: sandbox calibration ----

fn criterion_sandbox() -> Result<Option<String>, String> {
    let cfg = SandboxConfig {
        time_limit_secs: 1.0,
        ..SandboxConfig::default()
    };
    let sb = GccSandbox::new(cfg, 4).map_err(|e| e.to_string())?;
    if let Err(e) = sb.environment() {
        return Ok(None).inspect(|_: &Option<String>| eprintln!("{e}"));
    }
    let good: Vec<(String, Option<u8>)> = common::GOOD
        .iter()
        .map(|(s, c)| (s.to_string(), Some(*c)))
        .collect();
    let passed: u32 = sb
        .reexecute_batch(&good)
        .into_iter()
        .map(|r| r.map_or(0, |o| u32::from(o.score)))
        .sum();
    check(passed == 10, || {
        format!("{passed}/10 known-good programs passed")
    })?;
    let bad: Vec<(String, Option<u8>)> = common::BAD
        .iter()
        .map(|(s, _)| (s.to_string(), None))
        .collect();
    let mut scored = 0;
    for (r, (_, stage)) in sb.reexecute_batch(&bad).into_iter().zip(common::BAD) {
        let o = r.map_err(|e| e.to_string())?;
        check(o.stage == Some(stage), || {
            format!("expected {stage}, got {:?} ({})", o.stage, o.detail)
        })?;
        scored += u32::from(o.score);
    }
    check(scored == 0, || {
        format!("{scored}/10 known-bad programs passed")
    })?;
    Ok(Some(
        "10/10 known-good pass; 10/10 known-bad fail as 4 compile, 3 timeout, 3 memory".into(),
    ))
}

// ---- 10: determinism through the command-line tool ----

fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    use common::ok;
    ok(
        dir,
        &[
            "gen",
            "--n",
            "6",
            "--seed",
            "7",
            "--max-vars",
            "1",
            "--max-depth",
            "1",
            "--out",
            "c.jsonl",
        ],
    );
    let mut pre = vec![
        "pretrain",
        "--corpus",
        "c.jsonl",
        "--out",
        "b.ckpt",
        "--max-steps",
        "15",
        "--seed",
        "3",
        "--max-context",
        "128",
    ];
    pre.extend_from_slice(common::TINY_MODEL);
    pre.extend_from_slice(common::FAST_TRAIN);
    ok(dir, &pre);
    let mut ft = vec![
        "finetune",
        "--strategy",
        "ma",
        "--backbone",
        "b.ckpt",
        "--data",
        "c.jsonl",
        "--out",
        "a.ckpt",
    ];
    ft.extend_from_slice(&[
        "--max-steps",
        "10",
        "--adapter-rank",
        "4",
        "--lora-rank",
        "2",
        "--seed",
        "4",
    ]);
    ft.extend_from_slice(common::FAST_TRAIN);
    ok(dir, &ft);
    fs::write(
        dir.join("in.s"),
        "mov r1, 3\nmov r0, r1\nadd r0, 2\nret r0\n",
    )
    .unwrap();
    let tr = [
        "translate",
        "--task",
        "asm2src",
        "--in",
        "in.s",
        "--backbone",
        "b.ckpt",
        "--adaptation",
        "a.ckpt",
    ];
    ok(dir, &[&tr[..], &["--out", "greedy.txt"]].concat());
    ok(
        dir,
        &[
            &tr[..],
            &[
                "--out",
                "sampled.txt",
                "--temperature",
                "0.8",
                "--seed",
                "11",
            ],
        ]
        .concat(),
    );
    ok(
        dir,
        &[
            "eval",
            "--data",
            "c.jsonl",
            "--backbone",
            "b.ckpt",
            "--adaptation",
            "a.ckpt",
            "--metrics",
            "edit,sem",
            "--out",
            "rep",
            "--seed",
            "5",
        ],
    );
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(dir.join("rep.json")).unwrap()).unwrap();
    let mut out: Vec<(String, Vec<u8>)> = [
        "c.jsonl",
        "b.ckpt",
        "b.ckpt.loss.csv",
        "a.ckpt",
        "a.ckpt.loss.csv",
        "greedy.txt",
        "sampled.txt",
        "rep.csv",
    ]
    .into_iter()
    .map(|f| (f.to_string(), fs::read(dir.join(f)).unwrap()))
    .collect();
    out.push((
        "rep.json (body)".into(),
        report_body_json(&report).into_bytes(),
    ));
    out
}

fn criterion_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        check(x == y, || format!("{name} differs between runs"))?;
        check(!x.is_empty(), || format!("{name} is empty"))?;
    }
    Ok(format!("gen, pretrain, finetune, translate and eval outputs byte-identical across two runs ({} files)", first.len()))
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Result<Option<String>, String>) -> bool {
    let start = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match r {
        Ok(Some(detail)) => {
            println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]");
            true
        }
        Ok(None) => {
            println!("SKIP {n:>2} {name}: environment unavailable (no C compiler)");
            true
        }
        Err(e) => {
            println!("FAIL {n:>2} {name}: {e} [{secs:.1}s]");
            false
        }
    }
}

fn some(o: Outcome) -> Result<Option<String>, String> {
    o.map(Some)
}

fn main() {
    let mut ok = true;
    ok &= run(
        1,
        "edit similarity oracle",
        || some(criterion_edit_oracle()),
    );
    ok &= run(2, "gradient suite", || some(criterion_gradients()));
    ok &= run(3, "identity at init", || some(criterion_identity_at_init()));
    ok &= run(4, "LoRA merge equivalence", || some(criterion_lora_merge()));
    ok &= run(5, "frozen backbone and task isolation", || {
        some(criterion_isolation())
    });
    let memorized =
        catch_unwind(memorization_run).unwrap_or_else(|_| Err("memorization run panicked".into()));
    let memorized = &memorized;
    let with = |f: fn(&Memorized) -> Outcome| {
        move || match memorized {
            Ok(m) => some(f(m)),
            Err(e) => Err(format!("memorization run failed: {e}")),
        }
    };
    ok &= run(6, "memorization round-trip", with(criterion_memorization));
    ok &= run(
        7,
        "adaptation lowers perplexity",
        with(criterion_perplexity),
    );
    ok &= run(8, "re-executability calibration", criterion_sandbox);
    ok &= run(
        9,
        "log-probability factorization",
        with(criterion_factorization),
    );
    ok &= run(10, "determinism", || some(criterion_determinism()));
    if !ok {
        std::process::exit(1);
    }
}
