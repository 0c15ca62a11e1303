mod common;

use std::fs;
use std::path::Path;

use common::{ok, recode, tiny_backbone, FAST_TRAIN};
use recode::checkpoint::{load_adaptation, load_backbone};
use recode::jsonl::ingest_jsonl;
use recode::manifest::{manifest_path, RunManifest};
use recode::pipeline::{corpus_loss, pretraining_documents};
use recode_core::{BackboneParams, NormalizationConfig, Strategy, Task};

fn manifest(path: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(manifest_path(path)).unwrap()).unwrap()
}

fn finetune(dir: &Path, strategy: &str, out: &str, extra: &[&str]) {
    let mut args = vec![
        "finetune",
        "--strategy",
        strategy,
        "--backbone",
        "b.ckpt",
        "--data",
        "c.jsonl",
        "--out",
        out,
    ];
    args.extend_from_slice(&[
        "--max-steps",
        "4",
        "--adapter-rank",
        "4",
        "--lora-rank",
        "2",
        "--seed",
        "5",
    ]);
    args.extend_from_slice(FAST_TRAIN);
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn gen_writes_both_directions_deterministically() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &["gen", "--n", "5", "--seed", "1", "--out", "a.jsonl"],
    );
    ok(
        d.path(),
        &["gen", "--n", "5", "--seed", "1", "--out", "b.jsonl"],
    );
    let a = fs::read(d.path().join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(d.path().join("b.jsonl")).unwrap());
    let samples = ingest_jsonl(&d.path().join("a.jsonl")).unwrap();
    assert_eq!(samples.len(), 10);
    assert_eq!(
        samples.iter().filter(|s| s.task == Task::AsmToSrc).count(),
        5
    );
    assert!(samples.iter().all(|s| s.expected_exit.is_some()));
    let m = manifest(&d.path().join("a.jsonl"));
    assert_eq!((m.command.as_str(), m.seed), ("gen", Some(1)));
    assert_eq!(m.outputs.len(), 1);
}

#[test]
fn usage_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    let r = recode(d.path(), &["gen", "--n", "0", "--out", "x.jsonl"]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    assert!(!d.path().join("x.jsonl").exists());
    assert_eq!(recode(d.path(), &["frobnicate"]).code, 1);
    let r = recode(
        d.path(),
        &[
            "translate",
            "--task",
            "asm2c",
            "--in",
            "x",
            "--backbone",
            "b",
        ],
    );
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("asm2src"), "{}", r.stderr);
    assert_eq!(recode(d.path(), &["--help"]).code, 0);
    assert_eq!(recode(d.path(), &["tokenize"]).code, 1);
}

#[test]
fn data_errors_exit_with_two_and_name_the_problem() {
    let d = tempfile::tempdir().unwrap();
    let r = recode(
        d.path(),
        &["pretrain", "--corpus", "missing.jsonl", "--out", "b.ckpt"],
    );
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("missing.jsonl"), "{}", r.stderr);
    fs::write(
        d.path().join("bad.jsonl"),
        "{\"src\":\"a\",\"asm\":\"b\",\"task\":\"bogus\"}\n",
    )
    .unwrap();
    let r = recode(
        d.path(),
        &["ingest", "--input", "bad.jsonl", "--out", "o.jsonl"],
    );
    assert_eq!(r.code, 2);
    assert!(
        r.stderr.contains("line 1") && r.stderr.contains("bogus"),
        "{}",
        r.stderr
    );
}

#[test]
fn ingest_drops_overlong_samples_without_truncating() {
    let d = tempfile::tempdir().unwrap();
    let long = "x".repeat(100);
    let text = format!(
        "{{\"src\":\"int main(){{return 1;}}\",\"asm\":\"mov r0, 1\\nret r0\",\"task\":\"asm2src\"}}\n{{\"src\":\"{long}\",\"asm\":\"ret\",\"task\":\"src2asm\",\"id\":\"big\"}}\n"
    );
    fs::write(d.path().join("in.jsonl"), text).unwrap();
    let r = ok(
        d.path(),
        &[
            "ingest",
            "--input",
            "in.jsonl",
            "--out",
            "out.jsonl",
            "--max-context",
            "64",
        ],
    );
    assert!(r.stderr.contains("kept 1 of 2"), "{}", r.stderr);
    let kept = ingest_jsonl(&d.path().join("out.jsonl")).unwrap();
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].id, "1");
    let m = manifest(&d.path().join("out.jsonl"));
    assert_eq!(m.summary["excluded"], serde_json::json!(["big"]));
}

#[test]
fn normalize_and_tokenize() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("a.s"), "MOV EAX, 0x401000\nret").unwrap();
    let r = ok(d.path(), &["normalize", "--in", "a.s", "--no-randomize"]);
    assert!(r.stdout.starts_with("mov"), "{}", r.stdout);
    let again = ok(d.path(), &["normalize", "--in", "a.s", "--no-randomize"]);
    assert_eq!(r.stdout, again.stdout);

    ok(
        d.path(),
        &["tokenize", "--out", "v.json", "--max-context", "512"],
    );
    let v = recode::vocab_io::load_vocab(&d.path().join("v.json")).unwrap();
    assert_eq!(v.max_context(), 512);
    fs::write(d.path().join("x.s"), "ret").unwrap();
    let r = ok(
        d.path(),
        &[
            "tokenize", "--vocab", "v.json", "--encode", "x.s", "--role", "asm",
        ],
    );
    assert_eq!(r.stdout.trim(), v.opcode_id("ret").unwrap().to_string());
    fs::write(d.path().join("m.txt"), "vfmadd231ps\n\nmov\n").unwrap();
    ok(
        d.path(),
        &["tokenize", "--mnemonics", "m.txt", "--out", "v2.json"],
    );
    let v2 = recode::vocab_io::load_vocab(&d.path().join("v2.json")).unwrap();
    assert!(v2.opcode_id("vfmadd231ps").is_some());
}

#[test]
fn pretrain_checkpoint_reproduces_the_logged_loss() {
    let d = tempfile::tempdir().unwrap();
    tiny_backbone(d.path(), "20");
    let ck = load_backbone(&d.path().join("b.ckpt")).unwrap();
    let m = manifest(&d.path().join("b.ckpt"));
    let logged = m.summary["final_loss"].as_f64().unwrap();
    let samples = ingest_jsonl(&d.path().join("c.jsonl")).unwrap();
    let norm = NormalizationConfig {
        rng_seed: 3,
        ..NormalizationConfig::default()
    };
    let docs = pretraining_documents(&samples, &ck.vocab, Some(&norm));
    let again = corpus_loss(&ck.params, &docs.ids).unwrap();
    assert!((again - logged).abs() < 1e-5, "{again} vs {logged}");
    let csv = fs::read_to_string(d.path().join("b.ckpt.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
    assert!(csv.starts_with("step,loss,lr\n1,"));
    assert_eq!(m.inputs.len(), 1);
    assert_eq!(m.outputs.len(), 2);
}

#[test]
fn zero_steps_saves_the_initialization() {
    let d = tempfile::tempdir().unwrap();
    tiny_backbone(d.path(), "0");
    let ck = load_backbone(&d.path().join("b.ckpt")).unwrap();
    assert_eq!(
        ck.params,
        BackboneParams::init(ck.params.config.clone(), 3).unwrap()
    );
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &[
            "gen",
            "--n",
            "3",
            "--seed",
            "2",
            "--max-vars",
            "1",
            "--max-depth",
            "1",
            "--out",
            "c.jsonl",
        ],
    );
    fs::write(
        d.path().join("run.toml"),
        "[model]\nd_model = 16\nn_layers = 1\nn_heads = 2\nd_ff = 32\n[train]\nmax_steps = 3\nbatch_size = 2\ngrad_accum_steps = 1\n",
    )
    .unwrap();
    ok(
        d.path(),
        &[
            "pretrain", "--corpus", "c.jsonl", "--config", "run.toml", "--out", "a.ckpt",
        ],
    );
    ok(
        d.path(),
        &[
            "pretrain",
            "--corpus",
            "c.jsonl",
            "--config",
            "run.toml",
            "--max-steps",
            "2",
            "--d-model",
            "8",
            "--out",
            "b.ckpt",
        ],
    );
    let a = manifest(&d.path().join("a.ckpt"));
    let b = manifest(&d.path().join("b.ckpt"));
    assert_eq!(a.summary["steps"], 3);
    assert_eq!(b.summary["steps"], 2);
    assert_eq!(a.config["model"]["d_model"], 16);
    assert_eq!(b.config["model"]["d_model"], 8);
    assert_eq!(b.config["train"]["batch_size"], 2);
    assert_eq!(a.config["train"]["learning_rate"], 2e-4);
    assert_eq!(a.inputs.len(), 2);
    fs::write(d.path().join("bad.toml"), "[train]\nmax_stpes = 1\n").unwrap();
    assert_eq!(
        recode(
            d.path(),
            &["pretrain", "--corpus", "c.jsonl", "--config", "bad.toml", "--out", "x"]
        )
        .code,
        2
    );
}

#[test]
fn periodic_checkpoints_are_written() {
    let d = tempfile::tempdir().unwrap();
    tiny_backbone(d.path(), "1");
    finetune(d.path(), "ma", "a.ckpt", &["--checkpoint-every", "2"]);
    for step in [2, 4] {
        let p = d.path().join(format!("a.ckpt.step{step}"));
        let ck = load_backbone(&d.path().join("b.ckpt")).unwrap();
        load_adaptation(&p, &ck.params).unwrap();
    }
    assert!(!d.path().join("a.ckpt.step3").exists());
}

#[test]
fn finetune_strategies_store_their_parameters() {
    let d = tempfile::tempdir().unwrap();
    tiny_backbone(d.path(), "2");
    finetune(d.path(), "ma", "ma.ckpt", &[]);
    finetune(d.path(), "s2s", "s2s.ckpt", &["--n-prefix", "2"]);
    let ck = load_backbone(&d.path().join("b.ckpt")).unwrap();
    let (ma, _) = load_adaptation(&d.path().join("ma.ckpt"), &ck.params).unwrap();
    assert_eq!(ma.strategy, Strategy::MultiAdapter);
    assert_eq!(ma.adapters.len(), 2);
    assert!(ma.prefixes.is_empty());
    let (s2s, cfg) = load_adaptation(&d.path().join("s2s.ckpt"), &ck.params).unwrap();
    assert_eq!(s2s.strategy, Strategy::Seq2SeqUnified);
    assert_eq!(
        (
            s2s.adapters.len(),
            s2s.prefixes.len(),
            s2s.n_prefix(),
            cfg.n_prefix
        ),
        (0, 2, 2, 2)
    );
    let m = manifest(&d.path().join("ma.ckpt"));
    assert_eq!(
        m.summary["tasks"],
        serde_json::json!(["asm2src", "src2asm"])
    );
    let c = recode(
        d.path(),
        &[
            "finetune",
            "--strategy",
            "ma",
            "--backbone",
            "b.ckpt",
            "--data",
            "c.jsonl",
            "--out",
            "x",
            "--tasks",
            "asm2src",
            "--max-steps",
            "1",
            "--adapter-rank",
            "4",
        ],
    );
    assert_eq!(
        c.code, 2,
        "src2asm data without an src2asm adapter: {}",
        c.stderr
    );
}

#[test]
fn mismatched_backbone_is_refused() {
    let d = tempfile::tempdir().unwrap();
    tiny_backbone(d.path(), "1");
    finetune(d.path(), "ma", "a.ckpt", &[]);
    let mut args = vec![
        "pretrain",
        "--corpus",
        "c.jsonl",
        "--out",
        "wide.ckpt",
        "--max-steps",
        "0",
        "--d-model",
        "32",
    ];
    args.extend_from_slice(&["--n-layers", "1", "--n-heads", "2", "--d-ff", "32"]);
    ok(d.path(), &args);
    fs::write(d.path().join("in.s"), "mov r0, 1\nret r0\n").unwrap();
    let r = recode(
        d.path(),
        &[
            "translate",
            "--task",
            "asm2src",
            "--in",
            "in.s",
            "--backbone",
            "wide.ckpt",
            "--adaptation",
            "a.ckpt",
        ],
    );
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("d_model"), "{}", r.stderr);
}

#[test]
fn translate_refuses_inputs_beyond_the_context() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &[
            "gen",
            "--n",
            "2",
            "--seed",
            "1",
            "--max-vars",
            "1",
            "--max-depth",
            "0",
            "--out",
            "c.jsonl",
        ],
    );
    let mut args = vec![
        "pretrain",
        "--corpus",
        "c.jsonl",
        "--out",
        "b.ckpt",
        "--max-steps",
        "0",
        "--max-context",
        "64",
    ];
    args.extend_from_slice(common::TINY_MODEL);
    ok(d.path(), &args);
    fs::write(d.path().join("long.s"), "mov r0, 1\n".repeat(40)).unwrap();
    let r = recode(
        d.path(),
        &[
            "translate",
            "--task",
            "asm2src",
            "--in",
            "long.s",
            "--backbone",
            "b.ckpt",
            "--out",
            "t.txt",
        ],
    );
    assert_eq!(r.code, 2);
    assert!(
        r.stderr.contains("64-token context window") && r.stderr.contains("not truncated"),
        "{}",
        r.stderr
    );
    assert!(!d.path().join("t.txt").exists());
}

#[test]
fn translate_writes_stdout_or_file_and_supports_mixing() {
    let d = tempfile::tempdir().unwrap();
    tiny_backbone(d.path(), "2");
    finetune(d.path(), "ma", "a.ckpt", &[]);
    fs::write(d.path().join("in.s"), "mov r0, 1\nret r0\n").unwrap();
    let base = [
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
    let r = ok(d.path(), &base);
    let mut with_out = base.to_vec();
    with_out.extend_from_slice(&["--out", "t.txt"]);
    ok(d.path(), &with_out);
    assert_eq!(
        fs::read_to_string(d.path().join("t.txt")).unwrap() + "\n",
        r.stdout
    );
    let mut mixed = base.to_vec();
    mixed.extend_from_slice(&["--mix", "asm2src=0.5,src2asm=0.5"]);
    ok(d.path(), &mixed);
    let mut sampled = base.to_vec();
    sampled.extend_from_slice(&["--temperature", "0.8", "--seed", "4"]);
    assert_eq!(ok(d.path(), &sampled).stdout, ok(d.path(), &sampled).stdout);
}

#[test]
fn eval_writes_consistent_json_and_csv() {
    let d = tempfile::tempdir().unwrap();
    tiny_backbone(d.path(), "2");
    finetune(d.path(), "s2s", "a.ckpt", &[]);
    let metrics = if common::gcc_available() {
        "edit,sem,reexec"
    } else {
        "edit,sem"
    };
    ok(
        d.path(),
        &[
            "eval",
            "--data",
            "c.jsonl",
            "--backbone",
            "b.ckpt",
            "--adaptation",
            "a.ckpt",
            "--metrics",
            metrics,
            "--out",
            "rep",
            "--jobs",
            "2",
            "--time-limit",
            "2",
        ],
    );
    let rep: recode_core::eval::EvalReport =
        serde_json::from_str(&fs::read_to_string(d.path().join("rep.json")).unwrap()).unwrap();
    assert!(rep.aggregates_consistent());
    assert_eq!(rep.records.len(), 8);
    let mut r = csv::Reader::from_path(d.path().join("rep.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "edit_sim").unwrap();
    let edits: Vec<f64> = r
        .records()
        .map(|x| x.unwrap()[col].parse().unwrap())
        .collect();
    let mean = edits.iter().sum::<f64>() / edits.len() as f64;
    assert!((mean - rep.overall.mean_edit_sim.unwrap()).abs() < 1e-12);
    if metrics.contains("reexec") {
        assert_eq!(rep.per_task[&Task::AsmToSrc].reexec_scored, 4);
        assert_eq!(rep.per_task[&Task::SrcToAsm].reexec_scored, 0);
    }
    let m = manifest(&d.path().join("rep.json"));
    assert_eq!(m.outputs.len(), 2);

    ok(
        d.path(),
        &[
            "eval",
            "--data",
            "c.jsonl",
            "--backbone",
            "b.ckpt",
            "--metrics",
            "",
            "--out",
            "bare",
        ],
    );
    let bare: recode_core::eval::EvalReport =
        serde_json::from_str(&fs::read_to_string(d.path().join("bare.json")).unwrap()).unwrap();
    assert!(bare
        .records
        .iter()
        .all(|r| r.prediction.is_some() && r.edit_sim.is_none() && r.sem_sim.is_none()));
}

#[test]
fn eval_without_a_compiler_is_an_environment_error() {
    let d = tempfile::tempdir().unwrap();
    tiny_backbone(d.path(), "1");
    let r = recode(
        d.path(),
        &[
            "eval",
            "--data",
            "c.jsonl",
            "--backbone",
            "b.ckpt",
            "--metrics",
            "edit,reexec",
            "--compiler",
            "no-such-cc-71 -o {out} {src}",
            "--out",
            "rep",
        ],
    );
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(r.stderr.contains("no-such-cc-71"), "{}", r.stderr);
    assert!(!d.path().join("rep.json").exists() && !d.path().join("rep.csv").exists());
    let r = recode(
        d.path(),
        &[
            "eval",
            "--data",
            "c.jsonl",
            "--backbone",
            "b.ckpt",
            "--metrics",
            "reexec",
            "--compiler",
            "gcc {src}",
            "--out",
            "rep",
        ],
    );
    assert_eq!(r.code, 1, "{}", r.stderr);
}

#[test]
fn compare_ppl_reports_both_sides() {
    let d = tempfile::tempdir().unwrap();
    tiny_backbone(d.path(), "2");
    finetune(d.path(), "ma", "a.ckpt", &[]);
    let r = ok(
        d.path(),
        &[
            "compare-ppl",
            "--data",
            "c.jsonl",
            "--backbone",
            "b.ckpt",
            "--adaptation",
            "a.ckpt",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    let (b, a) = (
        v["ppl_base"].as_f64().unwrap(),
        v["ppl_adapted"].as_f64().unwrap(),
    );
    assert!((v["delta"].as_f64().unwrap() - (a - b)).abs() < 1e-12);
    assert!(v["tokens"].as_u64().unwrap() > 0);
    fs::write(d.path().join("empty.jsonl"), "").unwrap();
    assert_eq!(
        recode(
            d.path(),
            &[
                "compare-ppl",
                "--data",
                "empty.jsonl",
                "--backbone",
                "b.ckpt",
                "--adaptation",
                "a.ckpt"
            ]
        )
        .code,
        2
    );
}
