#![allow(dead_code)]

use recode_core::eval::FailureStage;

/// Programs that compile, finish quickly and stay small, with the exit code
/// they must produce.
pub const GOOD: [(&str, u8); 10] = [
    ("int main(void) { return 0; }", 0),
    ("int main(void) { int a = 6, b = 7; return a * b; }", 42),
    ("#include <stdio.h>\nint main(void) { printf(\"hello\\n\"); return 0; }", 0),
    ("int main(void) { int s = 0; for (int i = 0; i < 10; i++) s += i; return s; }", 45),
    ("static int fib(int n) { return n < 2 ? n : fib(n - 1) + fib(n - 2); }\nint main(void) { return fib(10); }", 55),
    ("#include <stdlib.h>\nint main(void) { int *p = malloc(1024 * sizeof *p); if (!p) return 1; p[5] = 9; int r = p[5]; free(p); return r; }", 9),
    ("#include <string.h>\nint main(void) { const char *s = \"recode\"; return (int)strlen(s); }", 6),
    ("struct P { int x, y; };\nint main(void) { struct P p = { 3, 4 }; return p.x * p.x + p.y * p.y; }", 25),
    ("#include <stdlib.h>\nint main(void) { exit(3); }", 3),
    ("int main(void) { unsigned x = 1; for (int i = 0; i < 7; i++) x <<= 1; return (int)(x & 0xff); }", 128),
];

/// Programs that must fail, with the stage that must be reported.
pub const BAD: [(&str, FailureStage); 10] = [
    ("int main(void) { return 0 }", FailureStage::Compile),
    ("int main(void) { return undefined_name; }", FailureStage::Compile),
    ("int main(void) { /* never closed\n return 0; }", FailureStage::Compile),
    ("int main(void) { int x = ; return x; }", FailureStage::Compile),
    ("int main(void) { volatile int x = 0; for (;;) x++; }", FailureStage::Timeout),
    ("int main(void) { volatile unsigned long n = 0; while (1) { n++; } return 0; }", FailureStage::Timeout),
    ("#include <unistd.h>\nint main(void) { for (;;) sleep(1); }", FailureStage::Timeout),
    (
        "#include <stdio.h>\n#include <stdlib.h>\n#include <string.h>\nint main(void) { size_t n = 512u << 20; char *p = malloc(n); if (!p) return 0; memset(p, 1, n); printf(\"%p\\n\", (void *)p); return 0; }",
        FailureStage::Memory,
    ),
    (
        "#include <stdio.h>\n#include <stdlib.h>\nint main(void) { size_t n = 400u << 20; volatile char *p = malloc(n); if (!p) return 0; for (size_t i = 0; i < n; i += 4096) p[i] = 1; printf(\"%p\\n\", (void *)p); return 0; }",
        FailureStage::Memory,
    ),
    (
        "#include <stdio.h>\n#include <stdlib.h>\n#include <string.h>\nint main(void) { char *p = 0; size_t n = 0; for (int i = 0; i < 600; i++) { p = realloc(p, n + (1u << 20)); if (!p) return 0; memset(p + n, 1, 1u << 20); n += 1u << 20; } printf(\"%p\\n\", (void *)p); return 0; }",
        FailureStage::Memory,
    ),
];

pub fn gcc_available() -> bool {
    std::process::Command::new("gcc")
        .arg("--version")
        .output()
        .is_ok_and(|o| o.status.success())
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn recode(dir: &std::path::Path, args: &[&str]) -> Run {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_recode"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

#[track_caller]
pub fn ok(dir: &std::path::Path, args: &[&str]) -> Run {
    let r = recode(dir, args);
    assert_eq!(r.code, 0, "recode {args:?} failed: {}", r.stderr);
    r
}

pub const TINY_MODEL: &[&str] = &[
    "--d-model",
    "16",
    "--n-layers",
    "1",
    "--n-heads",
    "2",
    "--d-ff",
    "32",
];
pub const FAST_TRAIN: &[&str] = &["--batch-size", "4", "--grad-accum", "1", "--lr", "0.003"];

/// Generates a small corpus and pretrains a tiny backbone on it in `dir`.
pub fn tiny_backbone(dir: &std::path::Path, steps: &str) {
    ok(
        dir,
        &[
            "gen",
            "--n",
            "4",
            "--seed",
            "9",
            "--max-vars",
            "1",
            "--max-depth",
            "1",
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
        steps,
        "--seed",
        "3",
    ];
    args.extend_from_slice(&["--max-context", "128"]);
    args.extend_from_slice(TINY_MODEL);
    args.extend_from_slice(FAST_TRAIN);
    ok(dir, &args);
}
