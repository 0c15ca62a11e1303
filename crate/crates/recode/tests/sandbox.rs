mod common;

use recode::sandbox::GccSandbox;
use recode_core::eval::{FailureStage, Reexecutor, SandboxConfig};

fn sandbox(time: f64, mem: u64) -> GccSandbox {
    let cfg = SandboxConfig {
        time_limit_secs: time,
        memory_limit_bytes: mem,
        ..SandboxConfig::default()
    };
    GccSandbox::new(cfg, 4).unwrap()
}

macro_rules! require_gcc {
    () => {
        if !common::gcc_available() {
            eprintln!("skipped: gcc unavailable");
            return;
        }
    };
}

#[test]
fn known_good_programs_pass_with_their_exit_codes() {
    require_gcc!();
    let sb = sandbox(5.0, 256 << 20);
    let jobs: Vec<(String, Option<u8>)> = common::GOOD
        .iter()
        .map(|(s, c)| (s.to_string(), Some(*c)))
        .collect();
    for (r, (src, _)) in sb.reexecute_batch(&jobs).into_iter().zip(common::GOOD) {
        let o = r.unwrap();
        assert_eq!(o.score, 1, "{src}: {o:?}");
    }
}

#[test]
fn known_bad_programs_fail_at_the_right_stage() {
    require_gcc!();
    let sb = sandbox(1.0, 256 << 20);
    let jobs: Vec<(String, Option<u8>)> = common::BAD
        .iter()
        .map(|(s, _)| (s.to_string(), None))
        .collect();
    for (r, (src, stage)) in sb.reexecute_batch(&jobs).into_iter().zip(common::BAD) {
        let o = r.unwrap();
        assert_eq!((o.score, o.stage), (0, Some(stage)), "{src}: {o:?}");
        assert!(!o.detail.contains("/tmp/"), "{}", o.detail);
    }
}

#[test]
fn crashes_and_mismatches_are_tagged() {
    require_gcc!();
    let sb = sandbox(5.0, 256 << 20);
    let crash = sb
        .reexecute(
            "int main(void) { volatile int *p = 0; *p = 1; return 0; }",
            None,
        )
        .unwrap();
    assert_eq!(crash.stage, Some(FailureStage::Crash), "{crash:?}");
    let abort = sb
        .reexecute("#include <stdlib.h>\nint main(void) { abort(); }", None)
        .unwrap();
    assert_eq!(abort.stage, Some(FailureStage::Crash));
    let mism = sb
        .reexecute("int main(void) { return 4; }", Some(5))
        .unwrap();
    assert_eq!(
        (mism.stage, mism.exit_code),
        (Some(FailureStage::Mismatch), Some(4))
    );
    let any = sb.reexecute("int main(void) { return 4; }", None).unwrap();
    assert_eq!((any.score, any.exit_code), (1, Some(4)));
}

#[test]
fn scores_are_monotone_in_the_limits() {
    require_gcc!();
    let src = "#include <stdlib.h>\n#include <string.h>\n#include <stdio.h>\nint main(void) { size_t n = 96u << 20; char *p = malloc(n); if (!p) return 1; memset(p, 1, n); printf(\"%p\\n\", (void *)p); return 0; }";
    let tight = sandbox(5.0, 32 << 20).reexecute(src, Some(0)).unwrap();
    assert_eq!(tight.stage, Some(FailureStage::Memory));
    for (t, m) in [(5.0, 256u64 << 20), (10.0, 512 << 20), (20.0, 1 << 30)] {
        assert_eq!(
            sandbox(t, m).reexecute(src, Some(0)).unwrap().score,
            1,
            "{t} {m}"
        );
    }
    let slow = "#include <unistd.h>\nint main(void) { usleep(1500000); return 0; }";
    assert_eq!(
        sandbox(0.5, 256 << 20).reexecute(slow, None).unwrap().stage,
        Some(FailureStage::Timeout)
    );
    assert_eq!(
        sandbox(5.0, 256 << 20).reexecute(slow, None).unwrap().score,
        1
    );
}

#[test]
fn environment_reports_the_compiler() {
    require_gcc!();
    let v = sandbox(1.0, 1 << 20).environment().unwrap();
    assert!(v.to_lowercase().contains("gcc"), "{v}");
}

#[test]
fn custom_templates_substitute_both_placeholders() {
    require_gcc!();
    let cfg = SandboxConfig {
        compile_command: "cc -x c -o {out} {src} -lm".into(),
        ..SandboxConfig::default()
    };
    let sb = GccSandbox::new(cfg, 1).unwrap();
    let o = sb
        .reexecute(
            "#include <math.h>\nint main(void) { return (int)sqrt(49.0); }",
            Some(7),
        )
        .unwrap();
    assert_eq!(o.score, 1, "{o:?}");
}
