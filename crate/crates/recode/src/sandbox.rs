//! Compile-and-run sandbox for re-executability scoring.
//!
//! Each program gets a private temporary directory. The compile step runs the
//! configured template through `sh -c`; the binary then runs in its own
//! process group with no stdin/stdout, a CPU-time and address-space rlimit
//! backstop, and is polled for wall-clock time and resident memory. Crossing a
//! limit kills the whole group.

use std::fs::{self, File};
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use recode_core::eval::{FailureStage, ReexecOutcome, Reexecutor, SandboxConfig};
use recode_core::Error as CoreError;

const COMPILE_WALL_LIMIT: Duration = Duration::from_secs(120);
const OUTPUT_FILE_LIMIT: u64 = 16 << 20;
const POLL: Duration = Duration::from_millis(2);
const DETAIL_MAX: usize = 2000;

#[derive(Debug, Clone)]
pub struct GccSandbox {
    config: SandboxConfig,
    jobs: usize,
}

impl GccSandbox {
    pub fn new(config: SandboxConfig, jobs: usize) -> recode_core::Result<Self> {
        config.validate()?;
        if jobs == 0 {
            return Err(CoreError::Config("--jobs must be at least 1".into()));
        }
        Ok(GccSandbox { config, jobs })
    }

    pub fn jobs(&self) -> usize {
        self.jobs
    }

    fn compiler_program(&self) -> &str {
        self.config
            .compile_command
            .split_whitespace()
            .next()
            .unwrap_or("")
    }
}

enum Ending {
    Exited(i32),
    Signaled(i32),
    Killed(FailureStage),
}

struct Finished {
    ending: Ending,
    max_rss_bytes: u64,
}

fn set_limit(resource: libc::__rlimit_resource_t, soft: u64, hard: u64) -> std::io::Result<()> {
    let lim = libc::rlimit {
        rlim_cur: soft as libc::rlim_t,
        rlim_max: hard as libc::rlim_t,
    };
    if unsafe { libc::setrlimit(resource, &lim) } != 0 {
        return Err(std::io::Error::last_os_error());
    }
    Ok(())
}

fn rss_bytes(pid: i32) -> Option<u64> {
    let status = fs::read_to_string(format!("/proc/{pid}/status")).ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Waits for `pid`, killing its process group once it exceeds the wall or
/// memory limit.
fn supervise(pid: i32, wall: Duration, memory: Option<u64>) -> std::io::Result<Finished> {
    let start = Instant::now();
    let mut verdict = None;
    loop {
        let mut status = 0;
        let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
        let flags = if verdict.is_some() { 0 } else { libc::WNOHANG };
        let r = unsafe { libc::wait4(pid, &mut status, flags, &mut usage) };
        if r < 0 {
            let e = std::io::Error::last_os_error();
            if e.kind() == std::io::ErrorKind::Interrupted {
                continue;
            }
            return Err(e);
        }
        if r == pid {
            let max_rss_bytes = usage.ru_maxrss.max(0) as u64 * 1024;
            let ending = match verdict {
                Some(stage) => Ending::Killed(stage),
                None if libc::WIFSIGNALED(status) => Ending::Signaled(libc::WTERMSIG(status)),
                None => Ending::Exited(libc::WEXITSTATUS(status)),
            };
            return Ok(Finished {
                ending,
                max_rss_bytes,
            });
        }
        if verdict.is_none() {
            if memory.is_some_and(|m| rss_bytes(pid).is_some_and(|rss| rss > m)) {
                verdict = Some(FailureStage::Memory);
            } else if start.elapsed() > wall {
                verdict = Some(FailureStage::Timeout);
            }
            if verdict.is_some() {
                unsafe { libc::kill(-pid, libc::SIGKILL) };
                continue;
            }
        }
        thread::sleep(POLL);
    }
}

fn signal_name(sig: i32) -> String {
    let name = match sig {
        libc::SIGSEGV => "SIGSEGV",
        libc::SIGABRT => "SIGABRT",
        libc::SIGFPE => "SIGFPE",
        libc::SIGILL => "SIGILL",
        libc::SIGBUS => "SIGBUS",
        libc::SIGKILL => "SIGKILL",
        libc::SIGXCPU => "SIGXCPU",
        libc::SIGXFSZ => "SIGXFSZ",
        libc::SIGPIPE => "SIGPIPE",
        libc::SIGTERM => "SIGTERM",
        _ => return format!("signal {sig}"),
    };
    name.to_string()
}

fn sanitize(text: &str, dir: &Path) -> String {
    let mut s = text.replace(&*dir.to_string_lossy(), "<tmp>");
    if s.len() > DETAIL_MAX {
        let mut cut = DETAIL_MAX;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
        s.push_str("...");
    }
    s.trim_end().to_string()
}

fn in_own_group(cmd: &mut Command) {
    unsafe {
        cmd.pre_exec(|| {
            if libc::setpgid(0, 0) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }
}

impl GccSandbox {
    fn compile(&self, dir: &Path) -> recode_core::Result<Option<ReexecOutcome>> {
        let src = dir.join("prog.c");
        let out = dir.join("prog");
        let log_path = dir.join("compile.log");
        let rendered = self
            .config
            .render(&src.to_string_lossy(), &out.to_string_lossy());
        let log = File::create(&log_path)
            .map_err(|e| env_err(format!("cannot create compile log: {e}")))?;
        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(&rendered)
            .current_dir(dir)
            .stdin(Stdio::null())
            .stdout(log.try_clone().map_err(|e| env_err(e.to_string()))?)
            .stderr(log);
        in_own_group(&mut cmd);
        let child = cmd
            .spawn()
            .map_err(|e| env_err(format!("cannot start sh: {e}")))?;
        let done = supervise(child.id() as i32, COMPILE_WALL_LIMIT, None)
            .map_err(|e| env_err(e.to_string()))?;
        let mut text = String::new();
        if let Ok(mut f) = File::open(&log_path) {
            let _ = f.read_to_string(&mut text);
        }
        let text = sanitize(&text, dir);
        match done.ending {
            Ending::Exited(0) if out.exists() => Ok(None),
            Ending::Exited(0) => Ok(Some(ReexecOutcome::fail(
                FailureStage::Compile,
                "compiler produced no binary",
            ))),
            Ending::Exited(127) => Err(env_err(format!(
                "compiler `{}` not found: {text}",
                self.compiler_program()
            ))),
            Ending::Exited(code) => Ok(Some(ReexecOutcome::fail(
                FailureStage::Compile,
                format!("exit {code}: {text}"),
            ))),
            Ending::Signaled(sig) => Ok(Some(ReexecOutcome::fail(
                FailureStage::Compile,
                format!("compiler killed by {}", signal_name(sig)),
            ))),
            Ending::Killed(_) => Ok(Some(ReexecOutcome::fail(
                FailureStage::Compile,
                "compiler timed out",
            ))),
        }
    }

    fn run(&self, dir: &Path, expected: Option<u8>) -> recode_core::Result<ReexecOutcome> {
        let mem = self.config.memory_limit_bytes;
        let cpu = self.config.time_limit_secs.ceil() as u64 + 1;
        let mut cmd = Command::new(dir.join("prog"));
        cmd.current_dir(dir)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null());
        unsafe {
            cmd.pre_exec(move || {
                if libc::setpgid(0, 0) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
                set_limit(libc::RLIMIT_CPU, cpu, cpu + 1)?;
                set_limit(
                    libc::RLIMIT_AS,
                    mem.saturating_mul(4),
                    mem.saturating_mul(4),
                )?;
                set_limit(libc::RLIMIT_CORE, 0, 0)?;
                set_limit(libc::RLIMIT_FSIZE, OUTPUT_FILE_LIMIT, OUTPUT_FILE_LIMIT)?;
                Ok(())
            });
        }
        let child = cmd
            .spawn()
            .map_err(|e| env_err(format!("cannot start compiled program: {e}")))?;
        let wall = Duration::from_secs_f64(self.config.time_limit_secs);
        let done =
            supervise(child.id() as i32, wall, Some(mem)).map_err(|e| env_err(e.to_string()))?;
        let limits = format!("{} s, {} bytes", self.config.time_limit_secs, mem);
        Ok(match done.ending {
            Ending::Killed(FailureStage::Memory) => ReexecOutcome::fail(
                FailureStage::Memory,
                format!("resident memory above the limit ({limits})"),
            ),
            Ending::Killed(stage) => {
                ReexecOutcome::fail(stage, format!("wall-clock limit exceeded ({limits})"))
            }
            _ if done.max_rss_bytes > mem => ReexecOutcome::fail(
                FailureStage::Memory,
                format!(
                    "peak resident memory {} bytes above the limit ({limits})",
                    done.max_rss_bytes
                ),
            ),
            Ending::Signaled(libc::SIGXCPU) => ReexecOutcome::fail(
                FailureStage::Timeout,
                format!("CPU limit exceeded ({limits})"),
            ),
            Ending::Signaled(sig) => ReexecOutcome::fail(
                FailureStage::Crash,
                format!("terminated by {}", signal_name(sig)),
            ),
            Ending::Exited(code) => match expected {
                Some(want) if want as i32 != code => {
                    let mut o = ReexecOutcome::fail(
                        FailureStage::Mismatch,
                        format!("exit code {code}, expected {want}"),
                    );
                    o.exit_code = Some(code);
                    o
                }
                _ => ReexecOutcome::pass(code),
            },
        })
    }
}

fn env_err(msg: String) -> CoreError {
    CoreError::EnvironmentUnavailable(msg)
}

impl Reexecutor for GccSandbox {
    fn sandbox(&self) -> &SandboxConfig {
        &self.config
    }

    fn environment(&self) -> recode_core::Result<String> {
        let prog = self.compiler_program();
        if prog.is_empty() {
            return Err(env_err("empty compiler command".into()));
        }
        let out = Command::new(prog)
            .arg("--version")
            .stdin(Stdio::null())
            .output()
            .map_err(|e| env_err(format!("compiler `{prog}` not runnable: {e}")))?;
        if !out.status.success() {
            return Err(env_err(format!(
                "`{prog} --version` failed with {}",
                out.status
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        Ok(text.lines().next().unwrap_or(prog).trim().to_string())
    }

    fn reexecute(&self, src: &str, expected: Option<u8>) -> recode_core::Result<ReexecOutcome> {
        let dir = tempfile::Builder::new()
            .prefix("recode-run-")
            .tempdir()
            .map_err(|e| env_err(format!("cannot create a temporary directory: {e}")))?;
        fs::write(dir.path().join("prog.c"), src)
            .map_err(|e| env_err(format!("cannot write program: {e}")))?;
        if let Some(fail) = self.compile(dir.path())? {
            return Ok(fail);
        }
        self.run(dir.path(), expected)
    }

    fn reexecute_batch(
        &self,
        jobs: &[(String, Option<u8>)],
    ) -> Vec<recode_core::Result<ReexecOutcome>> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<recode_core::Result<ReexecOutcome>>>> =
            Mutex::new((0..jobs.len()).map(|_| None).collect());
        thread::scope(|s| {
            for _ in 0..self.jobs.min(jobs.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some((src, exp)) = jobs.get(i) else { break };
                    let r = self.reexecute(src, *exp);
                    results.lock().unwrap()[i] = Some(r);
                });
            }
        });
        results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every job ran"))
            .collect()
    }
}
