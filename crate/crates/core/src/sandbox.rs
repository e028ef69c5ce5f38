//! Isolated execution of generated candidates against their unit tests.
//!
//! Each candidate runs in its own child process with a fresh temporary
//! working directory, a wall-clock timeout, a best-effort memory cap, and
//! network access stubbed out. This is process-level isolation, not a
//! container: it protects experiments from runaway candidates, not the host
//! from hostile code.

use std::io::Read;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Marker printed after the candidate's module-level code has executed.
const TESTS_BEGIN: &str = "__SANDBOX_TESTS_BEGIN_7f3a__";
/// Marker printed only when every test snippet ran without raising.
const ALL_PASS: &str = "__SANDBOX_ALL_TESTS_PASSED_7f3a__";

/// Diagnostics from candidate output are truncated to this many bytes.
const DIAGNOSTIC_CAP: usize = 4096;

/// Cap on how much child output is retained while draining the pipes.
const OUTPUT_CAP: usize = 64 * 1024;

const POLL_INTERVAL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone)]
pub struct SandboxPolicy {
    pub timeout: Duration,
    pub memory_cap_bytes: u64,
    pub allow_network: bool,
}

impl Default for SandboxPolicy {
    fn default() -> Self {
        SandboxPolicy {
            timeout: Duration::from_secs(10),
            memory_cap_bytes: 512 * 1024 * 1024,
            allow_network: false,
        }
    }
}

impl SandboxPolicy {
    fn validate(&self) -> Result<(), SandboxError> {
        if self.timeout.is_zero() {
            return Err(SandboxError::InvalidPolicy("timeout must be > 0".into()));
        }
        if self.memory_cap_bytes == 0 {
            return Err(SandboxError::InvalidPolicy(
                "memory cap must be > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    /// Every test snippet executed and raised no failure.
    Pass,
    /// Tests started but at least one raised.
    Fail,
    /// Wall time exceeded the policy timeout.
    Timeout,
    /// The candidate never reached its tests (syntax/import/module-level
    /// failure).
    Error,
}

/// Verdict of running one generated candidate against a problem's tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    #[serde(rename = "task")]
    pub query_task_id: String,
    #[serde(rename = "sample")]
    pub sample_index: usize,
    pub verdict: Verdict,
    /// Wall-clock seconds the candidate ran.
    pub duration: f64,
    /// Truncated diagnostic text (candidate output is unbounded).
    pub detail: String,
}

/// One candidate submission: generated code plus the problem's tests.
#[derive(Debug, Clone)]
pub struct CandidateRun {
    pub query_task_id: String,
    pub sample_index: usize,
    pub code: String,
    pub tests: Vec<String>,
    pub language_tag: String,
}

/// Infrastructure failures, kept distinct from candidate verdicts: a spawn
/// failure must never be recorded as a candidate FAIL.
#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("invalid sandbox policy: {0}")]
    InvalidPolicy(String),
    #[error("parallelism must be >= 1")]
    InvalidParallelism,
    #[error("unsupported language tag {0:?}")]
    UnsupportedLanguage(String),
    #[error("failed to create sandbox working directory: {0}")]
    Workdir(std::io::Error),
    #[error("failed to spawn interpreter: {0}")]
    Spawn(std::io::Error),
    #[error("sandbox worker pool: {0}")]
    Pool(String),
}

/// Assemble the single execution unit: harness preamble, candidate source,
/// then the test snippets (MBPP-style assertion appending; the HumanEval
/// adapter routes its harness through `tests` as well).
fn python_program(code: &str, tests: &[String], policy: &SandboxPolicy) -> String {
    let mut program = String::new();
    program.push_str("import sys as _sb_sys\n");
    program.push_str(&format!(
        "try:\n    import resource as _sb_res\n    _sb_res.setrlimit(_sb_res.RLIMIT_AS, ({cap}, {cap}))\nexcept Exception:\n    pass\n",
        cap = policy.memory_cap_bytes
    ));
    if !policy.allow_network {
        program.push_str(concat!(
            "import socket as _sb_socket\n",
            "def _sb_no_net(*_a, **_k):\n",
            "    raise OSError('network disabled by sandbox')\n",
            "_sb_socket.socket = _sb_no_net\n",
            "_sb_socket.create_connection = _sb_no_net\n",
        ));
    }
    program.push('\n');
    program.push_str(code);
    program.push_str(&format!("\n\nprint({TESTS_BEGIN:?}, flush=True)\n"));
    for test in tests {
        program.push_str(test);
        program.push('\n');
    }
    program.push_str(&format!("print({ALL_PASS:?}, flush=True)\n"));
    program
}

/// Run one candidate under the policy and classify the result.
pub fn run_candidate(
    run: &CandidateRun,
    policy: &SandboxPolicy,
) -> Result<ExecutionOutcome, SandboxError> {
    policy.validate()?;
    if run.language_tag != "python" {
        return Err(SandboxError::UnsupportedLanguage(run.language_tag.clone()));
    }

    let workdir = tempfile::tempdir().map_err(SandboxError::Workdir)?;
    let program = python_program(&run.code, &run.tests, policy);

    let mut child = Command::new("python3")
        .arg("-I")
        .arg("-c")
        .arg(&program)
        .current_dir(workdir.path())
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .env_clear()
        .env("PATH", "/usr/local/bin:/usr/bin:/bin")
        .env("HOME", workdir.path())
        .env("TMPDIR", workdir.path())
        .spawn()
        .map_err(SandboxError::Spawn)?;

    let stdout_handle = drain(child.stdout.take().expect("piped stdout"));
    let stderr_handle = drain(child.stderr.take().expect("piped stderr"));

    let start = Instant::now();
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) => {
                if start.elapsed() >= policy.timeout {
                    let _ = child.kill();
                    let _ = child.wait();
                    timed_out = true;
                    break None;
                }
                std::thread::sleep(POLL_INTERVAL);
            }
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                break None;
            }
        }
    };
    let duration = start.elapsed().as_secs_f64();

    let stdout = stdout_handle.join().unwrap_or_default();
    let stderr = stderr_handle.join().unwrap_or_default();

    let verdict = if timed_out {
        Verdict::Timeout
    } else {
        let ok = status.map(|s| s.success()).unwrap_or(false);
        if ok && stdout.contains(ALL_PASS) {
            Verdict::Pass
        } else if stdout.contains(TESTS_BEGIN) {
            Verdict::Fail
        } else {
            Verdict::Error
        }
    };

    let detail = match verdict {
        Verdict::Pass => String::new(),
        Verdict::Timeout => format!(
            "wall time exceeded {:.1}s",
            policy.timeout.as_secs_f64()
        ),
        _ => truncate_utf8(&stderr, DIAGNOSTIC_CAP),
    };

    // The workdir (and anything the candidate wrote into it) is removed here.
    drop(workdir);

    Ok(ExecutionOutcome {
        query_task_id: run.query_task_id.clone(),
        sample_index: run.sample_index,
        verdict,
        duration,
        detail,
    })
}

/// Run a batch across a worker pool. Outcomes are order-aligned with the
/// input and independent of the parallelism degree.
pub fn run_batch(
    runs: &[CandidateRun],
    policy: &SandboxPolicy,
    parallelism: usize,
) -> Result<Vec<ExecutionOutcome>, SandboxError> {
    if parallelism == 0 {
        return Err(SandboxError::InvalidParallelism);
    }
    if runs.is_empty() {
        return Ok(Vec::new());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| SandboxError::Pool(e.to_string()))?;
    pool.install(|| {
        use rayon::prelude::*;
        runs.par_iter()
            .map(|run| run_candidate(run, policy))
            .collect()
    })
}

/// Drain a child pipe on a helper thread, keeping at most [`OUTPUT_CAP`]
/// bytes but always reading to EOF so the child never blocks on a full pipe.
fn drain<R: Read + Send + 'static>(mut reader: R) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut kept = Vec::new();
        let mut chunk = [0u8; 8192];
        loop {
            match reader.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if kept.len() < OUTPUT_CAP {
                        let take = n.min(OUTPUT_CAP - kept.len());
                        kept.extend_from_slice(&chunk[..take]);
                    }
                }
            }
        }
        String::from_utf8_lossy(&kept).into_owned()
    })
}

fn truncate_utf8(s: &str, cap: usize) -> String {
    if s.len() <= cap {
        return s.to_string();
    }
    let mut end = cap;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    s[..end].to_string()
}
