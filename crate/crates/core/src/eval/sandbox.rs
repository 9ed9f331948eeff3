//! Runs candidate programs in fresh subprocesses.
//!
//! The interpreter is configuration: a command template whose `{file}`
//! argument is replaced by the program path. Each run gets its own temporary
//! working directory, a cleared environment, and its own process group so a
//! timeout can kill everything the candidate spawned.

use serde::{Deserialize, Serialize};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};
use std::{env, fs, thread};

use crate::error::{CctError, Result};

pub const FILE_PLACEHOLDER: &str = "{file}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Pass,
    Fail,
    Timeout,
    CrashOrError,
}

impl Outcome {
    pub fn passed(self) -> bool {
        self == Outcome::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxConfig {
    /// Program and arguments; one argument should be `{file}`.
    pub command: Vec<String>,
    /// Upper bound on concurrently running candidates.
    pub workers: usize,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            command: vec!["python3".into(), "-I".into(), FILE_PLACEHOLDER.into()],
            workers: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sandbox {
    program: PathBuf,
    args: Vec<String>,
    workers: usize,
}

impl Sandbox {
    /// Resolves the interpreter up front so a missing command is reported
    /// before any candidate runs.
    pub fn new(config: &SandboxConfig) -> Result<Self> {
        let (prog, args) = config
            .command
            .split_first()
            .ok_or_else(|| CctError::Config("sandbox command is empty".into()))?;
        let program = resolve_program(prog).ok_or_else(|| {
            CctError::Config(format!("sandbox command `{prog}` not found"))
        })?;
        Ok(Self {
            program,
            args: args.to_vec(),
            workers: config.workers.max(1),
        })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Executes `source` and maps its exit status.
    pub fn run(&self, source: &str, timeout: Duration) -> Outcome {
        match self.try_run(source, timeout) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("sandbox run failed: {e}");
                Outcome::CrashOrError
            }
        }
    }

    fn try_run(&self, source: &str, timeout: Duration) -> Result<Outcome> {
        let dir = tempfile::tempdir()?;
        let file = dir.path().join("candidate.py");
        fs::write(&file, source)?;
        let stderr_path = dir.path().join("stderr.txt");
        let stderr = fs::File::create(&stderr_path)?;
        let file_arg = file.to_string_lossy();
        let args = self.args.iter().map(|a| a.replace(FILE_PLACEHOLDER, &file_arg));
        let mut child = Command::new(&self.program)
            .args(args)
            .current_dir(dir.path())
            .env_clear()
            .env("PATH", env::var_os("PATH").unwrap_or_default())
            .env("HOME", dir.path())
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(stderr)
            .process_group(0)
            .spawn()?;
        let pgid = child.id() as libc::pid_t;
        let deadline = Instant::now() + timeout;
        let mut nap = Duration::from_millis(1);
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break Some(status);
            }
            if Instant::now() >= deadline {
                break None;
            }
            thread::sleep(nap);
            nap = (nap * 2).min(Duration::from_millis(20));
        };
        // Reap anything the candidate left behind, finished or not.
        // SAFETY: signalling our own child's process group.
        unsafe {
            libc::killpg(pgid, libc::SIGKILL);
        }
        let Some(status) = status else {
            let _ = child.wait();
            return Ok(Outcome::Timeout);
        };
        if status.success() {
            return Ok(Outcome::Pass);
        }
        if status.code().is_none() {
            return Ok(Outcome::CrashOrError);
        }
        let err = fs::read_to_string(&stderr_path).unwrap_or_default();
        let failed_assert = err
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .is_some_and(|l| l.starts_with("AssertionError"));
        Ok(if failed_assert {
            Outcome::Fail
        } else {
            Outcome::CrashOrError
        })
    }

    /// Runs every job with at most `workers` in flight. Results come back in
    /// job order.
    pub fn run_many(&self, jobs: &[(String, Duration)]) -> Vec<Outcome> {
        let results = Mutex::new(vec![Outcome::CrashOrError; jobs.len()]);
        let next = AtomicUsize::new(0);
        thread::scope(|s| {
            for _ in 0..self.workers.min(jobs.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some((src, timeout)) = jobs.get(i) else { break };
                    let outcome = self.run(src, *timeout);
                    results.lock().expect("no panics while holding the lock")[i] = outcome;
                });
            }
        });
        results.into_inner().expect("workers joined")
    }
}

fn resolve_program(name: &str) -> Option<PathBuf> {
    if name.contains('/') {
        let p = Path::new(name);
        return p.is_file().then(|| p.to_path_buf());
    }
    env::split_paths(&env::var_os("PATH")?)
        .map(|dir| dir.join(name))
        .find(|p| p.is_file())
}
