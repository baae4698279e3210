//! Subprocess fallback backend for hosts without a container runtime.
//!
//! The driver runs as a plain child process with HOME pointed at the workdir
//! home, a private TMPDIR inside the workdir, and a process-group SIGKILL on
//! timeout. There is no mount, user or network isolation here: tests that
//! need superuser access, bind mounts, or an interpreter the host lacks are
//! refused up front rather than run unfaithfully.

use std::io::BufRead;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::suite::{ExecMode, Suite, TestCase};

use super::{
    io_ctx, snapshot_tree, tree_diff, write_diff_log, write_merged_log, ContainerRunResult,
    ImageId, ImageSpec, Runtime, SandboxError, Workdir,
};

pub struct ProcessRuntime {
    pwsh_available: bool,
}

impl ProcessRuntime {
    pub fn new() -> Self {
        let pwsh_available = Command::new("pwsh")
            .arg("-Version")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false);
        ProcessRuntime { pwsh_available }
    }
}

impl Default for ProcessRuntime {
    fn default() -> Self {
        Self::new()
    }
}

/// Spawn a reader thread that tags each line of `stream` and pushes it into
/// the shared merged log as it arrives.
fn tag_reader<R: std::io::Read + Send + 'static>(
    stream: R,
    tag: &'static str,
    sink: Arc<Mutex<Vec<String>>>,
) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || {
        let reader = std::io::BufReader::new(stream);
        for line in reader.lines() {
            match line {
                Ok(l) => sink
                    .lock()
                    .expect("merged log lock")
                    .push(format!("{tag}{l}")),
                Err(_) => break,
            }
        }
    })
}

impl Runtime for ProcessRuntime {
    fn name(&self) -> &'static str {
        "process"
    }

    fn build_image(&self, spec: &ImageSpec) -> Result<ImageId, SandboxError> {
        // No image to build; the "image" is the host shell. The id still keys
        // on the spec hash so callers observe the build-once contract.
        which_bash()?;
        Ok(ImageId(format!("process:{}", spec.content_hash())))
    }

    fn supports(&self, test: &TestCase) -> Result<(), String> {
        if test.exec_mode == ExecMode::Sudo {
            return Err("sudo exec mode requires the container runtime".into());
        }
        if test.suite == Suite::PowerShell && !self.pwsh_available {
            return Err("pwsh is not on the host PATH".into());
        }
        if !test.container_opts.extra_mounts.is_empty() {
            return Err("extra mounts require the container runtime".into());
        }
        Ok(())
    }

    fn run_container(
        &self,
        wd: &Workdir,
        test: &TestCase,
        _image: &ImageId,
    ) -> Result<ContainerRunResult, SandboxError> {
        if let Err(reason) = self.supports(test) {
            return Err(SandboxError::Unsupported(reason));
        }

        let before = snapshot_tree(&wd.home).map_err(io_ctx(&wd.home))?;

        let mut cmd = Command::new("bash");
        cmd.arg(wd.test_home.join("test.sh"))
            .current_dir(&wd.test_home)
            .env_clear()
            .env(
                "PATH",
                std::env::var("PATH").unwrap_or_else(|_| "/usr/bin:/bin".into()),
            )
            .env("HOME", &wd.test_home)
            .env("USER", "test")
            .env("LOGNAME", "test")
            .env("SHELL", "/bin/bash")
            .env("LANG", "C.UTF-8")
            .env("TERM", "dumb")
            // Containers default to UTC; match them so date-based tests agree
            // with host-side evaluators regardless of the host zone.
            .env("TZ", "UTC")
            .env("TMPDIR", wd.root.join("tmp"))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        {
            use std::os::unix::process::CommandExt;
            // Own process group so a timeout kill reaps every descendant.
            cmd.process_group(0);
        }

        let mut child = cmd
            .spawn()
            .map_err(|e| SandboxError::LaunchFailed(format!("spawn bash driver: {e}")))?;
        let pid = child.id() as i32;

        let merged = Arc::new(Mutex::new(Vec::new()));
        let out_thread = tag_reader(
            child.stdout.take().expect("piped stdout"),
            "STDOUT: ",
            Arc::clone(&merged),
        );
        let err_thread = tag_reader(
            child.stderr.take().expect("piped stderr"),
            "STDERR: ",
            Arc::clone(&merged),
        );

        let deadline = Instant::now() + Duration::from_secs(test.container_opts.timeout_s);
        let mut timed_out = false;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => {
                    if Instant::now() >= deadline {
                        timed_out = true;
                        // Kill the whole group; negative pid addresses the group.
                        unsafe {
                            libc::kill(-pid, libc::SIGKILL);
                        }
                        break child.wait().map_err(|e| {
                            SandboxError::LaunchFailed(format!("wait after kill: {e}"))
                        })?;
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(e) => {
                    return Err(SandboxError::LaunchFailed(format!("wait: {e}")));
                }
            }
        };
        let _ = out_thread.join();
        let _ = err_thread.join();
        // A second sweep catches group members that survived the first kill
        // (for example children spawned between the kill and the reap).
        if timed_out {
            unsafe {
                libc::kill(-pid, libc::SIGKILL);
            }
        }

        let exit_code = status.code().unwrap_or_else(|| {
            use std::os::unix::process::ExitStatusExt;
            status.signal().map(|s| 128 + s).unwrap_or(-1)
        });

        let after = snapshot_tree(&wd.home).map_err(io_ctx(&wd.home))?;
        let merged_log = Arc::try_unwrap(merged)
            .map(|m| m.into_inner().expect("merged log lock"))
            .unwrap_or_else(|arc| arc.lock().expect("merged log lock").clone());

        let result = ContainerRunResult {
            exit_code,
            timed_out,
            merged_log,
            runtime_diff: Vec::new(),
            home_delta: tree_diff(&before, &after),
        };
        write_merged_log(wd, &result.merged_log)?;
        write_diff_log(wd, &result)?;
        Ok(result)
    }

    fn remove_container(&self, _name: &str) -> Result<(), SandboxError> {
        // Nothing persists past the child process.
        Ok(())
    }

    fn force_remove_workdir(&self, root: &Path) -> Result<(), SandboxError> {
        std::fs::remove_dir_all(root).map_err(io_ctx(root))
    }
}

fn which_bash() -> Result<(), SandboxError> {
    Command::new("bash")
        .arg("--version")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map_err(|e| SandboxError::RuntimeUnavailable(format!("bash not runnable: {e}")))
        .and_then(|s| {
            if s.success() {
                Ok(())
            } else {
                Err(SandboxError::RuntimeUnavailable(
                    "bash not functional".into(),
                ))
            }
        })
}
