//! Rootless podman backend: the production sandbox.
//!
//! The container runs with the invoking user mapped into its namespace
//! (`--userns=keep-id`), the workdir home bind-mounted on `/home`, the working
//! directory set to `/home/test`, networking disabled unless the test opts in,
//! and a hard `--timeout`. Output streams are captured and tagged by the
//! harness; `podman diff` supplies the container-layer delta after exit.

use std::io::BufRead;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::suite::TestCase;

use super::{
    io_ctx, snapshot_tree, tree_diff, write_diff_log, write_merged_log, ChangeKind,
    ContainerRunResult, FsChange, ImageId, ImageSpec, Runtime, SandboxError, Workdir,
};

pub struct PodmanRuntime {
    binary: String,
}

impl PodmanRuntime {
    pub fn new() -> Self {
        PodmanRuntime {
            binary: "podman".into(),
        }
    }

    /// Drive a specific binary instead of `podman` from PATH. Used to point
    /// at a different install location, and by tests at a scripted stand-in.
    pub fn with_binary(binary: impl Into<String>) -> Self {
        PodmanRuntime {
            binary: binary.into(),
        }
    }

    pub fn available(&self) -> bool {
        Command::new(&self.binary)
            .arg("--version")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    }

    /// The full `podman run` argv for a test. Pure, so the flag contract is
    /// testable without podman installed.
    pub fn run_argv(&self, wd: &Workdir, test: &TestCase, image: &ImageId) -> Vec<String> {
        let mut argv: Vec<String> = vec![
            "run".into(),
            "--name".into(),
            wd.container_name.clone(),
            "--userns=keep-id".into(),
            "--mount".into(),
            format!("type=bind,source={},destination=/home", wd.home.display()),
            "--workdir".into(),
            "/home/test".into(),
            "--timeout".into(),
            test.container_opts.timeout_s.to_string(),
        ];
        if !test.container_opts.network_enabled {
            argv.push("--network".into());
            argv.push("none".into());
        }
        for (src, dst) in &test.container_opts.extra_mounts {
            argv.push("--mount".into());
            argv.push(format!(
                "type=bind,source={},destination={}",
                wd.root.join(src).display(),
                dst
            ));
        }
        for opt in &test.container_opts.extra_opts {
            argv.push(opt.clone());
        }
        argv.push(image.0.clone());
        argv.push("/bin/bash".into());
        argv.push("/home/test/test.sh".into());
        argv
    }

    fn parse_diff(output: &str) -> Vec<FsChange> {
        let mut changes = Vec::new();
        for line in output.lines() {
            let (kind, path) = match line.split_once(' ') {
                Some(("A", p)) => (ChangeKind::Added, p),
                Some(("C", p)) => (ChangeKind::Changed, p),
                Some(("D", p)) => (ChangeKind::Deleted, p),
                _ => continue,
            };
            // The home mount is tracked by the host-side scanner.
            if path == "/home" || path.starts_with("/home/") {
                continue;
            }
            changes.push(FsChange::new(kind, path));
        }
        changes.sort();
        changes
    }
}

impl Default for PodmanRuntime {
    fn default() -> Self {
        Self::new()
    }
}

impl Runtime for PodmanRuntime {
    fn name(&self) -> &'static str {
        "podman"
    }

    fn build_image(&self, spec: &ImageSpec) -> Result<ImageId, SandboxError> {
        if !self.available() {
            return Err(SandboxError::RuntimeUnavailable(
                "podman binary not found or not functional".into(),
            ));
        }
        let tag = spec.image_tag();
        let exists = Command::new(&self.binary)
            .args(["image", "exists", &tag])
            .status()
            .map(|s| s.success())
            .unwrap_or(false);
        if exists {
            return Ok(ImageId(tag));
        }
        let build_dir =
            std::env::temp_dir().join(format!("shelljudge-build-{}", std::process::id()));
        std::fs::create_dir_all(&build_dir).map_err(io_ctx(&build_dir))?;
        let containerfile = build_dir.join("Containerfile");
        std::fs::write(&containerfile, spec.containerfile()).map_err(io_ctx(&containerfile))?;
        let output = Command::new(&self.binary)
            .args(["build", "-t", &tag, "-f"])
            .arg(&containerfile)
            .arg(&build_dir)
            .output()
            .map_err(|e| SandboxError::BuildFailed(format!("podman build: {e}")))?;
        let _ = std::fs::remove_dir_all(&build_dir);
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            let excerpt: String = stderr
                .lines()
                .rev()
                .take(10)
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .collect::<Vec<_>>()
                .join("\n");
            return Err(SandboxError::BuildFailed(excerpt));
        }
        Ok(ImageId(tag))
    }

    fn supports(&self, _test: &TestCase) -> Result<(), String> {
        Ok(())
    }

    fn run_container(
        &self,
        wd: &Workdir,
        test: &TestCase,
        image: &ImageId,
    ) -> Result<ContainerRunResult, SandboxError> {
        let before = snapshot_tree(&wd.home).map_err(io_ctx(&wd.home))?;

        let argv = self.run_argv(wd, test, image);
        let mut child = Command::new(&self.binary)
            .args(&argv)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| SandboxError::LaunchFailed(format!("spawn podman: {e}")))?;

        let merged = Arc::new(Mutex::new(Vec::new()));
        let out = spawn_tagger(child.stdout.take().expect("piped"), "STDOUT: ", &merged);
        let err = spawn_tagger(child.stderr.take().expect("piped"), "STDERR: ", &merged);

        // podman enforces --timeout inside; the harness deadline is a backstop
        // for a wedged client.
        let deadline = Instant::now()
            + Duration::from_secs(test.container_opts.timeout_s)
            + Duration::from_secs(20);
        let started = Instant::now();
        let mut harness_killed = false;
        let status = loop {
            match child.try_wait() {
                Ok(Some(s)) => break s,
                Ok(None) => {
                    if Instant::now() >= deadline {
                        harness_killed = true;
                        let _ = Command::new(&self.binary)
                            .args(["stop", "-t", "0", &wd.container_name])
                            .status();
                        let _ = child.kill();
                        break child.wait().map_err(|e| {
                            SandboxError::LaunchFailed(format!("wait after stop: {e}"))
                        })?;
                    }
                    std::thread::sleep(Duration::from_millis(50));
                }
                Err(e) => return Err(SandboxError::LaunchFailed(format!("wait: {e}"))),
            }
        };
        let _ = out.join();
        let _ = err.join();

        let exit_code = status.code().unwrap_or(-1);
        // SIGKILL from `podman --timeout` surfaces as 137 / -1 after the
        // timeout has elapsed.
        let timed_out = harness_killed
            || (started.elapsed() >= Duration::from_secs(test.container_opts.timeout_s)
                && exit_code != 0);

        let diff_out = Command::new(&self.binary)
            .args(["diff", &wd.container_name])
            .output()
            .map_err(|e| SandboxError::LaunchFailed(format!("podman diff: {e}")))?;
        let runtime_diff = Self::parse_diff(&String::from_utf8_lossy(&diff_out.stdout));

        let after = snapshot_tree(&wd.home).map_err(io_ctx(&wd.home))?;
        let merged_log = merged.lock().expect("merged log lock").clone();
        let result = ContainerRunResult {
            exit_code,
            timed_out,
            merged_log,
            runtime_diff,
            home_delta: tree_diff(&before, &after),
        };
        write_merged_log(wd, &result.merged_log)?;
        write_diff_log(wd, &result)?;
        Ok(result)
    }

    fn remove_container(&self, name: &str) -> Result<(), SandboxError> {
        let output = Command::new(&self.binary)
            .args(["rm", "-f", "-t", "0", name])
            .output()
            .map_err(|e| SandboxError::LaunchFailed(format!("podman rm: {e}")))?;
        // "no such container" is fine: removal is idempotent.
        if output.status.success()
            || String::from_utf8_lossy(&output.stderr).contains("no such container")
        {
            Ok(())
        } else {
            Err(SandboxError::CleanupFailed(vec![]))
        }
    }

    fn force_remove_workdir(&self, root: &Path) -> Result<(), SandboxError> {
        // Files created by in-container root live in the sub-uid range; remove
        // them from inside the user namespace.
        let status = Command::new(&self.binary)
            .args(["unshare", "rm", "-rf"])
            .arg(root)
            .status()
            .map_err(|e| SandboxError::LaunchFailed(format!("podman unshare: {e}")))?;
        if status.success() && !root.exists() {
            Ok(())
        } else {
            Err(SandboxError::CleanupFailed(vec![root.to_path_buf()]))
        }
    }
}

fn spawn_tagger<R: std::io::Read + Send + 'static>(
    stream: R,
    tag: &'static str,
    sink: &Arc<Mutex<Vec<String>>>,
) -> std::thread::JoinHandle<()> {
    let sink = Arc::clone(sink);
    std::thread::spawn(move || {
        for line in std::io::BufReader::new(stream).lines() {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::Workdir;
    use crate::suite::{Category, ContainerOverrides, ExecMode, Suite, VerificationSpec};
    use std::path::PathBuf;

    fn wd() -> Workdir {
        Workdir {
            root: PathBuf::from("/tmp/log/run1/bash1-test001"),
            log_root: PathBuf::from("/tmp/log"),
            home: PathBuf::from("/tmp/log/run1/bash1-test001/home"),
            test_home: PathBuf::from("/tmp/log/run1/bash1-test001/home/test"),
            candidate_file: PathBuf::from("/tmp/log/run1/bash1-test001/home/test/bash.sh"),
            log_file: PathBuf::from("/tmp/log/run1/bash1-test001/podman.log"),
            diff_file: PathBuf::from("/tmp/log/run1/bash1-test001/diff.log"),
            container_name: "sj-run1-bash1-test001".into(),
        }
    }

    fn case() -> TestCase {
        TestCase {
            id: "bash1/test001".into(),
            name: "t".into(),
            prompt: "p?".into(),
            reference_solution: "echo hi\n".into(),
            suite: Suite::SingleLineBash,
            category: Category::Other,
            exec_mode: ExecMode::Subshell,
            home_prototype: Vec::new(),
            pre_test: None,
            post_test: None,
            host_prologue: None,
            expected_changes: None,
            custom_eval: None,
            container_opts: ContainerOverrides::default(),
            verify: VerificationSpec::default(),
        }
    }

    #[test]
    fn run_argv_carries_the_contracted_flags() {
        let rt = PodmanRuntime::new();
        let image = ImageId("shelljudge-base:abc123".into());
        let argv = rt.run_argv(&wd(), &case(), &image);
        let joined = argv.join(" ");
        assert!(joined.contains("--name sj-run1-bash1-test001"));
        assert!(joined.contains("--userns=keep-id"));
        assert!(
            joined.contains("type=bind,source=/tmp/log/run1/bash1-test001/home,destination=/home")
        );
        assert!(joined.contains("--workdir /home/test"));
        assert!(joined.contains("--timeout 60"));
        assert!(joined.contains("--network none"), "network off by default");
        assert!(joined.ends_with("shelljudge-base:abc123 /bin/bash /home/test/test.sh"));
    }

    #[test]
    fn network_opt_in_removes_the_none_flag() {
        let rt = PodmanRuntime::new();
        let mut t = case();
        t.container_opts.network_enabled = true;
        let argv = rt.run_argv(&wd(), &t, &ImageId("img".into()));
        assert!(!argv.join(" ").contains("--network none"));
    }

    #[test]
    fn extra_mounts_and_opts_pass_through_verbatim() {
        let rt = PodmanRuntime::new();
        let mut t = case();
        t.container_opts.extra_mounts = vec![("extra-data".into(), "/mnt/data".into())];
        t.container_opts.extra_opts = vec!["--memory".into(), "256m".into()];
        let joined = rt.run_argv(&wd(), &t, &ImageId("img".into())).join(" ");
        assert!(joined.contains(
            "type=bind,source=/tmp/log/run1/bash1-test001/extra-data,destination=/mnt/data"
        ));
        assert!(joined.contains("--memory 256m"));
    }

    #[test]
    fn timeout_override_appears_in_argv() {
        let rt = PodmanRuntime::new();
        let mut t = case();
        t.container_opts.timeout_s = 5;
        let joined = rt.run_argv(&wd(), &t, &ImageId("img".into())).join(" ");
        assert!(joined.contains("--timeout 5"));
    }

    #[test]
    fn diff_parsing_maps_kinds_and_skips_the_home_mount() {
        let out = "C /etc\nC /etc/passwd\nA /etc/subuid\nD /var/tmp/x\nA /home/test/data.dat\njunk line\n";
        let changes = PodmanRuntime::parse_diff(out);
        assert_eq!(
            changes,
            vec![
                FsChange::new(ChangeKind::Added, "/etc/subuid"),
                FsChange::new(ChangeKind::Changed, "/etc"),
                FsChange::new(ChangeKind::Changed, "/etc/passwd"),
                FsChange::new(ChangeKind::Deleted, "/var/tmp/x"),
            ]
        );
    }
}
