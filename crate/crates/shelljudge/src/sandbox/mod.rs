//! Sandbox runtime: base image, per-test working directories, candidate
//! execution, log capture and filesystem-delta collection.
//!
//! Two backends implement [`Runtime`]:
//! - [`podman::PodmanRuntime`] drives the rootless podman CLI: user-namespace
//!   mapping of the invoking user, the workdir home bind-mounted on `/home`,
//!   working directory `/home/test`, a hard timeout, and `podman diff` for the
//!   container-layer delta. This is the production path.
//! - [`process::ProcessRuntime`] runs the driver as a plain subprocess with a
//!   redirected HOME and a process-group kill timeout. It exists for
//!   environments without a container runtime; it offers no mount or system
//!   isolation, so it refuses tests that need superuser access, bind mounts,
//!   or an interpreter the host lacks.
//!
//! Changes to the mounted home are tracked by a host-side scanner that
//! snapshots the tree before and after the run and diffs by content digest;
//! container runtimes do not track mounted filesystems.

mod podman;
mod process;
mod scanner;

pub use podman::PodmanRuntime;
pub use process::ProcessRuntime;
pub use scanner::{snapshot_tree, tree_diff, TreeSnapshot};

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::suite::{ExecMode, Suite, TestCase};

/// The one shared base image: a multi-service universal base with a `test`
/// user in a passwordless-sudo wheel group. Built at most once per
/// content-hash; rebuilt only when the spec changes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSpec {
    pub base_ref: String,
    pub test_user: String,
    pub sudo_group: String,
    pub passwordless_sudo: bool,
    pub powershell_installed: bool,
}

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec {
            base_ref: "registry.access.redhat.com/ubi9-init".into(),
            test_user: "test".into(),
            sudo_group: "wheel".into(),
            passwordless_sudo: true,
            powershell_installed: true,
        }
    }
}

impl ImageSpec {
    /// The Containerfile this spec builds.
    pub fn containerfile(&self) -> String {
        let mut text = format!(
            "FROM {base}\nRUN useradd -m {user} && usermod -aG {group} {user}\n",
            base = self.base_ref,
            user = self.test_user,
            group = self.sudo_group,
        );
        if self.passwordless_sudo {
            text.push_str(&format!(
                "RUN echo '%{group} ALL=(ALL) NOPASSWD: ALL' > /etc/sudoers.d/{group}-nopasswd && chmod 0440 /etc/sudoers.d/{group}-nopasswd\n",
                group = self.sudo_group,
            ));
        }
        if self.powershell_installed {
            text.push_str(
                "RUN curl -fsSL https://packages.microsoft.com/config/rhel/9/packages-microsoft-prod.rpm -o /tmp/ms.rpm \\\n    && rpm -i /tmp/ms.rpm && dnf install -y powershell && dnf clean all && rm -f /tmp/ms.rpm\n",
            );
        }
        text
    }

    /// Stable content hash over everything that affects the built image.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.containerfile().as_bytes());
        hex::encode(&digest[..6])
    }

    pub fn image_tag(&self) -> String {
        format!("shelljudge-base:{}", self.content_hash())
    }
}

/// Opaque image identifier returned by a backend's build step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageId(pub String);

/// One test's disposable working directory under the log root.
#[derive(Debug, Clone)]
pub struct Workdir {
    /// `<log_root>/<run-id>/<test-id>`; deleted by cleanup.
    pub root: PathBuf,
    /// The log root the workdir lives under; cleanup never removes it.
    pub log_root: PathBuf,
    /// Mounted at `/home` in the container.
    pub home: PathBuf,
    /// The test user's home, `home/test`.
    pub test_home: PathBuf,
    /// Candidate snippet, written last during preparation.
    pub candidate_file: PathBuf,
    /// Merged stream-tagged log.
    pub log_file: PathBuf,
    /// Filesystem delta, one `<kind> <path>` per line.
    pub diff_file: PathBuf,
    /// Unique per (run id, test id).
    pub container_name: String,
}

/// Kind of filesystem change observed after a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChangeKind {
    Added,
    Changed,
    Deleted,
}

impl fmt::Display for ChangeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChangeKind::Added => "Added",
            ChangeKind::Changed => "Changed",
            ChangeKind::Deleted => "Deleted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FsChange {
    pub kind: ChangeKind,
    pub path: String,
}

impl FsChange {
    pub fn new(kind: ChangeKind, path: impl Into<String>) -> Self {
        FsChange {
            kind,
            path: path.into(),
        }
    }
}

/// Everything observable from one container run.
#[derive(Debug, Clone)]
pub struct ContainerRunResult {
    pub exit_code: i32,
    pub timed_out: bool,
    /// Merged output, every line tagged `STDOUT: ` or `STDERR: `.
    pub merged_log: Vec<String>,
    /// Container-layer changes (absolute container paths). Empty for the
    /// process backend, which has no layers.
    pub runtime_diff: Vec<FsChange>,
    /// Mounted-home changes, paths relative to the home mount.
    pub home_delta: Vec<FsChange>,
}

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("container runtime unavailable: {0}")]
    RuntimeUnavailable(String),
    #[error("image build failed: {0}")]
    BuildFailed(String),
    #[error("workdir copy failed at {path}: {detail}")]
    CopyFailed { path: PathBuf, detail: String },
    #[error("host prologue failed with exit code {code}: {stderr}")]
    HostPrologueFailed { code: i32, stderr: String },
    #[error("container launch failed: {0}")]
    LaunchFailed(String),
    #[error("cleanup left paths behind: {0:?}")]
    CleanupFailed(Vec<PathBuf>),
    #[error("test not supported by this runtime: {0}")]
    Unsupported(String),
    #[error("i/o error at {path}: {detail}")]
    Io { path: PathBuf, detail: String },
}

pub(crate) fn io_ctx(path: &Path) -> impl FnOnce(std::io::Error) -> SandboxError + '_ {
    move |e| SandboxError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// A sandbox backend. Implementations must be safe to share across the
/// worker pool; each worker owns its workdir and container exclusively.
pub trait Runtime: Send + Sync {
    fn name(&self) -> &'static str;

    /// Build (or find) the shared base image. Idempotent per spec hash.
    fn build_image(&self, spec: &ImageSpec) -> Result<ImageId, SandboxError>;

    /// Can this backend run the given test faithfully? `Err` carries the
    /// human-readable reason.
    fn supports(&self, test: &TestCase) -> Result<(), String>;

    /// Run the prepared workdir's driver to completion (or timeout) and
    /// collect logs and deltas.
    fn run_container(
        &self,
        wd: &Workdir,
        test: &TestCase,
        image: &ImageId,
    ) -> Result<ContainerRunResult, SandboxError>;

    /// Remove the named container if it exists. Idempotent.
    fn remove_container(&self, name: &str) -> Result<(), SandboxError>;

    /// Remove a workdir tree, including files owned by in-container root
    /// (mapped to sub-uid ranges on the host).
    fn force_remove_workdir(&self, root: &Path) -> Result<(), SandboxError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuntimeKind {
    Auto,
    Podman,
    Process,
}

impl std::str::FromStr for RuntimeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(RuntimeKind::Auto),
            "podman" => Ok(RuntimeKind::Podman),
            "process" => Ok(RuntimeKind::Process),
            other => Err(format!("unknown runtime `{other}` (auto|podman|process)")),
        }
    }
}

/// Pick a backend: podman when requested or auto-detected, otherwise the
/// process fallback.
pub fn select_runtime(kind: RuntimeKind) -> Result<Box<dyn Runtime>, SandboxError> {
    match kind {
        RuntimeKind::Podman => {
            let rt = PodmanRuntime::new();
            if !rt.available() {
                return Err(SandboxError::RuntimeUnavailable(
                    "podman binary not found or not functional".into(),
                ));
            }
            Ok(Box::new(rt))
        }
        RuntimeKind::Process => Ok(Box::new(ProcessRuntime::new())),
        RuntimeKind::Auto => {
            let rt = PodmanRuntime::new();
            if rt.available() {
                Ok(Box::new(rt))
            } else {
                Ok(Box::new(ProcessRuntime::new()))
            }
        }
    }
}

/// Sanitize a test id into a path / container-name component.
pub fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// Render the in-container test driver: pre_test, then the candidate in the
/// test's exec mode, then post_test. The driver never exits before post_test
/// runs, even when the candidate calls `exit`.
pub fn render_driver(test: &TestCase) -> String {
    let candidate_invocation = match (test.suite, test.exec_mode) {
        (Suite::PowerShell, ExecMode::Sudo) => {
            "sudo pwsh -NoProfile -File ./candidate.ps1".to_string()
        }
        // PowerShell has no bash shell context to source into; run it like a
        // subshell candidate.
        (Suite::PowerShell, _) => "( pwsh -NoProfile -File ./candidate.ps1 )".to_string(),
        (_, ExecMode::Subshell) => "( ./bash.sh )".to_string(),
        (_, ExecMode::Sourced) => ". ./bash.sh".to_string(),
        (_, ExecMode::Sudo) => "sudo bash ./bash.sh".to_string(),
    };

    let mut driver = String::from("#!/bin/bash\n# Test driver: pre_test, candidate, post_test.\ncd \"$(dirname \"$0\")\" || exit 1\n\n");
    if test.exec_mode == ExecMode::Sourced && test.suite != Suite::PowerShell {
        // post_test must observe shell state the candidate set, and must run
        // even when the sourced candidate calls `exit`: register it on EXIT
        // before sourcing.
        driver.push_str(
            "run_post_test() {\n    if [ -f ./post_test.sh ]; then\n        . ./post_test.sh\n    fi\n}\ntrap run_post_test EXIT\n\nif [ -f ./pre_test.sh ]; then\n    bash ./pre_test.sh\nfi\n\n",
        );
        driver.push_str(&candidate_invocation);
        driver.push('\n');
    } else {
        driver.push_str("if [ -f ./pre_test.sh ]; then\n    bash ./pre_test.sh\nfi\n\n");
        driver.push_str(&candidate_invocation);
        driver.push_str("\n\nif [ -f ./post_test.sh ]; then\n    bash ./post_test.sh\nfi\n");
    }
    driver
}

fn write_script(path: &Path, content: &str) -> Result<(), SandboxError> {
    use std::os::unix::fs::PermissionsExt;
    fs::write(path, content).map_err(io_ctx(path))?;
    fs::set_permissions(path, fs::Permissions::from_mode(0o755)).map_err(io_ctx(path))?;
    Ok(())
}

/// Prepare a fresh working directory for one run: deep-copy the home
/// prototype, materialize the driver and probe scripts, run the host prologue,
/// and write the candidate last with the executable bit set.
pub fn prepare_workdir(
    test: &TestCase,
    candidate_code: &str,
    run_id: &str,
    log_root: &Path,
) -> Result<Workdir, SandboxError> {
    let root = log_root.join(run_id).join(sanitize_id(&test.id));
    if root.exists() {
        fs::remove_dir_all(&root).map_err(io_ctx(&root))?;
    }
    let home = root.join("home");
    let test_home = home.join("test");
    fs::create_dir_all(&test_home).map_err(|e| SandboxError::CopyFailed {
        path: test_home.clone(),
        detail: e.to_string(),
    })?;
    fs::create_dir_all(root.join("tmp")).map_err(io_ctx(&root))?;

    // Deep copy of the prototype; the prototype itself is never touched.
    for entry in &test.home_prototype {
        use std::os::unix::fs::PermissionsExt;
        let path = test_home.join(&entry.rel_path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| SandboxError::CopyFailed {
                path: parent.to_path_buf(),
                detail: e.to_string(),
            })?;
        }
        fs::write(&path, &entry.content).map_err(|e| SandboxError::CopyFailed {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let mode = if entry.executable { 0o755 } else { 0o644 };
        fs::set_permissions(&path, fs::Permissions::from_mode(mode)).map_err(io_ctx(&path))?;
    }

    write_script(&test_home.join("test.sh"), &render_driver(test))?;
    if let Some(s) = &test.pre_test {
        write_script(&test_home.join("pre_test.sh"), s)?;
    }
    if let Some(s) = &test.post_test {
        write_script(&test_home.join("post_test.sh"), s)?;
    }

    if let Some(prologue) = &test.host_prologue {
        let script = root.join("host_prologue.sh");
        write_script(&script, prologue)?;
        let output = Command::new("bash")
            .arg(&script)
            .current_dir(&root)
            .env("WORKDIR_ROOT", &root)
            .env("WORKDIR_HOME", &test_home)
            .output()
            .map_err(io_ctx(&script))?;
        if !output.status.success() {
            return Err(SandboxError::HostPrologueFailed {
                code: output.status.code().unwrap_or(-1),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
    }

    // The candidate is written last so nothing in the setup can clobber it.
    let candidate_file = test_home.join(test.suite.candidate_file());
    let mut content = candidate_code.to_string();
    if !content.ends_with('\n') {
        content.push('\n');
    }
    write_script(&candidate_file, &content)?;

    Ok(Workdir {
        log_file: root.join("podman.log"),
        diff_file: root.join("diff.log"),
        container_name: format!("sj-{}-{}", sanitize_id(run_id), sanitize_id(&test.id)),
        candidate_file,
        test_home,
        home,
        log_root: log_root.to_path_buf(),
        root,
    })
}

/// Normalize a home-relative delta path to its absolute container path.
pub fn home_path_to_container(rel: &str) -> String {
    format!("/home/{rel}")
}

/// Write `diff.log`: runtime diff first, then the home delta, paths
/// normalized to absolute container paths.
pub(crate) fn write_diff_log(
    wd: &Workdir,
    result: &ContainerRunResult,
) -> Result<(), SandboxError> {
    let mut f = fs::File::create(&wd.diff_file).map_err(io_ctx(&wd.diff_file))?;
    for c in &result.runtime_diff {
        writeln!(f, "{} {}", c.kind, c.path).map_err(io_ctx(&wd.diff_file))?;
    }
    for c in &result.home_delta {
        writeln!(f, "{} {}", c.kind, home_path_to_container(&c.path))
            .map_err(io_ctx(&wd.diff_file))?;
    }
    Ok(())
}

pub(crate) fn write_merged_log(wd: &Workdir, lines: &[String]) -> Result<(), SandboxError> {
    let mut f = fs::File::create(&wd.log_file).map_err(io_ctx(&wd.log_file))?;
    for line in lines {
        writeln!(f, "{line}").map_err(io_ctx(&wd.log_file))?;
    }
    Ok(())
}

/// Remove the container and the working directory. Idempotent: a second call
/// on an already-clean state is a no-op success.
pub fn cleanup(wd: &Workdir, runtime: &dyn Runtime) -> Result<(), SandboxError> {
    runtime.remove_container(&wd.container_name)?;
    remove_workdir(wd, runtime)
}

/// Remove just the working directory (the container may already be gone).
pub fn remove_workdir(wd: &Workdir, runtime: &dyn Runtime) -> Result<(), SandboxError> {
    if wd.root.exists() && fs::remove_dir_all(&wd.root).is_err() {
        // Files created by in-container root are owned by sub-uid ranges on
        // the host; let the runtime remove them inside its user namespace.
        runtime.force_remove_workdir(&wd.root)?;
    }
    if wd.root.exists() {
        return Err(SandboxError::CleanupFailed(vec![wd.root.clone()]));
    }
    // Drop now-empty run directories above the workdir (cell scope, run id),
    // but never the log root itself; remove_dir refuses non-empty
    // directories, which also ends the walk.
    let mut parent = wd.root.parent();
    while let Some(dir) = parent {
        if dir == wd.log_root || fs::remove_dir(dir).is_err() {
            break;
        }
        parent = dir.parent();
    }
    Ok(())
}

/// Content checksum of a prepared home tree (paths, modes, bytes). Used by
/// the freshness invariant: two preparations of the same test are identical.
pub fn home_content_digest(home: &Path) -> Result<String, SandboxError> {
    let snap = snapshot_tree(home).map_err(io_ctx(home))?;
    let mut h = Sha256::new();
    for (path, sig) in snap.iter() {
        h.update(path.as_bytes());
        h.update([0]);
        h.update(sig.identity_bytes());
        h.update([0]);
    }
    Ok(hex::encode(h.finalize()))
}
