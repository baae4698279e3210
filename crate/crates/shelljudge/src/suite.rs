//! Test-suite data model and the on-disk test directory format.
//!
//! A test case is one directory:
//!
//! ```text
//! testNNN/
//!   manifest.toml       id, suite, category, exec_mode, container opts, verify rules
//!   prompt              natural-language request (UTF-8, one question)
//!   solution.sh         reference solution (solution.ps1 for PowerShell suites)
//!   home/               prototype of the test user's home directory (optional)
//!   pre_test.sh         in-container setup (optional)
//!   post_test.sh        in-container probe collection (optional)
//!   host_prologue.sh    host-side workdir setup (optional)
//!   expected_changes    fs-change ignore patterns, or a filter script if it
//!                       starts with `#!` (optional)
//!   custom_eval.sh      host-side custom evaluator escape hatch (optional)
//! ```
//!
//! Loading is read-only and thread-safe; `TestCase` values are immutable after
//! construction.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Which of the three benchmark suites a test belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Suite {
    #[serde(rename = "single-line-bash")]
    SingleLineBash,
    #[serde(rename = "multi-line-bash")]
    MultiLineBash,
    #[serde(rename = "powershell")]
    PowerShell,
}

impl Suite {
    /// Reference-solution file name for this suite.
    pub fn solution_file(self) -> &'static str {
        match self {
            Suite::PowerShell => "solution.ps1",
            _ => "solution.sh",
        }
    }

    /// File name the candidate snippet is written to inside the workdir home.
    pub fn candidate_file(self) -> &'static str {
        match self {
            Suite::PowerShell => "candidate.ps1",
            _ => "bash.sh",
        }
    }

    /// Whether candidates must collapse to a single logical line.
    pub fn single_line(self) -> bool {
        matches!(self, Suite::SingleLineBash)
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::SingleLineBash => "Single-line Bash",
            Suite::MultiLineBash => "Multi-line Bash",
            Suite::PowerShell => "PowerShell",
        })
    }
}

/// Task category, used for the per-category accuracy breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    SystemAdmin,
    Math,
    Diagnostics,
    Monitoring,
    Other,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::SystemAdmin => "System",
            Category::Math => "Math",
            Category::Diagnostics => "Diagnostics",
            Category::Monitoring => "Monitoring",
            Category::Other => "Other",
        })
    }
}

/// How the driver invokes the candidate inside the container.
///
/// `Subshell` is the default and protects the driver from candidates that call
/// `exit`. `Sourced` runs the candidate in the driver's own shell context so
/// the post-test script can probe variables it set. `Sudo` grants superuser
/// access so candidates are not penalized for omitting `sudo` themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    #[default]
    Subshell,
    Sourced,
    Sudo,
}

/// Per-test container option overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContainerOverrides {
    pub network_enabled: bool,
    /// (workdir-relative source, absolute container target) bind mounts.
    pub extra_mounts: Vec<(String, String)>,
    pub timeout_s: u64,
    /// Opaque runtime flags passed through verbatim.
    pub extra_opts: Vec<String>,
}

impl Default for ContainerOverrides {
    fn default() -> Self {
        ContainerOverrides {
            network_enabled: false,
            extra_mounts: Vec::new(),
            timeout_s: 60,
            extra_opts: Vec::new(),
        }
    }
}

/// One probe-variable assertion: the value captured from a `#++VAR=...` line
/// must match the regex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "(String, String)", into = "(String, String)")]
pub struct ProbeAssertion {
    pub var: String,
    pub pattern: String,
}

impl From<(String, String)> for ProbeAssertion {
    fn from((var, pattern): (String, String)) -> Self {
        ProbeAssertion { var, pattern }
    }
}

impl From<ProbeAssertion> for (String, String) {
    fn from(p: ProbeAssertion) -> Self {
        (p.var, p.pattern)
    }
}

/// A failure diagnostic rule: when the detector matches the candidate's stdout
/// (joined with newlines), the message is appended to a failing verdict.
/// A detector starting with `!` fires when the rest of the pattern does NOT
/// match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "(String, String)", into = "(String, String)")]
pub struct DiagnosticRule {
    pub detector: String,
    pub message: String,
}

impl DiagnosticRule {
    /// The regex source with any leading negation marker removed.
    pub fn detector_pattern(&self) -> &str {
        self.detector.strip_prefix('!').unwrap_or(&self.detector)
    }

    pub fn negated(&self) -> bool {
        self.detector.starts_with('!')
    }
}

impl From<(String, String)> for DiagnosticRule {
    fn from((detector, message): (String, String)) -> Self {
        DiagnosticRule { detector, message }
    }
}

impl From<DiagnosticRule> for (String, String) {
    fn from(d: DiagnosticRule) -> Self {
        (d.detector, d.message)
    }
}

fn default_post_tag() -> String {
    "^POST: ".to_string()
}

/// Accepts a Pass whose expected ordering also held accidentally in the
/// initial environment, with a warning instead of a failure.
///
/// Lines matching `tag` are the post-test diagnostic lines; they are excluded
/// from stdout assertions, and the `natural_order_probe` regexes must match
/// them in order for the warning to fire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LuckyPassRule {
    #[serde(default = "default_post_tag")]
    pub tag: String,
    pub natural_order_probe: Vec<String>,
    pub warning: String,
}

/// Policy for filesystem changes left over after expected/required filtering.
/// Only one policy exists today: any residual change fails the test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FsChangePolicy {
    #[default]
    FailOnAnyResidual,
}

/// Declarative pass/fail rules for one test.
///
/// All patterns are regexes (unanchored unless written with anchors).
/// `stdout_must_match` patterns must match distinct stdout lines in order;
/// `single_line_alternative`, when present, accepts a single line matching it
/// as an equivalent satisfaction path.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct VerificationSpec {
    pub stderr_allow: Vec<String>,
    pub stdout_must_match: Vec<String>,
    pub stdout_must_not_match: Vec<String>,
    pub single_line_alternative: Option<String>,
    pub required_fs_changes: Vec<String>,
    pub fs_change_policy: FsChangePolicy,
    pub probe_assertions: Vec<ProbeAssertion>,
    pub lucky_pass: Option<LuckyPassRule>,
    pub diagnostics: Vec<DiagnosticRule>,
}

impl VerificationSpec {
    /// Every regex pattern in the spec, with a short label for error messages.
    pub fn all_patterns(&self) -> Vec<(String, &str)> {
        let mut out = Vec::new();
        for p in &self.stderr_allow {
            out.push(("stderr_allow".to_string(), p.as_str()));
        }
        for p in &self.stdout_must_match {
            out.push(("stdout_must_match".to_string(), p.as_str()));
        }
        for p in &self.stdout_must_not_match {
            out.push(("stdout_must_not_match".to_string(), p.as_str()));
        }
        if let Some(p) = &self.single_line_alternative {
            out.push(("single_line_alternative".to_string(), p.as_str()));
        }
        for p in &self.required_fs_changes {
            out.push(("required_fs_changes".to_string(), p.as_str()));
        }
        for a in &self.probe_assertions {
            out.push((format!("probe_assertions[{}]", a.var), a.pattern.as_str()));
        }
        if let Some(l) = &self.lucky_pass {
            out.push(("lucky_pass.tag".to_string(), l.tag.as_str()));
            for p in &l.natural_order_probe {
                out.push(("lucky_pass.natural_order_probe".to_string(), p.as_str()));
            }
        }
        for d in &self.diagnostics {
            out.push(("diagnostics".to_string(), d.detector_pattern()));
        }
        out
    }
}

/// One file in the home-directory prototype, relative to the test user's home.
#[derive(Debug, Clone, PartialEq)]
pub struct HomeEntry {
    pub rel_path: String,
    pub content: Vec<u8>,
    pub executable: bool,
}

/// Expected filesystem changes: either ignore patterns or a filter script
/// (the on-disk file is a script when it starts with `#!`).
#[derive(Debug, Clone, PartialEq)]
pub enum ExpectedChanges {
    Patterns(Vec<String>),
    FilterScript(String),
}

/// One loaded, validated test case: the unit of evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub id: String,
    pub name: String,
    pub prompt: String,
    pub reference_solution: String,
    pub suite: Suite,
    pub category: Category,
    pub exec_mode: ExecMode,
    pub home_prototype: Vec<HomeEntry>,
    pub pre_test: Option<String>,
    pub post_test: Option<String>,
    pub host_prologue: Option<String>,
    pub expected_changes: Option<ExpectedChanges>,
    pub custom_eval: Option<String>,
    pub container_opts: ContainerOverrides,
    pub verify: VerificationSpec,
}

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error("{dir}: missing required file `{name}`")]
    MissingFile { dir: PathBuf, name: String },
    #[error("{dir}: manifest parse error: {detail}")]
    ManifestParse { dir: PathBuf, detail: String },
    #[error("{dir}: invariant violation: {detail}")]
    InvariantViolation { dir: PathBuf, detail: String },
    #[error("duplicate test id `{0}`")]
    DuplicateId(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SuiteError + '_ {
    move |source| SuiteError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The manifest.toml document.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    id: String,
    name: String,
    suite: Suite,
    category: Category,
    #[serde(default)]
    exec_mode: ExecMode,
    #[serde(default)]
    container: ContainerOverrides,
    #[serde(default)]
    verify: VerificationSpec,
}

fn read_text(path: &Path) -> Result<String, SuiteError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn read_optional_script(dir: &Path, name: &str) -> Result<Option<String>, SuiteError> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(Some(read_text(&path)?))
    } else {
        Ok(None)
    }
}

/// Load the home prototype tree, sorted by relative path.
fn load_home_prototype(dir: &Path) -> Result<Vec<HomeEntry>, SuiteError> {
    let home = dir.join("home");
    if !home.is_dir() {
        return Ok(Vec::new());
    }
    let mut entries = Vec::new();
    for entry in walkdir::WalkDir::new(&home).sort_by_file_name() {
        let entry = entry.map_err(|e| SuiteError::Io {
            path: home.clone(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(&home)
            .expect("walkdir yields paths under its root")
            .to_string_lossy()
            .replace('\\', "/");
        let content = fs::read(entry.path()).map_err(io_err(entry.path()))?;
        let executable = {
            use std::os::unix::fs::PermissionsExt;
            entry
                .metadata()
                .map(|m| m.permissions().mode() & 0o111 != 0)
                .unwrap_or(false)
        };
        entries.push(HomeEntry {
            rel_path: rel,
            content,
            executable,
        });
    }
    entries.sort_by(|a, b| a.rel_path.cmp(&b.rel_path));
    Ok(entries)
}

/// Load one test case directory. Pure in the directory contents: identical
/// bytes in, structurally equal `TestCase` out.
pub fn load_test_case(dir: &Path) -> Result<TestCase, SuiteError> {
    let manifest_path = dir.join("manifest.toml");
    if !manifest_path.is_file() {
        return Err(SuiteError::MissingFile {
            dir: dir.to_path_buf(),
            name: "manifest.toml".into(),
        });
    }
    let manifest: Manifest =
        toml::from_str(&read_text(&manifest_path)?).map_err(|e| SuiteError::ManifestParse {
            dir: dir.to_path_buf(),
            detail: e.to_string(),
        })?;

    let prompt_path = dir.join("prompt");
    if !prompt_path.is_file() {
        return Err(SuiteError::MissingFile {
            dir: dir.to_path_buf(),
            name: "prompt".into(),
        });
    }
    // The prompt is a one-line question; trailing whitespace would corrupt the
    // Q/A prompt template. Scripts below stay byte-verbatim.
    let prompt = read_text(&prompt_path)?.trim().to_string();

    let solution_name = manifest.suite.solution_file();
    let solution_path = dir.join(solution_name);
    if !solution_path.is_file() {
        return Err(SuiteError::MissingFile {
            dir: dir.to_path_buf(),
            name: solution_name.into(),
        });
    }
    let reference_solution = read_text(&solution_path)?;

    let expected_changes = match read_optional_script(dir, "expected_changes")? {
        None => None,
        Some(text) if text.starts_with("#!") => Some(ExpectedChanges::FilterScript(text)),
        Some(text) => {
            let patterns: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect();
            Some(ExpectedChanges::Patterns(patterns))
        }
    };

    let case = TestCase {
        id: manifest.id,
        name: manifest.name,
        prompt,
        reference_solution,
        suite: manifest.suite,
        category: manifest.category,
        exec_mode: manifest.exec_mode,
        home_prototype: load_home_prototype(dir)?,
        pre_test: read_optional_script(dir, "pre_test.sh")?,
        post_test: read_optional_script(dir, "post_test.sh")?,
        host_prologue: read_optional_script(dir, "host_prologue.sh")?,
        expected_changes,
        custom_eval: read_optional_script(dir, "custom_eval.sh")?,
        container_opts: manifest.container,
        verify: manifest.verify,
    };
    check_invariants(&case).map_err(|detail| SuiteError::InvariantViolation {
        dir: dir.to_path_buf(),
        detail,
    })?;
    Ok(case)
}

/// Hard invariants enforced at load time.
fn check_invariants(case: &TestCase) -> Result<(), String> {
    if case.id.trim().is_empty() {
        return Err("id is empty".into());
    }
    if case.prompt.is_empty() {
        return Err("prompt is empty".into());
    }
    if case.reference_solution.trim().is_empty() {
        return Err("reference solution is empty".into());
    }
    if case.container_opts.timeout_s < 1 {
        return Err("timeout_s must be >= 1".into());
    }
    for (_, target) in &case.container_opts.extra_mounts {
        if !target.starts_with('/') {
            return Err(format!("mount target `{target}` is not an absolute path"));
        }
    }
    for entry in &case.home_prototype {
        if entry.rel_path.starts_with('/') {
            return Err(format!("home path `{}` is absolute", entry.rel_path));
        }
        if entry.rel_path.split('/').any(|seg| seg == "..") {
            return Err(format!(
                "home path `{}` contains a `..` segment",
                entry.rel_path
            ));
        }
    }
    let var_name = Regex::new("^[A-Za-z_][A-Za-z0-9_]*$").expect("static regex");
    for a in &case.verify.probe_assertions {
        if !var_name.is_match(&a.var) {
            return Err(format!("probe variable name `{}` is invalid", a.var));
        }
    }
    if let Some(l) = &case.verify.lucky_pass {
        if l.warning.trim().is_empty() {
            return Err("lucky_pass.warning is empty".into());
        }
    }
    for (label, pattern) in case.verify.all_patterns() {
        if let Err(e) = Regex::new(pattern) {
            return Err(format!("{label} regex `{pattern}` does not compile: {e}"));
        }
    }
    if let Some(ExpectedChanges::Patterns(patterns)) = &case.expected_changes {
        for p in patterns {
            if let Err(e) = Regex::new(p) {
                return Err(format!(
                    "expected_changes pattern `{p}` does not compile: {e}"
                ));
            }
        }
    }
    Ok(())
}

/// True if the directory name follows the `testNNN` convention.
pub fn is_test_dir_name(name: &str) -> bool {
    name.len() >= 7
        && name.starts_with("test")
        && name[4..].chars().all(|c| c.is_ascii_digit())
        && name[4..].len() >= 3
}

/// Load every `testNNN` directory under `dir`, sorted by test id.
pub fn load_suite(dir: &Path) -> Result<Vec<TestCase>, SuiteError> {
    let mut cases = Vec::new();
    let mut names: Vec<PathBuf> = Vec::new();
    let rd = fs::read_dir(dir).map_err(io_err(dir))?;
    for entry in rd {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if entry.path().is_dir() && is_test_dir_name(&name) {
            names.push(entry.path());
        }
    }
    names.sort();
    for path in names {
        cases.push(load_test_case(&path)?);
    }
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    let mut seen = BTreeSet::new();
    for case in &cases {
        if !seen.insert(case.id.clone()) {
            return Err(SuiteError::DuplicateId(case.id.clone()));
        }
    }
    Ok(cases)
}

/// Write a test case back to a directory in the on-disk format.
/// `load_test_case(save_test_case(c))` is structurally equal to `c`.
pub fn save_test_case(case: &TestCase, dir: &Path) -> Result<(), SuiteError> {
    use std::os::unix::fs::PermissionsExt;

    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        id: case.id.clone(),
        name: case.name.clone(),
        suite: case.suite,
        category: case.category,
        exec_mode: case.exec_mode,
        container: case.container_opts.clone(),
        verify: case.verify.clone(),
    };
    let manifest_text =
        toml::to_string_pretty(&manifest).map_err(|e| SuiteError::ManifestParse {
            dir: dir.to_path_buf(),
            detail: e.to_string(),
        })?;
    let write = |name: &str, content: &[u8]| -> Result<(), SuiteError> {
        let path = dir.join(name);
        fs::write(&path, content).map_err(io_err(&path))
    };
    write("manifest.toml", manifest_text.as_bytes())?;
    write("prompt", format!("{}\n", case.prompt).as_bytes())?;
    write(
        case.suite.solution_file(),
        case.reference_solution.as_bytes(),
    )?;
    if let Some(s) = &case.pre_test {
        write("pre_test.sh", s.as_bytes())?;
    }
    if let Some(s) = &case.post_test {
        write("post_test.sh", s.as_bytes())?;
    }
    if let Some(s) = &case.host_prologue {
        write("host_prologue.sh", s.as_bytes())?;
    }
    if let Some(s) = &case.custom_eval {
        write("custom_eval.sh", s.as_bytes())?;
    }
    match &case.expected_changes {
        Some(ExpectedChanges::Patterns(pats)) => {
            let mut text = pats.join("\n");
            text.push('\n');
            write("expected_changes", text.as_bytes())?;
        }
        Some(ExpectedChanges::FilterScript(script)) => {
            write("expected_changes", script.as_bytes())?;
        }
        None => {}
    }
    for entry in &case.home_prototype {
        let path = dir.join("home").join(&entry.rel_path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, &entry.content).map_err(io_err(&path))?;
        let mode = if entry.executable { 0o755 } else { 0o644 };
        fs::set_permissions(&path, fs::Permissions::from_mode(mode)).map_err(io_err(&path))?;
    }
    Ok(())
}

/// A static-analysis finding from [`validate_suite`]. Issues are data, not
/// errors: an empty list means the suite is clean.
#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub test_id: String,
    pub kind: IssueKind,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IssueKind {
    /// A verification pattern does not compile.
    RegexError,
    /// Sourced exec mode without probe assertions: sourcing only matters when
    /// the post-test probes shell state the candidate set.
    SuspiciousMode,
    /// A probe assertion names a variable no shipped script emits.
    ProbeNeverEmitted,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}: {}", self.test_id, self.kind, self.detail)
    }
}

/// Static checks over loaded (or in-memory) cases.
pub fn validate_suite(cases: &[TestCase]) -> Vec<Issue> {
    let mut issues = Vec::new();
    for case in cases {
        for (label, pattern) in case.verify.all_patterns() {
            if let Err(e) = Regex::new(pattern) {
                issues.push(Issue {
                    test_id: case.id.clone(),
                    kind: IssueKind::RegexError,
                    detail: format!("{label} `{pattern}`: {e}"),
                });
            }
        }
        if case.exec_mode == ExecMode::Sourced && case.verify.probe_assertions.is_empty() {
            issues.push(Issue {
                test_id: case.id.clone(),
                kind: IssueKind::SuspiciousMode,
                detail: "sourced exec mode without probe assertions".into(),
            });
        }
        let script_text = format!(
            "{}\n{}",
            case.pre_test.as_deref().unwrap_or(""),
            case.post_test.as_deref().unwrap_or("")
        );
        for a in &case.verify.probe_assertions {
            if !script_text.contains(&format!("#++{}=", a.var)) {
                issues.push(Issue {
                    test_id: case.id.clone(),
                    kind: IssueKind::ProbeNeverEmitted,
                    detail: format!(
                        "probe assertion on `{}` but no script emits #++{}=",
                        a.var, a.var
                    ),
                });
            }
        }
    }
    issues
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_case() -> TestCase {
        TestCase {
            id: "bash1/test001".into(),
            name: "echo".into(),
            prompt: "What is the bash command to print hi?".into(),
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
            verify: VerificationSpec {
                stdout_must_match: vec!["^hi$".into()],
                ..VerificationSpec::default()
            },
        }
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut case = minimal_case();
        case.home_prototype.push(HomeEntry {
            rel_path: "bin/helper".into(),
            content: b"#!/bin/bash\necho helper\n".to_vec(),
            executable: true,
        });
        case.home_prototype.push(HomeEntry {
            rel_path: "data/file.log".into(),
            content: b"alpha\nbravo\n".to_vec(),
            executable: false,
        });
        case.pre_test = Some("touch x.dat\n".into());
        case.expected_changes = Some(ExpectedChanges::Patterns(vec!["x\\.dat".into()]));
        let sub = dir.path().join("test001");
        save_test_case(&case, &sub).unwrap();
        let loaded = load_test_case(&sub).unwrap();
        assert_eq!(case, loaded);
        // Save the loaded copy again: still stable.
        let sub2 = dir.path().join("test002");
        save_test_case(&loaded, &sub2).unwrap();
        assert_eq!(loaded, load_test_case(&sub2).unwrap());
    }

    #[test]
    fn missing_prompt_is_reported_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("test001");
        save_test_case(&minimal_case(), &sub).unwrap();
        fs::remove_file(sub.join("prompt")).unwrap();
        match load_test_case(&sub) {
            Err(SuiteError::MissingFile { name, .. }) => assert_eq!(name, "prompt"),
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn zero_timeout_violates_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("test001");
        let mut case = minimal_case();
        case.container_opts.timeout_s = 5;
        save_test_case(&case, &sub).unwrap();
        // Rewrite the manifest with timeout_s = 0; save_test_case refuses to
        // produce one, so patch the file directly.
        let manifest = fs::read_to_string(sub.join("manifest.toml")).unwrap();
        fs::write(
            sub.join("manifest.toml"),
            manifest.replace("timeout_s = 5", "timeout_s = 0"),
        )
        .unwrap();
        match load_test_case(&sub) {
            Err(SuiteError::InvariantViolation { detail, .. }) => {
                assert!(detail.contains("timeout_s"), "detail: {detail}")
            }
            other => panic!("expected InvariantViolation, got {other:?}"),
        }
    }

    #[test]
    fn home_prototype_rejects_parent_segments() {
        let mut case = minimal_case();
        case.home_prototype.push(HomeEntry {
            rel_path: "../escape".into(),
            content: Vec::new(),
            executable: false,
        });
        assert!(check_invariants(&case).unwrap_err().contains(".."));
    }

    #[test]
    fn load_suite_sorts_and_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        for (n, id) in [
            (3, "bash1/test003"),
            (1, "bash1/test001"),
            (2, "bash1/test002"),
        ] {
            let mut case = minimal_case();
            case.id = id.into();
            save_test_case(&case, &dir.path().join(format!("test{n:03}"))).unwrap();
        }
        let cases = load_suite(dir.path()).unwrap();
        assert_eq!(
            cases.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(),
            vec!["bash1/test001", "bash1/test002", "bash1/test003"]
        );

        // Duplicate id across two directories.
        let mut dup = minimal_case();
        dup.id = "bash1/test002".into();
        save_test_case(&dup, &dir.path().join("test004")).unwrap();
        match load_suite(dir.path()) {
            Err(SuiteError::DuplicateId(id)) => assert_eq!(id, "bash1/test002"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn load_suite_empty_dir_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_suite(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn load_suite_ignores_non_test_dirs() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("notes")).unwrap();
        fs::create_dir(dir.path().join("test1")).unwrap(); // too few digits
        save_test_case(&minimal_case(), &dir.path().join("test001")).unwrap();
        assert_eq!(load_suite(dir.path()).unwrap().len(), 1);
    }

    #[test]
    fn validate_flags_bad_regex() {
        let mut case = minimal_case();
        case.verify.stdout_must_match = vec!["([".into()];
        let issues = validate_suite(std::slice::from_ref(&case));
        assert!(issues.iter().any(|i| i.kind == IssueKind::RegexError));
    }

    #[test]
    fn validate_flags_sourced_without_probes() {
        let mut case = minimal_case();
        case.exec_mode = ExecMode::Sourced;
        let issues = validate_suite(std::slice::from_ref(&case));
        assert!(issues.iter().any(|i| i.kind == IssueKind::SuspiciousMode));
    }

    #[test]
    fn validate_flags_unemitted_probe() {
        let mut case = minimal_case();
        case.verify.probe_assertions = vec![ProbeAssertion {
            var: "TZ".into(),
            pattern: "^UTC$".into(),
        }];
        case.post_test = Some("echo done\n".into());
        let issues = validate_suite(std::slice::from_ref(&case));
        assert!(issues
            .iter()
            .any(|i| i.kind == IssueKind::ProbeNeverEmitted));

        case.post_test = Some("echo \"#++TZ=$TZ\"\n".into());
        assert!(validate_suite(std::slice::from_ref(&case)).is_empty());
    }

    #[test]
    fn bad_regex_in_manifest_is_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("test001");
        let mut case = minimal_case();
        case.verify.stdout_must_match = vec!["^ok$".into()];
        save_test_case(&case, &sub).unwrap();
        let manifest = fs::read_to_string(sub.join("manifest.toml")).unwrap();
        fs::write(
            sub.join("manifest.toml"),
            manifest.replace("\"^ok$\"", "\"([\""),
        )
        .unwrap();
        assert!(matches!(
            load_test_case(&sub),
            Err(SuiteError::InvariantViolation { .. })
        ));
    }

    #[test]
    fn expected_changes_shebang_becomes_filter_script() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("test001");
        save_test_case(&minimal_case(), &sub).unwrap();
        fs::write(
            sub.join("expected_changes"),
            "#!/bin/bash\ngrep -v boring\n",
        )
        .unwrap();
        let case = load_test_case(&sub).unwrap();
        assert!(matches!(
            case.expected_changes,
            Some(ExpectedChanges::FilterScript(_))
        ));
    }
}
