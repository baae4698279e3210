//! Verdict engine: turns a container run plus a verification spec into a
//! PASS/FAIL/ERROR/TIMEOUT verdict.
//!
//! Decision order (first triggered rule names the reason):
//! 1. timeout
//! 2. stderr output not covered by the allow list
//! 3. unexpected residual filesystem change
//! 4. required filesystem change that did not occur
//! 5. probe-variable assertion mismatch
//! 6. stdout must-match / must-not-match (with the single-line alternative as
//!    an equivalent satisfaction path, and the lucky-pass warning on Pass)
//! 7. declarative diagnostics appended to failing verdicts
//! 8. custom evaluator, which can only demote a Pass
//!
//! Malformed inputs (untagged log lines, uncompilable patterns) yield ERROR,
//! never FAIL: harness bugs must not masquerade as model failures.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::sandbox::{home_path_to_container, ContainerRunResult, FsChange};
use crate::suite::{ExpectedChanges, TestCase, VerificationSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VerdictStatus {
    Pass,
    Fail,
    Error,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailReason {
    None,
    StderrOutput,
    UnexpectedFsChange,
    MissingFsChange,
    StdoutMismatch,
    ProbeMismatch,
    CustomEvalFail,
    HarnessError,
    TimedOut,
}

/// The outcome of judging one run. `status == Pass` implies `reason == None`;
/// warnings may accompany any status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: VerdictStatus,
    pub reason: FailReason,
    pub diagnostics: Vec<String>,
    pub warnings: Vec<String>,
}

impl Verdict {
    pub fn pass() -> Self {
        Verdict {
            status: VerdictStatus::Pass,
            reason: FailReason::None,
            diagnostics: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn fail(reason: FailReason, diagnostics: Vec<String>) -> Self {
        Verdict {
            status: VerdictStatus::Fail,
            reason,
            diagnostics,
            warnings: Vec::new(),
        }
    }

    pub fn error(detail: impl Into<String>) -> Self {
        Verdict {
            status: VerdictStatus::Error,
            reason: FailReason::HarnessError,
            diagnostics: vec![detail.into()],
            warnings: Vec::new(),
        }
    }

    pub fn timeout() -> Self {
        Verdict {
            status: VerdictStatus::Timeout,
            reason: FailReason::TimedOut,
            diagnostics: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.status == VerdictStatus::Pass
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("untagged log line {0}")]
    UntaggedLine(usize),
    #[error("pattern `{pattern}` does not compile: {detail}")]
    BadPattern { pattern: String, detail: String },
    #[error("expected-changes filter script failed with exit code {code}: {stderr}")]
    FilterScriptFailed { code: i32, stderr: String },
    #[error("custom evaluator crashed with exit code {code}: {detail}")]
    ScriptCrash { code: i32, detail: String },
    #[error("i/o error: {0}")]
    Io(String),
}

/// Probe variables passed out of the container as `#++NAME=value` lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProbeVars(pub BTreeMap<String, String>);

impl ProbeVars {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

/// Split a tagged merged log into (stdout, stderr) with tags stripped and
/// per-stream order preserved. Tagging must be total.
pub fn split_streams(merged: &[String]) -> Result<(Vec<String>, Vec<String>), EvalError> {
    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    for (i, line) in merged.iter().enumerate() {
        if let Some(rest) = line.strip_prefix("STDOUT: ") {
            stdout.push(rest.to_string());
        } else if let Some(rest) = line.strip_prefix("STDERR: ") {
            stderr.push(rest.to_string());
        } else {
            return Err(EvalError::UntaggedLine(i + 1));
        }
    }
    Ok((stdout, stderr))
}

/// Collect `#++NAME=value` probe lines. Later duplicates overwrite earlier
/// ones; non-matching lines are ignored.
pub fn extract_probe_vars(stdout: &[String]) -> ProbeVars {
    let probe = Regex::new(r"^#\+\+([A-Za-z_][A-Za-z0-9_]*)=(.*)$").expect("static regex");
    let mut vars = BTreeMap::new();
    for line in stdout {
        if let Some(caps) = probe.captures(line) {
            vars.insert(caps[1].to_string(), caps[2].to_string());
        }
    }
    ProbeVars(vars)
}

fn is_probe_line(line: &str) -> bool {
    let probe = Regex::new(r"^#\+\+([A-Za-z_][A-Za-z0-9_]*)=").expect("static regex");
    probe.is_match(line)
}

/// The combined delta (container layers + mounted home) with home paths
/// normalized to absolute container paths.
pub fn combined_delta(result: &ContainerRunResult) -> Vec<FsChange> {
    let mut delta: Vec<FsChange> = result.runtime_diff.clone();
    delta.extend(
        result
            .home_delta
            .iter()
            .map(|c| FsChange::new(c.kind, home_path_to_container(&c.path))),
    );
    delta
}

/// Outcome of expected/required filtering over the combined delta.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Changes that were neither expected nor required: unexpected residue.
    pub residual: Vec<FsChange>,
    /// Required patterns that matched nothing in the delta.
    pub unmet_required: Vec<String>,
}

fn compile(pattern: &str) -> Result<Regex, EvalError> {
    Regex::new(pattern).map_err(|e| EvalError::BadPattern {
        pattern: pattern.to_string(),
        detail: e.to_string(),
    })
}

fn tempdir_for(label: &str) -> Result<PathBuf, EvalError> {
    let dir = std::env::temp_dir().join(format!("shelljudge-{label}-{:x}", rand_suffix()));
    std::fs::create_dir_all(&dir).map_err(|e| EvalError::Io(e.to_string()))?;
    Ok(dir)
}

fn rand_suffix() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

/// Remove expected changes from the delta, verify required ones occurred.
///
/// Required patterns are checked against the full delta; changes matching a
/// required pattern are also excluded from the residual (they are wanted, not
/// unexpected).
pub fn filter_expected_changes(
    delta: &[FsChange],
    test: &TestCase,
) -> Result<FilterOutcome, EvalError> {
    let required: Vec<Regex> = test
        .verify
        .required_fs_changes
        .iter()
        .map(|p| compile(p))
        .collect::<Result<_, _>>()?;

    let after_expected: Vec<FsChange> = match &test.expected_changes {
        None => delta.to_vec(),
        Some(ExpectedChanges::Patterns(patterns)) => {
            let expected: Vec<Regex> = patterns
                .iter()
                .map(|p| compile(p))
                .collect::<Result<_, _>>()?;
            delta
                .iter()
                .filter(|c| !expected.iter().any(|r| r.is_match(&c.path)))
                .cloned()
                .collect()
        }
        Some(ExpectedChanges::FilterScript(script)) => run_filter_script(script, delta)?,
    };

    let residual = after_expected
        .into_iter()
        .filter(|c| !required.iter().any(|r| r.is_match(&c.path)))
        .collect();

    let unmet_required = test
        .verify
        .required_fs_changes
        .iter()
        .zip(&required)
        .filter(|(_, r)| !delta.iter().any(|c| r.is_match(&c.path)))
        .map(|(p, _)| p.clone())
        .collect();

    Ok(FilterOutcome {
        residual,
        unmet_required,
    })
}

/// Run a test-specific filter script: delta lines (`<kind> <path>`) on stdin,
/// the residual lines it wants to keep on stdout.
fn run_filter_script(script: &str, delta: &[FsChange]) -> Result<Vec<FsChange>, EvalError> {
    use std::io::Write;
    let dir = tempdir_for(&format!("filter-{}", std::process::id()))?;
    let script_path = dir.join("filter.sh");
    std::fs::write(&script_path, script).map_err(|e| EvalError::Io(e.to_string()))?;
    let mut child = Command::new("bash")
        .arg(&script_path)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| EvalError::Io(format!("spawn filter script: {e}")))?;
    {
        let mut stdin = child.stdin.take().expect("piped stdin");
        for c in delta {
            writeln!(stdin, "{} {}", c.kind, c.path)
                .map_err(|e| EvalError::Io(format!("feed filter script: {e}")))?;
        }
    }
    let output = child
        .wait_with_output()
        .map_err(|e| EvalError::Io(format!("filter script wait: {e}")))?;
    let _ = std::fs::remove_dir_all(&dir);
    if !output.status.success() {
        return Err(EvalError::FilterScriptFailed {
            code: output.status.code().unwrap_or(-1),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    let mut kept = Vec::new();
    for line in String::from_utf8_lossy(&output.stdout).lines() {
        let Some((kind, path)) = line.split_once(' ') else {
            continue;
        };
        let kind = match kind {
            "Added" => crate::sandbox::ChangeKind::Added,
            "Changed" => crate::sandbox::ChangeKind::Changed,
            "Deleted" => crate::sandbox::ChangeKind::Deleted,
            _ => continue,
        };
        kept.push(FsChange::new(kind, path));
    }
    Ok(kept)
}

/// True when the patterns match distinct lines in order (strictly increasing
/// line positions).
fn matches_in_order(lines: &[String], patterns: &[Regex]) -> bool {
    let mut iter = lines.iter();
    'patterns: for p in patterns {
        for line in iter.by_ref() {
            if p.is_match(line) {
                continue 'patterns;
            }
        }
        return false;
    }
    true
}

struct CompiledVerify {
    stderr_allow: Vec<Regex>,
    must_match: Vec<Regex>,
    must_not: Vec<Regex>,
    single_line_alt: Option<Regex>,
    probes: Vec<(String, Regex)>,
    lucky_tag: Option<Regex>,
    lucky_probe: Vec<Regex>,
    diagnostics: Vec<(bool, Regex, String)>,
}

fn compile_verify(v: &VerificationSpec) -> Result<CompiledVerify, EvalError> {
    Ok(CompiledVerify {
        stderr_allow: v
            .stderr_allow
            .iter()
            .map(|p| compile(p))
            .collect::<Result<_, _>>()?,
        must_match: v
            .stdout_must_match
            .iter()
            .map(|p| compile(p))
            .collect::<Result<_, _>>()?,
        must_not: v
            .stdout_must_not_match
            .iter()
            .map(|p| compile(p))
            .collect::<Result<_, _>>()?,
        single_line_alt: v
            .single_line_alternative
            .as_deref()
            .map(compile)
            .transpose()?,
        probes: v
            .probe_assertions
            .iter()
            .map(|a| compile(&a.pattern).map(|r| (a.var.clone(), r)))
            .collect::<Result<_, _>>()?,
        lucky_tag: v.lucky_pass.as_ref().map(|l| compile(&l.tag)).transpose()?,
        lucky_probe: v
            .lucky_pass
            .as_ref()
            .map(|l| {
                l.natural_order_probe
                    .iter()
                    .map(|p| compile(p))
                    .collect::<Result<Vec<_>, _>>()
            })
            .transpose()?
            .unwrap_or_default(),
        diagnostics: v
            .diagnostics
            .iter()
            .map(|d| compile(d.detector_pattern()).map(|r| (d.negated(), r, d.message.clone())))
            .collect::<Result<_, _>>()?,
    })
}

/// Judge one run against its spec. Pure in `(result, test)`: replaying stored
/// logs yields identical verdicts. The custom evaluator, which executes a
/// script against retained logs, runs in [`evaluate_full`].
pub fn evaluate(result: &ContainerRunResult, test: &TestCase) -> Verdict {
    // 1. Timeout outranks everything.
    if result.timed_out {
        return Verdict::timeout();
    }

    let (stdout, stderr) = match split_streams(&result.merged_log) {
        Ok(pair) => pair,
        Err(e) => return Verdict::error(e.to_string()),
    };
    let compiled = match compile_verify(&test.verify) {
        Ok(c) => c,
        Err(e) => return Verdict::error(e.to_string()),
    };

    // Partition stdout: probe lines feed assertions, post-test-tagged lines
    // feed the lucky-pass probe, the rest is the candidate's own output.
    let probes = extract_probe_vars(&stdout);
    let mut post_lines: Vec<String> = Vec::new();
    let mut candidate_lines: Vec<String> = Vec::new();
    for line in &stdout {
        if is_probe_line(line) {
            continue;
        }
        if let Some(tag) = &compiled.lucky_tag {
            if tag.is_match(line) {
                post_lines.push(line.clone());
                continue;
            }
        }
        candidate_lines.push(line.clone());
    }
    let candidate_joined = candidate_lines.join("\n");

    let mut warnings = Vec::new();
    if !compiled.lucky_probe.is_empty() && matches_in_order(&post_lines, &compiled.lucky_probe) {
        if let Some(rule) = &test.verify.lucky_pass {
            warnings.push(rule.warning.clone());
        }
    }

    let diagnostics_for = |mut engine_diags: Vec<String>| {
        for (negated, detector, message) in &compiled.diagnostics {
            let hit = detector.is_match(&candidate_joined);
            if hit != *negated {
                engine_diags.push(message.clone());
            }
        }
        engine_diags
    };
    let fail = |reason: FailReason, engine_diags: Vec<String>, warnings: Vec<String>| Verdict {
        status: VerdictStatus::Fail,
        reason,
        diagnostics: diagnostics_for(engine_diags),
        warnings,
    };

    // 2. Any stderr output not explicitly tolerated is a failure.
    let offending: Vec<&String> = stderr
        .iter()
        .filter(|line| !compiled.stderr_allow.iter().any(|r| r.is_match(line)))
        .collect();
    if !offending.is_empty() {
        return fail(
            FailReason::StderrOutput,
            vec![format!(
                "stderr output was not tolerated ({} line{}): {}",
                offending.len(),
                if offending.len() == 1 { "" } else { "s" },
                offending[0]
            )],
            warnings,
        );
    }

    // 3-4. Filesystem policy over the combined delta.
    let delta = combined_delta(result);
    let outcome = match filter_expected_changes(&delta, test) {
        Ok(o) => o,
        Err(e) => return Verdict::error(e.to_string()),
    };
    if !outcome.residual.is_empty() {
        let shown: Vec<String> = outcome
            .residual
            .iter()
            .take(5)
            .map(|c| format!("{} {}", c.kind, c.path))
            .collect();
        let more = outcome.residual.len().saturating_sub(5);
        let mut msg = format!("unexpected filesystem changes: {}", shown.join(", "));
        if more > 0 {
            msg.push_str(&format!(" (+{more} more)"));
        }
        return fail(FailReason::UnexpectedFsChange, vec![msg], warnings);
    }
    if !outcome.unmet_required.is_empty() {
        return fail(
            FailReason::MissingFsChange,
            outcome
                .unmet_required
                .iter()
                .map(|p| format!("required filesystem change did not occur: {p}"))
                .collect(),
            warnings,
        );
    }

    // 5. Probe-variable assertions.
    for (var, pattern) in &compiled.probes {
        match probes.get(var) {
            Some(value) if pattern.is_match(value) => {}
            Some(value) => {
                return fail(
                    FailReason::ProbeMismatch,
                    vec![format!(
                        "probe variable {var}={value} did not match {pattern}"
                    )],
                    warnings,
                );
            }
            None => {
                return fail(
                    FailReason::ProbeMismatch,
                    vec![format!("probe variable {var} was never emitted")],
                    warnings,
                );
            }
        }
    }

    // 6. Stdout assertions over the candidate's own lines.
    for pattern in &compiled.must_not {
        if let Some(line) = candidate_lines.iter().find(|l| pattern.is_match(l)) {
            return fail(
                FailReason::StdoutMismatch,
                vec![format!(
                    "stdout matched a forbidden pattern {pattern}: {line}"
                )],
                warnings,
            );
        }
    }
    let ordered_ok = matches_in_order(&candidate_lines, &compiled.must_match);
    let single_line_ok = compiled
        .single_line_alt
        .as_ref()
        .map(|alt| candidate_lines.iter().any(|l| alt.is_match(l)))
        .unwrap_or(false);
    if !(ordered_ok || single_line_ok) {
        let first_unmet = compiled
            .must_match
            .iter()
            .scan(0usize, |pos, p| {
                let found = candidate_lines[*pos..]
                    .iter()
                    .position(|l| p.is_match(l))
                    .map(|i| *pos + i);
                match found {
                    Some(i) => {
                        *pos = i + 1;
                        Some(None)
                    }
                    None => Some(Some(p.to_string())),
                }
            })
            .flatten()
            .next()
            .unwrap_or_else(|| "<none>".into());
        return fail(
            FailReason::StdoutMismatch,
            vec![format!(
                "stdout did not satisfy pattern {first_unmet} in order"
            )],
            warnings,
        );
    }

    Verdict {
        status: VerdictStatus::Pass,
        reason: FailReason::None,
        diagnostics: Vec::new(),
        warnings,
    }
}

/// Paths handed to a custom evaluator.
#[derive(Debug, Clone)]
pub struct CustomEvalContext {
    pub log_file: PathBuf,
    pub diff_file: PathBuf,
    pub workdir_root: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CustomEvalOutcome {
    Pass,
    Fail(Vec<String>),
}

/// Execute a test's custom evaluator against the retained logs.
/// Exit 0 means pass, exit 2 means fail (stderr becomes the diagnostics),
/// anything else is a harness error.
pub fn run_custom_eval(
    script: &str,
    ctx: &CustomEvalContext,
) -> Result<CustomEvalOutcome, EvalError> {
    let script_path = ctx.workdir_root.join("custom_eval.sh");
    std::fs::write(&script_path, script).map_err(|e| EvalError::Io(e.to_string()))?;
    let output = Command::new("bash")
        .arg(&script_path)
        .current_dir(&ctx.workdir_root)
        .env("EVAL_LOG_FILE", &ctx.log_file)
        .env("EVAL_DIFF_FILE", &ctx.diff_file)
        .env("EVAL_WORKDIR", &ctx.workdir_root)
        .stdin(Stdio::null())
        .output()
        .map_err(|e| EvalError::Io(format!("spawn custom evaluator: {e}")))?;
    match output.status.code() {
        Some(0) => Ok(CustomEvalOutcome::Pass),
        Some(2) => Ok(CustomEvalOutcome::Fail(
            String::from_utf8_lossy(&output.stderr)
                .lines()
                .map(str::to_string)
                .filter(|l| !l.is_empty())
                .collect(),
        )),
        other => Err(EvalError::ScriptCrash {
            code: other.unwrap_or(-1),
            detail: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        }),
    }
}

/// Full evaluation including the custom-evaluator escape hatch. The custom
/// script only runs when every declarative rule passed, and can only demote
/// the verdict.
pub fn evaluate_full(
    result: &ContainerRunResult,
    test: &TestCase,
    ctx: Option<&CustomEvalContext>,
) -> Verdict {
    let verdict = evaluate(result, test);
    if !verdict.passed() {
        return verdict;
    }
    let Some(script) = &test.custom_eval else {
        return verdict;
    };
    let Some(ctx) = ctx else {
        return Verdict::error("custom evaluator present but no workdir context was supplied");
    };
    match run_custom_eval(script, ctx) {
        Ok(CustomEvalOutcome::Pass) => verdict,
        Ok(CustomEvalOutcome::Fail(diags)) => Verdict {
            status: VerdictStatus::Fail,
            reason: FailReason::CustomEvalFail,
            diagnostics: diags,
            warnings: verdict.warnings,
        },
        Err(e) => Verdict::error(e.to_string()),
    }
}
