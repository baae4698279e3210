//! End-to-end pipeline driver: prompt → model → extraction → sandbox →
//! verdict, across suites, models and shot settings, with persistent run
//! records.
//!
//! Sanity mode pipes every reference solution through the same pipeline minus
//! the model; 100% Pass is the regression gate for any verifier change.
//! Benchmark runs persist one JSON line per record as soon as it exists, so
//! an interrupted run resumes without re-querying cached models.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::extract::{self, ExtractionMethod};
use crate::gateway::{self, CacheOutcome, ModelConfig, ResponseCache};
use crate::prompt::{self, Exemplar, PromptStyle};
use crate::sandbox::{self, ImageId, Runtime, SandboxError};
use crate::suite::{Category, Suite, TestCase};
use crate::verdict::{self, CustomEvalContext, FailReason, Verdict};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// Model id recorded for sanity-mode runs.
pub const REFERENCE_MODEL_ID: &str = "REFERENCE";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Durations {
    pub model_ms: u64,
    pub container_ms: u64,
    pub eval_ms: u64,
}

/// The extracted snippet as persisted in a record (the raw text lives in
/// `raw_response`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedCode {
    pub code: String,
    pub method: ExtractionMethod,
    pub truncated: bool,
}

/// Full provenance of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub test_id: String,
    pub suite: Suite,
    pub category: Category,
    pub model_id: String,
    pub shots: usize,
    pub seed: u64,
    pub started_at: String,
    pub prompt_text: String,
    pub raw_response: String,
    pub extracted: Option<ExtractedCode>,
    pub verdict: Verdict,
    pub durations: Durations,
    pub log_dir: Option<String>,
    pub cache_hit: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model `{model}` is unreachable and the cache is cold: {detail}")]
    Preflight { model: String, detail: String },
    #[error("run incomplete; missing cells: {0:?}")]
    PartialRun(Vec<String>),
    #[error("i/o error at {path}: {detail}")]
    Io { path: PathBuf, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |e| OrchestratorError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// When to retain a finished workdir as debugging logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeepLogs {
    Never,
    OnFailure,
    Always,
}

/// Shared execution context for one run.
pub struct PipelineConfig<'a> {
    pub runtime: &'a dyn Runtime,
    pub image: &'a ImageId,
    pub log_root: PathBuf,
    pub keep: KeepLogs,
    pub run_id: String,
}

/// Stable per-cell seed: the first 8 bytes of
/// sha256(master_seed, test_id, model_id, shots).
pub fn derive_seed(master_seed: u64, test_id: &str, model_id: &str, shots: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_be_bytes());
    h.update([0x1f]);
    h.update(test_id.as_bytes());
    h.update([0x1f]);
    h.update(model_id.as_bytes());
    h.update([0x1f]);
    h.update(shots.to_be_bytes());
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Generate a fresh run id from the wall clock.
pub fn generate_run_id() -> String {
    format!(
        "run-{}-{:04x}",
        chrono::Utc::now().format("%Y%m%d-%H%M%S"),
        std::process::id() & 0xffff
    )
}

/// Outcome of running one candidate through prepare → run → evaluate →
/// cleanup.
pub struct ExecutionOutcome {
    pub verdict: Verdict,
    pub container_ms: u64,
    pub eval_ms: u64,
    pub log_dir: Option<String>,
}

/// Run one candidate snippet through the sandbox and the verdict engine.
/// The container is always removed; the workdir is retained or removed per
/// the keep policy. Harness failures become ERROR verdicts, never panics.
pub fn execute_candidate(test: &TestCase, code: &str, pc: &PipelineConfig) -> ExecutionOutcome {
    if let Err(reason) = pc.runtime.supports(test) {
        return ExecutionOutcome {
            verdict: Verdict::error(format!(
                "test unsupported by the {} runtime: {reason}",
                pc.runtime.name()
            )),
            container_ms: 0,
            eval_ms: 0,
            log_dir: None,
        };
    }

    let t_container = Instant::now();
    let wd = match sandbox::prepare_workdir(test, code, &pc.run_id, &pc.log_root) {
        Ok(wd) => wd,
        Err(e) => {
            return ExecutionOutcome {
                verdict: Verdict::error(format!("workdir preparation failed: {e}")),
                container_ms: t_container.elapsed().as_millis() as u64,
                eval_ms: 0,
                log_dir: None,
            }
        }
    };

    let run_result = pc.runtime.run_container(&wd, test, pc.image);
    let container_ms = t_container.elapsed().as_millis() as u64;

    let t_eval = Instant::now();
    let mut verdict = match &run_result {
        Ok(result) => {
            let ctx = CustomEvalContext {
                log_file: wd.log_file.clone(),
                diff_file: wd.diff_file.clone(),
                workdir_root: wd.root.clone(),
            };
            verdict::evaluate_full(result, test, Some(&ctx))
        }
        Err(e) => Verdict::error(format!("container run failed: {e}")),
    };
    let eval_ms = t_eval.elapsed().as_millis() as u64;

    // The container never outlives the run, whatever the verdict.
    if let Err(e) = pc.runtime.remove_container(&wd.container_name) {
        verdict
            .warnings
            .push(format!("container removal failed: {e}"));
    }
    let keep_dir = match pc.keep {
        KeepLogs::Always => true,
        KeepLogs::OnFailure => !verdict.passed(),
        KeepLogs::Never => false,
    };
    let log_dir = if keep_dir {
        Some(wd.root.display().to_string())
    } else {
        match sandbox::remove_workdir(&wd, pc.runtime) {
            Ok(()) => None,
            Err(SandboxError::CleanupFailed(paths)) => {
                verdict
                    .warnings
                    .push(format!("cleanup left paths behind: {paths:?}"));
                Some(wd.root.display().to_string())
            }
            Err(e) => {
                verdict.warnings.push(format!("cleanup failed: {e}"));
                Some(wd.root.display().to_string())
            }
        }
    };

    ExecutionOutcome {
        verdict,
        container_ms,
        eval_ms,
        log_dir,
    }
}

/// Run one (test, model, shots) cell end to end. Errors never escape: every
/// failure mode folds into the record's verdict.
pub fn run_test(
    test: &TestCase,
    model: &ModelConfig,
    shots: usize,
    seed: u64,
    pool: &[Exemplar],
    cache: &ResponseCache,
    pc: &PipelineConfig,
) -> RunRecord {
    let started_at = now_rfc3339();
    let mut record = RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        run_id: pc.run_id.clone(),
        test_id: test.id.clone(),
        suite: test.suite,
        category: test.category,
        model_id: model.model_id.clone(),
        shots,
        seed,
        started_at,
        prompt_text: String::new(),
        raw_response: String::new(),
        extracted: None,
        verdict: Verdict::error("pipeline did not start"),
        durations: Durations::default(),
        log_dir: None,
        cache_hit: false,
    };

    let assembly = match prompt::build_prompt(test, PromptStyle::QA, shots, seed, pool) {
        Ok(a) => a,
        Err(e) => {
            record.verdict = Verdict::error(format!("prompt assembly failed: {e}"));
            return record;
        }
    };
    record.prompt_text = assembly.final_text.clone();

    let t_model = Instant::now();
    let (generation, cache_outcome) =
        match gateway::generate_cached(&assembly.final_text, model, cache) {
            Ok(pair) => pair,
            Err(e) => {
                record.durations.model_ms = t_model.elapsed().as_millis() as u64;
                record.verdict = Verdict::error(format!("model request failed: {e}"));
                return record;
            }
        };
    record.durations.model_ms = t_model.elapsed().as_millis() as u64;
    record.cache_hit = cache_outcome == CacheOutcome::Hit;
    record.raw_response = generation.text.clone();

    let candidate = match extract::extract_code(&generation.text, test.suite) {
        Ok(c) => c,
        Err(extract::ExtractError::NoCodeFound) => {
            record.verdict = Verdict::fail(
                FailReason::StdoutMismatch,
                vec!["no code extracted".to_string()],
            );
            return record;
        }
    };
    record.extracted = Some(ExtractedCode {
        code: candidate.code.clone(),
        method: candidate.method,
        truncated: candidate.truncated,
    });

    // Concurrent cells of the same test (other models, other shot settings)
    // must not share a workdir or a container name: scope this cell's run id.
    let cell_pc = PipelineConfig {
        runtime: pc.runtime,
        image: pc.image,
        log_root: pc.log_root.clone(),
        keep: pc.keep,
        run_id: format!(
            "{}/{}-ea{}",
            pc.run_id,
            sandbox::sanitize_id(&model.model_id),
            shots
        ),
    };
    let outcome = execute_candidate(test, &candidate.code, &cell_pc);
    record.verdict = outcome.verdict;
    record.durations.container_ms = outcome.container_ms;
    record.durations.eval_ms = outcome.eval_ms;
    record.log_dir = outcome.log_dir;
    record
}

/// Sanity mode: pipe each reference solution through prepare → run →
/// evaluate. Every record must Pass for the environment to be trusted.
pub fn sanity_check_suite(cases: &[TestCase], pc: &PipelineConfig) -> Vec<RunRecord> {
    cases
        .iter()
        .map(|test| {
            let started_at = now_rfc3339();
            let outcome = execute_candidate(test, &test.reference_solution, pc);
            RunRecord {
                schema_version: RECORD_SCHEMA_VERSION,
                run_id: pc.run_id.clone(),
                test_id: test.id.clone(),
                suite: test.suite,
                category: test.category,
                model_id: REFERENCE_MODEL_ID.to_string(),
                shots: 0,
                seed: 0,
                started_at,
                prompt_text: test.prompt.clone(),
                raw_response: test.reference_solution.clone(),
                extracted: Some(ExtractedCode {
                    code: test.reference_solution.clone(),
                    method: ExtractionMethod::Verbatim,
                    truncated: false,
                }),
                verdict: outcome.verdict,
                durations: Durations {
                    model_ms: 0,
                    container_ms: outcome.container_ms,
                    eval_ms: outcome.eval_ms,
                },
                log_dir: outcome.log_dir,
                cache_hit: false,
            }
        })
        .collect()
}

/// A resolved benchmark plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkPlan {
    pub suites: Vec<PathBuf>,
    pub models: Vec<ModelConfig>,
    pub shot_settings: Vec<usize>,
    pub parallelism: usize,
    pub master_seed: u64,
    pub pools_dir: PathBuf,
}

impl BenchmarkPlan {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.shot_settings.is_empty() {
            return Err(OrchestratorError::Config(
                "shot_settings must be non-empty".into(),
            ));
        }
        if self.parallelism < 1 {
            return Err(OrchestratorError::Config("parallelism must be >= 1".into()));
        }
        if self.models.is_empty() {
            return Err(OrchestratorError::Config("no models configured".into()));
        }
        Ok(())
    }
}

/// Pool file name per suite under the pools directory.
pub fn pool_file_name(suite: Suite) -> &'static str {
    match suite {
        Suite::SingleLineBash => "bash-single.pool",
        Suite::MultiLineBash => "bash-multi.pool",
        Suite::PowerShell => "powershell.pool",
    }
}

/// Load records from a records.jsonl file; an absent file is an empty run.
pub fn load_records(path: &Path) -> Result<Vec<RunRecord>, OrchestratorError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(line).map_err(|e| OrchestratorError::Io {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", i + 1),
        })?;
        records.push(record);
    }
    Ok(records)
}

struct RecordSink {
    file: Mutex<fs::File>,
    path: PathBuf,
}

impl RecordSink {
    fn open(path: &Path) -> Result<Self, OrchestratorError> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(RecordSink {
            file: Mutex::new(file),
            path: path.to_path_buf(),
        })
    }

    fn append(&self, record: &RunRecord) -> Result<(), OrchestratorError> {
        let line = serde_json::to_string(record).expect("record is serializable");
        let mut file = self.file.lock().expect("record sink lock");
        writeln!(file, "{line}").map_err(io_err(&self.path))?;
        file.flush().map_err(io_err(&self.path))
    }
}

/// Check that a model is worth contacting before the run starts: its auth
/// env var resolves and its endpoint accepts a TCP connection. Skipped when
/// every planned cell for the model is already cached. The probe itself
/// lives in the gateway, the one module that touches the network.
fn preflight_model(model: &ModelConfig) -> Result<(), OrchestratorError> {
    gateway::check_reachable(model).map_err(|detail| OrchestratorError::Preflight {
        model: model.model_id.clone(),
        detail,
    })
}

struct Cell {
    test_idx: usize,
    model_idx: usize,
    shots: usize,
    seed: u64,
}

/// Everything a benchmark run produced.
pub struct BenchmarkOutcome {
    pub records: Vec<RunRecord>,
    pub records_path: PathBuf,
    pub run_dir: PathBuf,
}

/// Execute the full (tests x models x shots) cross product with at most
/// `parallelism` concurrent containers, appending records incrementally.
/// Cells already present in records.jsonl are skipped, so an interrupted run
/// resumes for free.
pub fn run_benchmark(
    plan: &BenchmarkPlan,
    runs_root: &Path,
    cache: &ResponseCache,
    pc: &PipelineConfig,
) -> Result<BenchmarkOutcome, OrchestratorError> {
    plan.validate()?;
    for model in &plan.models {
        model
            .validate()
            .map_err(|e| OrchestratorError::Config(e.to_string()))?;
    }

    let mut tests: Vec<TestCase> = Vec::new();
    for suite_dir in &plan.suites {
        let cases = crate::suite::load_suite(suite_dir).map_err(|e| {
            OrchestratorError::Config(format!("loading {}: {e}", suite_dir.display()))
        })?;
        tests.extend(cases);
    }
    if tests.is_empty() {
        return Err(OrchestratorError::Config("plan matched no tests".into()));
    }

    // Pools are only needed for few-shot cells.
    let needs_pool = plan.shot_settings.iter().any(|&k| k > 0);
    let mut pools: std::collections::BTreeMap<Suite, Vec<Exemplar>> = Default::default();
    for suite in [
        Suite::SingleLineBash,
        Suite::MultiLineBash,
        Suite::PowerShell,
    ] {
        if needs_pool && tests.iter().any(|t| t.suite == suite) {
            let path = plan.pools_dir.join(pool_file_name(suite));
            let pool =
                prompt::load_pool(&path).map_err(|e| OrchestratorError::Config(e.to_string()))?;
            pools.insert(suite, pool);
        } else {
            pools.insert(suite, Vec::new());
        }
    }

    let run_dir = runs_root.join(&pc.run_id);
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let plan_path = run_dir.join("plan");
    fs::write(
        &plan_path,
        toml::to_string_pretty(plan).expect("plan is serializable"),
    )
    .map_err(io_err(&plan_path))?;

    let records_path = run_dir.join("records.jsonl");
    let existing = load_records(&records_path)?;
    let done: BTreeSet<(String, String, usize)> = existing
        .iter()
        .map(|r| (r.test_id.clone(), r.model_id.clone(), r.shots))
        .collect();

    // Deterministic cell order: suite file order, then test id, model order,
    // shot order.
    let mut cells: Vec<Cell> = Vec::new();
    for (test_idx, test) in tests.iter().enumerate() {
        for (model_idx, model) in plan.models.iter().enumerate() {
            for &shots in &plan.shot_settings {
                if done.contains(&(test.id.clone(), model.model_id.clone(), shots)) {
                    continue;
                }
                cells.push(Cell {
                    test_idx,
                    model_idx,
                    shots,
                    seed: derive_seed(plan.master_seed, &test.id, &model.model_id, shots),
                });
            }
        }
    }

    // Preflight each model that still has uncached cells to run.
    for (model_idx, model) in plan.models.iter().enumerate() {
        let all_cached = cells.iter().filter(|c| c.model_idx == model_idx).all(|c| {
            let test = &tests[c.test_idx];
            let pool = &pools[&test.suite];
            match prompt::build_prompt(test, PromptStyle::QA, c.shots, c.seed, pool) {
                Ok(a) => cache.contains(&ResponseCache::key(model, &a.final_text)),
                Err(_) => true, // surfaces as an Error record later
            }
        });
        if !all_cached {
            preflight_model(model)?;
        }
    }

    let sink = RecordSink::open(&records_path)?;
    let queue: Mutex<std::collections::VecDeque<Cell>> = Mutex::new(cells.into());
    let sink_err: Mutex<Option<OrchestratorError>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..plan.parallelism.max(1) {
            scope.spawn(|| loop {
                let cell = match queue.lock().expect("queue lock").pop_front() {
                    Some(c) => c,
                    None => break,
                };
                let test = &tests[cell.test_idx];
                let model = &plan.models[cell.model_idx];
                let pool = &pools[&test.suite];
                let record = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    run_test(test, model, cell.shots, cell.seed, pool, cache, pc)
                }))
                .unwrap_or_else(|panic| {
                    let detail = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "panic".into());
                    let mut record = RunRecord {
                        schema_version: RECORD_SCHEMA_VERSION,
                        run_id: pc.run_id.clone(),
                        test_id: test.id.clone(),
                        suite: test.suite,
                        category: test.category,
                        model_id: model.model_id.clone(),
                        shots: cell.shots,
                        seed: cell.seed,
                        started_at: now_rfc3339(),
                        prompt_text: String::new(),
                        raw_response: String::new(),
                        extracted: None,
                        verdict: Verdict::error(format!("worker panic: {detail}")),
                        durations: Durations::default(),
                        log_dir: None,
                        cache_hit: false,
                    };
                    record.verdict.reason = FailReason::HarnessError;
                    record
                });
                if let Err(e) = sink.append(&record) {
                    *sink_err.lock().expect("sink error lock") = Some(e);
                    break;
                }
            });
        }
    });

    if let Some(e) = sink_err.into_inner().expect("sink error lock") {
        return Err(e);
    }

    let mut records = load_records(&records_path)?;
    records.sort_by(|a, b| {
        (&a.test_id, &a.model_id, a.shots).cmp(&(&b.test_id, &b.model_id, b.shots))
    });

    // Every planned cell must have a record now.
    let have: BTreeSet<(String, String, usize)> = records
        .iter()
        .map(|r| (r.test_id.clone(), r.model_id.clone(), r.shots))
        .collect();
    let missing: Vec<String> = tests
        .iter()
        .flat_map(|t| {
            plan.models.iter().flat_map(move |m| {
                plan.shot_settings
                    .iter()
                    .map(move |&k| (t.id.clone(), m.model_id.clone(), k))
            })
        })
        .filter(|cell| !have.contains(cell))
        .map(|(t, m, k)| format!("{t}/{m}/EA-{k}"))
        .collect();
    if !missing.is_empty() {
        return Err(OrchestratorError::PartialRun(missing));
    }

    Ok(BenchmarkOutcome {
        records,
        records_path,
        run_dir,
    })
}

/// Normalize a record for determinism comparisons: identity and wall-clock
/// fields (run_id, started_at, durations, log_dir) are zeroed; everything
/// the pipeline computes deterministically is kept.
pub fn normalize_for_comparison(record: &RunRecord) -> RunRecord {
    let mut r = record.clone();
    r.run_id = String::new();
    r.started_at = String::new();
    r.durations = Durations::default();
    r.log_dir = None;
    r
}
