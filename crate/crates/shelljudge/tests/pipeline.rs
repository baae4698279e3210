//! End-to-end pipeline tests against the process backend and a loopback
//! model stub. No test here talks to anything beyond 127.0.0.1.

mod common;

use std::path::PathBuf;

use common::{StubReply, StubServer};
use shelljudge::gateway::{ApiStyle, GatewayError, ModelConfig, ResponseCache};
use shelljudge::orchestrator::{self, BenchmarkPlan, KeepLogs, PipelineConfig};
use shelljudge::sandbox::{ImageSpec, ProcessRuntime, Runtime};
use shelljudge::suite::{
    self, Category, ContainerOverrides, ExecMode, ProbeAssertion, Suite, TestCase, VerificationSpec,
};
use shelljudge::verdict::{FailReason, VerdictStatus};

fn stub_model(url: String) -> ModelConfig {
    ModelConfig {
        model_id: "stub-model".into(),
        endpoint_url: url,
        auth_token_env: None,
        max_tokens: 512,
        temperature: 0.0,
        request_timeout_s: 5,
        max_retries: 2,
        api_style: ApiStyle::Chat,
        max_concurrent_requests: 0,
    }
}

fn scratch_case(id: &str, suite: Suite, solution: &str) -> TestCase {
    TestCase {
        id: id.into(),
        name: "scratch".into(),
        prompt: format!("Scratch prompt for {id}?"),
        reference_solution: format!("{solution}\n"),
        suite,
        category: Category::Other,
        exec_mode: ExecMode::Subshell,
        home_prototype: Vec::new(),
        pre_test: None,
        post_test: None,
        host_prologue: None,
        expected_changes: None,
        custom_eval: None,
        container_opts: ContainerOverrides {
            timeout_s: 30,
            ..ContainerOverrides::default()
        },
        verify: VerificationSpec::default(),
    }
}

struct Pipeline {
    runtime: ProcessRuntime,
    image: shelljudge::sandbox::ImageId,
    log_root: tempfile::TempDir,
}

impl Pipeline {
    fn new() -> Self {
        let runtime = ProcessRuntime::new();
        let image = runtime.build_image(&ImageSpec::default()).unwrap();
        Pipeline {
            runtime,
            image,
            log_root: tempfile::tempdir().unwrap(),
        }
    }

    fn config(&self, run_id: &str, keep: KeepLogs) -> PipelineConfig<'_> {
        PipelineConfig {
            runtime: &self.runtime,
            image: &self.image,
            log_root: self.log_root.path().to_path_buf(),
            keep,
            run_id: run_id.into(),
        }
    }
}

#[test]
fn sourced_candidate_calling_exit_cannot_suppress_post_test() {
    let suite_cases = suite::load_suite(&common::suite_dir("bash-single")).unwrap();
    let tz = suite_cases
        .iter()
        .find(|c| c.id == "bash1/test007")
        .expect("timezone test ships");
    assert_eq!(tz.exec_mode, ExecMode::Sourced);

    let p = Pipeline::new();
    let pc = p.config("sourced-exit", KeepLogs::Never);
    // The candidate sets the variable and then exits the sourced shell; the
    // EXIT trap still runs post_test, which emits the probes.
    let outcome = orchestrator::execute_candidate(tz, "export TZ=America/New_York && exit 0", &pc);
    assert_eq!(
        outcome.verdict.status,
        VerdictStatus::Pass,
        "verdict: {:?}",
        outcome.verdict
    );
}

#[test]
fn subshell_default_shields_the_driver_from_exit() {
    let mut test = scratch_case(
        "scratch/exit",
        Suite::MultiLineBash,
        "echo a\nexit 0\necho b",
    );
    test.post_test = Some("echo \"#++POST_RAN=yes\"\n".into());
    test.verify.stdout_must_match = vec!["^a$".into()];
    test.verify.probe_assertions = vec![ProbeAssertion {
        var: "POST_RAN".into(),
        pattern: "^yes$".into(),
    }];
    let p = Pipeline::new();
    let pc = p.config("subshell-exit", KeepLogs::Never);
    let outcome = orchestrator::execute_candidate(&test, test.reference_solution.trim(), &pc);
    assert_eq!(outcome.verdict.status, VerdictStatus::Pass);
}

#[test]
fn no_code_found_yields_the_dedicated_diagnostic() {
    let stub = StubServer::fixed("I cannot help with that.");
    let model = stub_model(stub.chat_url());
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(cache_dir.path()).unwrap();
    let test = {
        let cases = suite::load_suite(&common::suite_dir("bash-single")).unwrap();
        cases.into_iter().find(|c| c.id == "bash1/test001").unwrap()
    };
    let p = Pipeline::new();
    let pc = p.config("nocode", KeepLogs::Never);
    let record = orchestrator::run_test(&test, &model, 0, 7, &[], &cache, &pc);
    assert_eq!(record.verdict.status, VerdictStatus::Fail);
    assert!(record
        .verdict
        .diagnostics
        .iter()
        .any(|d| d == "no code extracted"));
    assert!(record.extracted.is_none());
    // The sandbox never launched.
    assert_eq!(record.durations.container_ms, 0);
}

#[test]
fn model_stage_timeout_becomes_error_without_container_launch() {
    let stub = StubServer::start(Box::new(|_| StubReply::Hang));
    let mut model = stub_model(stub.chat_url());
    model.request_timeout_s = 1;
    model.max_retries = 0;
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(cache_dir.path()).unwrap();
    let test = scratch_case("scratch/hang", Suite::SingleLineBash, "echo hi");
    let p = Pipeline::new();
    let pc = p.config("hang", KeepLogs::Never);
    let record = orchestrator::run_test(&test, &model, 0, 7, &[], &cache, &pc);
    assert_eq!(record.verdict.status, VerdictStatus::Error);
    assert_eq!(record.durations.container_ms, 0);
}

#[test]
fn gateway_retries_transient_500s_then_succeeds() {
    let stub = StubServer::fixed("echo recovered");
    stub.push_script(vec![
        StubReply::Status(500, "flaky".into()),
        StubReply::Status(503, "flaky".into()),
    ]);
    let model = stub_model(stub.chat_url());
    let generation = shelljudge::gateway::generate("hi", &model).unwrap();
    assert_eq!(generation.text, "echo recovered");
    assert_eq!(stub.hits(), 3);
}

#[test]
fn gateway_exhausts_retries_on_persistent_500s() {
    let stub = StubServer::start(Box::new(|_| StubReply::Status(500, "down".into())));
    let mut model = stub_model(stub.chat_url());
    model.max_retries = 2;
    match shelljudge::gateway::generate("hi", &model) {
        Err(GatewayError::RetriesExhausted { attempts: 3, .. }) => {}
        other => panic!("expected RetriesExhausted after 3 attempts, got {other:?}"),
    }
    assert_eq!(stub.hits(), 3);
}

#[test]
fn cached_replay_is_identical_and_makes_zero_network_calls() {
    let stub = StubServer::start(common::reference_answers());
    let model = stub_model(stub.chat_url());
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(cache_dir.path()).unwrap();
    let test = {
        let cases = suite::load_suite(&common::suite_dir("bash-single")).unwrap();
        cases.into_iter().find(|c| c.id == "bash1/test002").unwrap()
    };
    let pool = shelljudge::prompt::load_pool(
        &common::pools_dir().join(orchestrator::pool_file_name(Suite::SingleLineBash)),
    )
    .unwrap();

    let p = Pipeline::new();
    let pc = p.config("replay-a", KeepLogs::Never);
    let first = orchestrator::run_test(&test, &model, 5, 99, &pool, &cache, &pc);
    assert_eq!(first.verdict.status, VerdictStatus::Pass);
    assert!(!first.cache_hit);
    let hits_after_first = stub.hits();
    assert!(hits_after_first >= 1);

    let pc = p.config("replay-b", KeepLogs::Never);
    let second = orchestrator::run_test(&test, &model, 5, 99, &pool, &cache, &pc);
    assert!(second.cache_hit);
    assert_eq!(stub.hits(), hits_after_first, "no new network calls");
    assert_eq!(orchestrator::normalize_for_comparison(&first), {
        let mut n = orchestrator::normalize_for_comparison(&second);
        n.cache_hit = first.cache_hit; // the hit flag is the one allowed difference
        n
    });
}

#[test]
fn different_temperature_is_a_distinct_cache_entry() {
    let stub = StubServer::fixed("echo hi");
    let mut model = stub_model(stub.chat_url());
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(cache_dir.path()).unwrap();
    let (_, outcome) = shelljudge::gateway::generate_cached("p", &model, &cache).unwrap();
    assert_eq!(outcome, shelljudge::gateway::CacheOutcome::Miss);
    model.temperature = 0.7;
    let (_, outcome) = shelljudge::gateway::generate_cached("p", &model, &cache).unwrap();
    assert_eq!(outcome, shelljudge::gateway::CacheOutcome::Miss);
    assert_eq!(stub.hits(), 2);
}

fn bench_plan(parallelism: usize, seed: u64) -> BenchmarkPlan {
    BenchmarkPlan {
        suites: vec![
            common::suite_dir("bash-single"),
            common::suite_dir("bash-multi"),
        ],
        models: Vec::new(),
        shot_settings: vec![0, 5],
        parallelism,
        master_seed: seed,
        pools_dir: common::pools_dir(),
    }
}

#[test]
fn interrupted_benchmark_resumes_without_requerying() {
    let stub = StubServer::start(common::reference_answers());
    let model = stub_model(stub.chat_url());
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(cache_dir.path()).unwrap();
    let runs_root = tempfile::tempdir().unwrap();
    let mut plan = bench_plan(1, 42);
    plan.models = vec![model];

    let p = Pipeline::new();
    let pc = p.config("resume-run", KeepLogs::Never);
    let outcome = orchestrator::run_benchmark(&plan, runs_root.path(), &cache, &pc).unwrap();
    let total_cells = outcome.records.len();
    assert_eq!(total_cells, 12 * 2); // 12 tests x 1 model x 2 shot settings

    // Simulate an interruption: drop the last three records.
    let text = std::fs::read_to_string(&outcome.records_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    std::fs::write(
        &outcome.records_path,
        lines[..lines.len() - 3].join("\n") + "\n",
    )
    .unwrap();

    let hits_before_resume = stub.hits();
    let pc = p.config("resume-run", KeepLogs::Never);
    let resumed = orchestrator::run_benchmark(&plan, runs_root.path(), &cache, &pc).unwrap();
    assert_eq!(resumed.records.len(), total_cells);
    // Completions were cached: resuming queried nothing.
    assert_eq!(stub.hits(), hits_before_resume);

    // A second full rerun of a complete run adds no records at all.
    let line_count = std::fs::read_to_string(&resumed.records_path)
        .unwrap()
        .lines()
        .count();
    assert_eq!(line_count, total_cells);
}

#[test]
fn parallel_and_serial_runs_agree_on_verdicts() {
    let stub = StubServer::start(common::reference_answers());
    let model = stub_model(stub.chat_url());
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(cache_dir.path()).unwrap();
    let runs_root = tempfile::tempdir().unwrap();

    let mut serial_plan = bench_plan(1, 7);
    serial_plan.models = vec![model.clone()];
    let mut parallel_plan = bench_plan(4, 7);
    parallel_plan.models = vec![model];

    let p = Pipeline::new();
    let serial = orchestrator::run_benchmark(
        &serial_plan,
        runs_root.path(),
        &cache,
        &p.config("serial", KeepLogs::Never),
    )
    .unwrap();
    let parallel = orchestrator::run_benchmark(
        &parallel_plan,
        runs_root.path(),
        &cache,
        &p.config("parallel", KeepLogs::Never),
    )
    .unwrap();

    let key = |records: &[orchestrator::RunRecord]| {
        let mut v: Vec<(String, String, usize, VerdictStatus)> = records
            .iter()
            .map(|r| {
                (
                    r.test_id.clone(),
                    r.model_id.clone(),
                    r.shots,
                    r.verdict.status,
                )
            })
            .collect();
        v.sort();
        v
    };
    assert_eq!(key(&serial.records), key(&parallel.records));
}

#[test]
fn destructive_home_wipe_is_contained_and_fails() {
    let mut test = scratch_case("scratch/wipe", Suite::SingleLineBash, "rm -fr ~");
    test.home_prototype.push(shelljudge::suite::HomeEntry {
        rel_path: "precious.txt".into(),
        content: b"irreplaceable\n".to_vec(),
        executable: false,
    });
    test.verify.stdout_must_match = vec!["^unsatisfiable$".into()];
    let p = Pipeline::new();
    let pc = p.config("wipe", KeepLogs::Never);
    let outcome = orchestrator::execute_candidate(&test, "rm -fr ~", &pc);
    // The wipe deletes the workdir copy (observable in the delta) and the
    // harness still cleans up.
    assert_eq!(outcome.verdict.status, VerdictStatus::Fail);
    assert!(p.log_root.path().read_dir().unwrap().next().is_none());
}

#[test]
fn prompt_pool_too_small_is_an_error_record_not_a_panic() {
    let stub = StubServer::fixed("echo hi");
    let model = stub_model(stub.chat_url());
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(cache_dir.path()).unwrap();
    let test = scratch_case("scratch/smallpool", Suite::SingleLineBash, "echo hi");
    let p = Pipeline::new();
    let pc = p.config("smallpool", KeepLogs::Never);
    let record = orchestrator::run_test(&test, &model, 10, 7, &[], &cache, &pc);
    assert_eq!(record.verdict.status, VerdictStatus::Error);
    assert_eq!(record.verdict.reason, FailReason::HarnessError);
    assert_eq!(stub.hits(), 0);
}

#[test]
fn failing_workdirs_are_retained_on_request_and_contain_the_logs() {
    let mut test = scratch_case("scratch/keep", Suite::SingleLineBash, "echo hi");
    test.verify.stdout_must_match = vec!["^nope$".into()];
    let p = Pipeline::new();
    let pc = p.config("keep-run", KeepLogs::OnFailure);
    let outcome = orchestrator::execute_candidate(&test, "echo hi", &pc);
    assert_eq!(outcome.verdict.status, VerdictStatus::Fail);
    let dir = PathBuf::from(outcome.log_dir.expect("failure keeps the workdir"));
    assert!(dir.join("podman.log").is_file());
    assert!(dir.join("diff.log").is_file());
    let log = std::fs::read_to_string(dir.join("podman.log")).unwrap();
    assert!(log.contains("STDOUT: hi"));
}
