//! Command-line entry point.
//!
//! Exit codes: 0 on full success, 1 when evaluation failures are present
//! (sanity or bench with any non-Pass verdict, validate with issues), 2 on
//! usage or configuration errors. Progress goes to stderr; machine-readable
//! output goes to files or stdout.

use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shelljudge::extract;
use shelljudge::gateway::{self, ResponseCache};
use shelljudge::orchestrator::{self, BenchmarkPlan, KeepLogs, PipelineConfig, RunRecord};
use shelljudge::report::{self, Format};
use shelljudge::sandbox::{self, ImageSpec, RuntimeKind};
use shelljudge::suite::{self, Suite};
use shelljudge::verdict::VerdictStatus;

#[derive(Parser)]
#[command(
    name = "shelljudge",
    version,
    about = "Executes LLM-generated shell code in disposable sandboxes and judges the observable effects"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RuntimeArgs {
    /// Sandbox backend: auto picks podman when available, else the
    /// process fallback.
    #[arg(long, default_value = "auto")]
    runtime: String,
    /// Working-directory root for per-test sandboxes.
    #[arg(long, default_value = "log")]
    log_root: PathBuf,
    /// Retain every workdir, not just failing ones.
    #[arg(long)]
    keep_logs: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Statically validate a test suite directory.
    Validate {
        #[arg(long)]
        suite: PathBuf,
    },
    /// Run every reference solution through the full pipeline; all must pass.
    Sanity {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        runtime: RuntimeArgs,
    },
    /// Run a single test with a candidate from a file (or its reference
    /// solution) and print the verdict.
    RunTest {
        #[arg(long)]
        suite: PathBuf,
        /// Test id, e.g. bash1/test001.
        #[arg(long)]
        id: String,
        /// Candidate code file; defaults to the reference solution.
        #[arg(long)]
        candidate: Option<PathBuf>,
        #[command(flatten)]
        runtime: RuntimeArgs,
    },
    /// Run a benchmark plan: tests x models x shot settings.
    Bench {
        #[arg(long)]
        plan: PathBuf,
        /// Override the plan's models file.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Override the plan's shot settings (repeatable).
        #[arg(long)]
        shots: Vec<usize>,
        /// Override the plan's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the plan's parallelism.
        #[arg(long)]
        jobs: Option<usize>,
        /// Response cache directory.
        #[arg(long, default_value = "cache")]
        cache: PathBuf,
        /// Run directory root for records and reports.
        #[arg(long, default_value = "runs")]
        runs_root: PathBuf,
        /// Explicit run id (defaults to a timestamped one).
        #[arg(long)]
        run_id: Option<String>,
        #[command(flatten)]
        runtime: RuntimeArgs,
    },
    /// Read raw model output on stdin, write the extracted code to stdout
    /// and the extraction method to stderr.
    Extract {
        /// Target suite semantics: single-line-bash, multi-line-bash or
        /// powershell.
        #[arg(long, default_value = "single-line-bash")]
        suite: String,
    },
    /// Recompute a report from a run directory's records.jsonl.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "md")]
        format: String,
    },
    /// Remove leftover workdirs and containers from aborted runs.
    Clean {
        #[command(flatten)]
        runtime: RuntimeArgs,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(failures_present) => {
            if failures_present {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn parse_runtime(args: &RuntimeArgs) -> Result<Box<dyn sandbox::Runtime>, String> {
    let kind: RuntimeKind = args.runtime.parse()?;
    sandbox::select_runtime(kind).map_err(|e| e.to_string())
}

fn keep_policy(args: &RuntimeArgs) -> KeepLogs {
    if args.keep_logs {
        KeepLogs::Always
    } else {
        KeepLogs::OnFailure
    }
}

fn print_record_line(record: &RunRecord) {
    let status = match record.verdict.status {
        VerdictStatus::Pass => "PASS",
        VerdictStatus::Fail => "FAIL",
        VerdictStatus::Error => "ERROR",
        VerdictStatus::Timeout => "TIMEOUT",
    };
    eprintln!("{:<8} {} [{}]", status, record.test_id, record.model_id);
    for warning in &record.verdict.warnings {
        eprintln!("         warning: {warning}");
    }
    if record.verdict.status != VerdictStatus::Pass {
        for diag in &record.verdict.diagnostics {
            eprintln!("         {diag}");
        }
        if let Some(dir) = &record.log_dir {
            eprintln!("         logs: {dir}");
        }
    }
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.command {
        Command::Validate { suite: dir } => {
            let cases = suite::load_suite(&dir).map_err(|e| e.to_string())?;
            let issues = suite::validate_suite(&cases);
            for issue in &issues {
                println!("{issue}");
            }
            eprintln!(
                "validated {} case(s), {} issue(s)",
                cases.len(),
                issues.len()
            );
            Ok(!issues.is_empty())
        }

        Command::Sanity {
            suite: dir,
            jobs,
            runtime,
        } => {
            let cases = suite::load_suite(&dir).map_err(|e| e.to_string())?;
            let rt = parse_runtime(&runtime)?;
            let image = rt
                .build_image(&ImageSpec::default())
                .map_err(|e| e.to_string())?;
            let pc = PipelineConfig {
                runtime: rt.as_ref(),
                image: &image,
                log_root: runtime.log_root.clone(),
                keep: keep_policy(&runtime),
                run_id: orchestrator::generate_run_id(),
            };
            let records = if jobs <= 1 {
                orchestrator::sanity_check_suite(&cases, &pc)
            } else {
                // Split the suite across jobs; each worker runs its share
                // serially against the shared pipeline config.
                let chunks: Vec<Vec<suite::TestCase>> = cases
                    .chunks(cases.len().div_ceil(jobs).max(1))
                    .map(<[suite::TestCase]>::to_vec)
                    .collect();
                let mut all: Vec<RunRecord> = std::thread::scope(|scope| {
                    let handles: Vec<_> = chunks
                        .iter()
                        .map(|chunk| scope.spawn(|| orchestrator::sanity_check_suite(chunk, &pc)))
                        .collect();
                    handles
                        .into_iter()
                        .flat_map(|h| h.join().expect("sanity worker"))
                        .collect()
                });
                all.sort_by(|a, b| a.test_id.cmp(&b.test_id));
                all
            };
            let mut failures = 0;
            for record in &records {
                print_record_line(record);
                if record.verdict.status != VerdictStatus::Pass {
                    failures += 1;
                }
            }
            eprintln!(
                "sanity: {}/{} passed",
                records.len() - failures,
                records.len()
            );
            Ok(failures > 0)
        }

        Command::RunTest {
            suite: dir,
            id,
            candidate,
            runtime,
        } => {
            let cases = suite::load_suite(&dir).map_err(|e| e.to_string())?;
            let test = cases
                .iter()
                .find(|c| c.id == id)
                .ok_or_else(|| format!("no test with id `{id}` in {}", dir.display()))?;
            let code = match candidate {
                Some(path) => std::fs::read_to_string(&path)
                    .map_err(|e| format!("cannot read {}: {e}", path.display()))?,
                None => test.reference_solution.clone(),
            };
            let rt = parse_runtime(&runtime)?;
            let image = rt
                .build_image(&ImageSpec::default())
                .map_err(|e| e.to_string())?;
            let pc = PipelineConfig {
                runtime: rt.as_ref(),
                image: &image,
                log_root: runtime.log_root.clone(),
                keep: keep_policy(&runtime),
                run_id: orchestrator::generate_run_id(),
            };
            let outcome = orchestrator::execute_candidate(test, &code, &pc);
            println!(
                "{}",
                serde_json::to_string_pretty(&outcome.verdict).expect("verdict is serializable")
            );
            Ok(outcome.verdict.status != VerdictStatus::Pass)
        }

        Command::Bench {
            plan: plan_path,
            models,
            shots,
            seed,
            jobs,
            cache,
            runs_root,
            run_id,
            runtime,
        } => {
            let mut plan = load_plan(&plan_path)?;
            if let Some(models_path) = models {
                plan.models = gateway::load_models(&models_path).map_err(|e| e.to_string())?;
            }
            if !shots.is_empty() {
                plan.shot_settings = shots;
            }
            if let Some(s) = seed {
                plan.master_seed = s;
            }
            if let Some(j) = jobs {
                plan.parallelism = j;
            }
            let rt = parse_runtime(&runtime)?;
            let image = rt
                .build_image(&ImageSpec::default())
                .map_err(|e| e.to_string())?;
            let cache = ResponseCache::open(&cache).map_err(|e| e.to_string())?;
            let pc = PipelineConfig {
                runtime: rt.as_ref(),
                image: &image,
                log_root: runtime.log_root.clone(),
                keep: keep_policy(&runtime),
                run_id: run_id.unwrap_or_else(orchestrator::generate_run_id),
            };
            let outcome = orchestrator::run_benchmark(&plan, &runs_root, &cache, &pc)
                .map_err(|e| e.to_string())?;
            for record in &outcome.records {
                print_record_line(record);
            }
            let rep = report::accuracy(&outcome.records);
            for (format, name) in [
                (Format::Markdown, "report.md"),
                (Format::Json, "report.json"),
                (Format::Csv, "report.csv"),
            ] {
                let path = outcome.run_dir.join(name);
                std::fs::write(&path, report::render(&rep, format))
                    .map_err(|e| format!("writing {}: {e}", path.display()))?;
            }
            let failures = outcome
                .records
                .iter()
                .filter(|r| r.verdict.status != VerdictStatus::Pass)
                .count();
            eprintln!(
                "bench: {}/{} passed; records at {}",
                outcome.records.len() - failures,
                outcome.records.len(),
                outcome.records_path.display()
            );
            Ok(failures > 0)
        }

        Command::Extract { suite: name } => {
            let suite = parse_suite_name(&name)?;
            let mut raw = String::new();
            std::io::stdin()
                .read_to_string(&mut raw)
                .map_err(|e| format!("reading stdin: {e}"))?;
            match extract::extract_code(&raw, suite) {
                Ok(candidate) => {
                    println!("{}", candidate.code);
                    eprintln!("{:?}", candidate.method);
                    Ok(false)
                }
                Err(e) => Err(e.to_string()),
            }
        }

        Command::Report { run, format } => {
            let format: Format = format
                .parse()
                .map_err(|e: report::ReportError| e.to_string())?;
            let records = orchestrator::load_records(&run.join("records.jsonl"))
                .map_err(|e| e.to_string())?;
            let rep = report::accuracy(&records);
            println!("{}", report::render(&rep, format));
            Ok(false)
        }

        Command::Clean { runtime } => {
            let rt = parse_runtime(&runtime)?;
            let mut removed = 0;
            if runtime.log_root.is_dir() {
                for entry in std::fs::read_dir(&runtime.log_root)
                    .map_err(|e| format!("reading {}: {e}", runtime.log_root.display()))?
                {
                    let entry = entry.map_err(|e| e.to_string())?;
                    if std::fs::remove_dir_all(entry.path()).is_err() {
                        rt.force_remove_workdir(&entry.path())
                            .map_err(|e| e.to_string())?;
                    }
                    removed += 1;
                }
            }
            eprintln!("clean: removed {removed} leftover run director(ies)");
            Ok(false)
        }
    }
}

fn parse_suite_name(name: &str) -> Result<Suite, String> {
    match name {
        "single-line-bash" | "bash-single" => Ok(Suite::SingleLineBash),
        "multi-line-bash" | "bash-multi" => Ok(Suite::MultiLineBash),
        "powershell" => Ok(Suite::PowerShell),
        other => Err(format!(
            "unknown suite `{other}` (single-line-bash|multi-line-bash|powershell)"
        )),
    }
}

/// Plan file: suites, shot settings, seed, parallelism, and either inline
/// `[[models]]` or a `models_file` path (resolved relative to the plan).
#[derive(serde::Deserialize)]
struct PlanFile {
    suites: Vec<PathBuf>,
    #[serde(default)]
    models: Vec<gateway::ModelConfig>,
    #[serde(default)]
    models_file: Option<PathBuf>,
    #[serde(default = "default_shots")]
    shot_settings: Vec<usize>,
    #[serde(default = "default_parallelism")]
    parallelism: usize,
    #[serde(default)]
    master_seed: u64,
    #[serde(default = "default_pools_dir")]
    pools_dir: PathBuf,
}

fn default_shots() -> Vec<usize> {
    vec![0]
}
fn default_parallelism() -> usize {
    1
}
fn default_pools_dir() -> PathBuf {
    PathBuf::from("pools")
}

fn load_plan(path: &PathBuf) -> Result<BenchmarkPlan, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read plan {}: {e}", path.display()))?;
    let file: PlanFile =
        toml::from_str(&text).map_err(|e| format!("plan {}: {e}", path.display()))?;
    let base = path.parent().unwrap_or_else(|| std::path::Path::new("."));
    let mut models = file.models;
    if let Some(models_file) = file.models_file {
        let resolved = if models_file.is_absolute() {
            models_file
        } else {
            base.join(models_file)
        };
        models.extend(gateway::load_models(&resolved).map_err(|e| e.to_string())?);
    }
    let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
    Ok(BenchmarkPlan {
        suites: file.suites.into_iter().map(resolve).collect(),
        models,
        shot_settings: file.shot_settings,
        parallelism: file.parallelism,
        master_seed: file.master_seed,
        pools_dir: resolve(file.pools_dir),
    })
}
