//! Execution-based evaluation of LLM-generated shell code.
//!
//! The pipeline: assemble a prompt for a test case, query a model endpoint,
//! extract the first code snippet from the raw completion, run it inside a
//! disposable sandbox (rootless podman container, or a plain subprocess where
//! no container runtime exists), collect output streams and filesystem deltas,
//! and judge the observable effects against the test's verification spec.
//!
//! Modules map onto the pipeline stages:
//! - [`suite`]: on-disk test-suite format, loading and static validation
//! - [`extract`]: first-code-occurrence extraction from raw model output
//! - [`prompt`]: zero-/few-shot Q/A prompt assembly with seeded exemplar sampling
//! - [`gateway`]: model endpoint client with retries and an on-disk response cache
//! - [`sandbox`]: image build, workdir preparation, container/process execution
//! - [`verdict`]: stream, filesystem, probe-variable and stdout rule evaluation
//! - [`orchestrator`]: end-to-end runs, sanity mode, benchmark plans, run records
//! - [`report`]: execution-accuracy tables in markdown, JSON and CSV

pub mod extract;
pub mod gateway;
pub mod orchestrator;
pub mod prompt;
pub mod report;
pub mod sandbox;
pub mod suite;
pub mod verdict;
