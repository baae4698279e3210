//! Zero-shot and few-shot prompt assembly.
//!
//! Few-shot exemplars are sampled without replacement from a per-suite pool
//! with a seeded RNG, so the same (pool, k, seed) always produces the same
//! prompt. The target test's own prompt is never used as an exemplar.
//!
//! Pool file format: UTF-8, records separated by a line containing only `---`;
//! each record is `Q: <one line>` followed by one or more answer lines.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::suite::TestCase;

/// One question/answer pair available for few-shot prompting.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptStyle {
    /// "Q: ...\nA: ..." blocks ending with the target question and an `A:` cue.
    QA,
    /// Bare instruction text. Implemented but untuned.
    Imperative,
}

/// A fully rendered prompt plus the sampling provenance that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptAssembly {
    pub style: PromptStyle,
    pub shots: usize,
    pub seed: u64,
    pub exemplars: Vec<Exemplar>,
    pub final_text: String,
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("exemplar pool too small: need {need}, have {have}")]
    PoolTooSmall { need: usize, have: usize },
    #[error("pool parse error at {path}: {detail}")]
    PoolParse { path: String, detail: String },
    #[error("i/o error reading pool {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Parse a pool file.
pub fn load_pool(path: &Path) -> Result<Vec<Exemplar>, PromptError> {
    let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_pool(&text).map_err(|detail| PromptError::PoolParse {
        path: path.display().to_string(),
        detail,
    })
}

fn parse_pool(text: &str) -> Result<Vec<Exemplar>, String> {
    let mut pool = Vec::new();
    for (i, record) in text.split("\n---\n").enumerate() {
        let record = record.trim_matches('\n');
        if record.trim().is_empty() {
            continue;
        }
        let mut lines = record.lines();
        let first = lines.next().unwrap_or("");
        let question = first
            .strip_prefix("Q: ")
            .ok_or_else(|| format!("record {} does not start with `Q: `", i + 1))?
            .trim()
            .to_string();
        let answer = lines.collect::<Vec<_>>().join("\n").trim().to_string();
        if question.is_empty() || answer.is_empty() {
            return Err(format!("record {} has an empty question or answer", i + 1));
        }
        pool.push(Exemplar { question, answer });
    }
    Ok(pool)
}

/// Sample `k` distinct exemplars without replacement. Order is fixed by the
/// seeded RNG: the same (pool, k, seed) always returns the same list.
pub fn sample_exemplars(
    pool: &[Exemplar],
    k: usize,
    seed: u64,
) -> Result<Vec<Exemplar>, PromptError> {
    if k > pool.len() {
        return Err(PromptError::PoolTooSmall {
            need: k,
            have: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    // Partial Fisher-Yates: the first k slots are a uniform sample.
    for i in 0..k {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    Ok(indices[..k].iter().map(|&i| pool[i].clone()).collect())
}

/// Assemble the prompt for one test. The target prompt never appears among
/// the sampled exemplars.
pub fn build_prompt(
    test: &TestCase,
    style: PromptStyle,
    k: usize,
    seed: u64,
    pool: &[Exemplar],
) -> Result<PromptAssembly, PromptError> {
    let target = test.prompt.trim();
    let eligible: Vec<Exemplar> = pool
        .iter()
        .filter(|e| e.question.trim() != target)
        .cloned()
        .collect();
    let exemplars = sample_exemplars(&eligible, k, seed)?;

    let mut text = String::new();
    match style {
        PromptStyle::QA => {
            for ex in &exemplars {
                text.push_str(&format!("Q: {}\nA: {}\n\n", ex.question, ex.answer));
            }
            text.push_str(&format!("Q: {target}\nA:"));
        }
        PromptStyle::Imperative => {
            for ex in &exemplars {
                text.push_str(&format!("{}\n{}\n\n", ex.question, ex.answer));
            }
            text.push_str(target);
        }
    }

    Ok(PromptAssembly {
        style,
        shots: k,
        seed,
        exemplars,
        final_text: text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::suite::{Category, ContainerOverrides, ExecMode, Suite, VerificationSpec};

    fn pool_of(n: usize) -> Vec<Exemplar> {
        (0..n)
            .map(|i| Exemplar {
                question: format!("What is command number {i}?"),
                answer: format!("cmd{i}"),
            })
            .collect()
    }

    fn dat_test() -> TestCase {
        TestCase {
            id: "bash1/test001".into(),
            name: "dat sort".into(),
            prompt: "What is the bash command to list the *.dat files in the current directory in ascending order by size?".into(),
            reference_solution: "ls -Sr *.dat\n".into(),
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
    fn zero_shot_yields_empty_sample() {
        assert!(sample_exemplars(&pool_of(100), 0, 7).unwrap().is_empty());
    }

    #[test]
    fn exhaustive_sample_is_a_permutation() {
        let pool = pool_of(10);
        let sample = sample_exemplars(&pool, 10, 3).unwrap();
        assert_eq!(sample.len(), 10);
        for ex in &pool {
            assert!(sample.contains(ex));
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let pool = pool_of(100);
        let a = sample_exemplars(&pool, 5, 42).unwrap();
        let b = sample_exemplars(&pool, 5, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_exemplars(&pool, 5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_request_reports_pool_too_small() {
        match sample_exemplars(&pool_of(3), 5, 0) {
            Err(PromptError::PoolTooSmall { need: 5, have: 3 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn zero_shot_qa_prompt_is_bare_question_with_cue() {
        let assembled = build_prompt(&dat_test(), PromptStyle::QA, 0, 0, &pool_of(10)).unwrap();
        assert_eq!(
            assembled.final_text,
            "Q: What is the bash command to list the *.dat files in the current directory in ascending order by size?\nA:"
        );
    }

    #[test]
    fn qa_prompt_q_marker_count_equals_shots_plus_one() {
        let assembled = build_prompt(&dat_test(), PromptStyle::QA, 2, 9, &pool_of(10)).unwrap();
        assert_eq!(assembled.final_text.matches("Q: ").count(), 3);
        assert_eq!(assembled.exemplars.len(), 2);
        assert!(assembled.final_text.ends_with("A:"));
    }

    #[test]
    fn target_prompt_never_leaks_into_exemplars() {
        let test = dat_test();
        let mut pool = pool_of(6);
        pool.push(Exemplar {
            question: test.prompt.clone(),
            answer: "ls -Sr *.dat".into(),
        });
        for seed in 0..50 {
            let assembled = build_prompt(&test, PromptStyle::QA, 5, seed, &pool).unwrap();
            assert!(assembled
                .exemplars
                .iter()
                .all(|e| e.question != test.prompt));
        }
    }

    #[test]
    fn pool_file_round_trip() {
        let text = "Q: How do I print the working directory?\npwd\n---\nQ: How do I count files?\nls | wc -l\n---\nQ: Multi-line script?\na=1\necho $a\n";
        let pool = parse_pool(text).unwrap();
        assert_eq!(pool.len(), 3);
        assert_eq!(pool[1].answer, "ls | wc -l");
        assert_eq!(pool[2].answer, "a=1\necho $a");
    }

    #[test]
    fn malformed_pool_record_is_reported() {
        assert!(parse_pool("not a question\nanswer\n").is_err());
        assert!(parse_pool("Q: question with no answer\n").is_err());
    }
}
