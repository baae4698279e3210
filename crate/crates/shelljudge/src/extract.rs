//! Extraction of the first code occurrence/block from raw model output.
//!
//! Model completions arrive in heterogeneous shapes: fenced markdown blocks,
//! inline backtick spans, `$ `-prefixed transcript lines, bare code, prose
//! explanations, several alternative snippets, or hallucinated follow-on Q/A
//! pairs. Only the first snippet is kept; everything after it is discarded.
//!
//! Candidate precedence, most- to least-structured:
//! 1. first triple-backtick fenced block (language tag ignored)
//! 2. first inline single-backtick span with at least 2 non-space chars
//! 3. first line starting with `$ ` or `PS> ` (prefix stripped)
//! 4. first non-prose line (whole output taken verbatim when every line is code)
//!
//! For single-line suites, multi-line snippets fall through to the next
//! candidate and trailing `#` comments are stripped.

use serde::{Deserialize, Serialize};

use crate::suite::Suite;

/// How the executable snippet was located inside the raw output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionMethod {
    FencedBlock,
    InlineBacktick,
    PromptPrefixLine,
    HeuristicFirstLine,
    Verbatim,
}

/// Raw model text plus the extracted snippet and extraction metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateCode {
    pub raw: String,
    pub code: String,
    pub method: ExtractionMethod,
    /// True when later snippets were found and discarded.
    pub truncated: bool,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("no code found in model output")]
    NoCodeFound,
}

/// Prose classifier: a line is prose if it is blank, or ends in `.`, `:` or
/// `?` with at least 4 words and no shell metacharacter. Ambiguous lines are
/// treated as code; execution exposes garbage.
pub fn is_prose(line: &str) -> bool {
    let t = line.trim();
    if t.is_empty() {
        return true;
    }
    if !(t.ends_with('.') || t.ends_with(':') || t.ends_with('?')) {
        return false;
    }
    if t.split_whitespace().count() < 4 {
        return false;
    }
    !t.contains(['|', '>', '<', '$', '`', ';'])
}

/// Strip an unquoted trailing `#` comment from a single-line command.
fn strip_trailing_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    let mut quote: Option<u8> = None;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match quote {
            Some(q) => {
                if c == q {
                    quote = None;
                } else if q == b'"' && c == b'\\' {
                    i += 1; // skip escaped char inside double quotes
                }
            }
            None => match c {
                b'\'' | b'"' => quote = Some(c),
                b'\\' => i += 1,
                b'#' if i == 0 || bytes[i - 1].is_ascii_whitespace() => {
                    return line[..i].trim_end();
                }
                _ => {}
            },
        }
        i += 1;
    }
    line.trim_end()
}

#[derive(Debug)]
struct Candidate {
    text: String,
    method: ExtractionMethod,
}

/// Lines of `raw` annotated with whether they sit inside a fenced block
/// (fence delimiter lines count as inside).
fn fence_map(raw: &str) -> Vec<(bool, &str)> {
    let mut out = Vec::new();
    let mut in_fence = false;
    for line in raw.lines() {
        let fence_delim = line.trim_start().starts_with("```");
        if fence_delim {
            out.push((true, line));
            in_fence = !in_fence;
        } else {
            out.push((in_fence, line));
        }
    }
    out
}

fn fenced_blocks(raw: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in raw.lines() {
        if line.trim_start().starts_with("```") {
            match current.take() {
                Some(body) => blocks.push(body.join("\n")),
                None => current = Some(Vec::new()),
            }
            continue;
        }
        if let Some(body) = current.as_mut() {
            body.push(line);
        }
    }
    // An unclosed fence still yields its content.
    if let Some(body) = current {
        blocks.push(body.join("\n"));
    }
    blocks
}

fn inline_spans(lines: &[(bool, &str)]) -> Vec<String> {
    let mut spans = Vec::new();
    for (in_fence, line) in lines {
        if *in_fence {
            continue;
        }
        let mut rest = *line;
        while let Some(open) = rest.find('`') {
            let after = &rest[open + 1..];
            match after.find('`') {
                Some(close) => {
                    let span = &after[..close];
                    if span.chars().filter(|c| !c.is_whitespace()).count() >= 2 {
                        spans.push(span.trim().to_string());
                    }
                    rest = &after[close + 1..];
                }
                None => break,
            }
        }
    }
    spans
}

fn prompt_prefix_lines(lines: &[(bool, &str)]) -> Vec<String> {
    let mut out = Vec::new();
    for (in_fence, line) in lines {
        if *in_fence {
            continue;
        }
        let t = line.trim_start();
        if let Some(rest) = t.strip_prefix("$ ").or_else(|| t.strip_prefix("PS> ")) {
            if !rest.trim().is_empty() {
                out.push(rest.trim().to_string());
            }
        }
    }
    out
}

fn non_prose_lines(lines: &[(bool, &str)]) -> Vec<String> {
    lines
        .iter()
        .filter(|(in_fence, line)| {
            let t = line.trim_start();
            !in_fence && !is_prose(line) && !t.starts_with("$ ") && !t.starts_with("PS> ")
        })
        .map(|(_, line)| line.trim().to_string())
        .collect()
}

/// Normalize one candidate for the target suite. `None` means the candidate
/// is unusable (empty, or multi-line where a single line is required).
fn finalize(text: &str, suite: Suite) -> Option<String> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return None;
    }
    if suite.single_line() {
        if trimmed.lines().count() > 1 {
            return None;
        }
        let stripped = strip_trailing_comment(trimmed);
        if stripped.is_empty() {
            return None;
        }
        Some(stripped.to_string())
    } else {
        Some(trimmed.to_string())
    }
}

/// Extract the first code snippet from `raw`. Deterministic: the same
/// `(raw, suite)` always yields the same result.
pub fn extract_code(raw: &str, suite: Suite) -> Result<CandidateCode, ExtractError> {
    let lines = fence_map(raw);

    let mut candidates: Vec<Candidate> = Vec::new();
    for block in fenced_blocks(raw) {
        candidates.push(Candidate {
            text: block,
            method: ExtractionMethod::FencedBlock,
        });
    }
    for span in inline_spans(&lines) {
        candidates.push(Candidate {
            text: span,
            method: ExtractionMethod::InlineBacktick,
        });
    }
    for line in prompt_prefix_lines(&lines) {
        candidates.push(Candidate {
            text: line,
            method: ExtractionMethod::PromptPrefixLine,
        });
    }

    if candidates.is_empty() {
        // No structure markers at all. If every line reads as code, the whole
        // output is the snippet; otherwise fall back to line-by-line triage.
        let all_code =
            !raw.trim().is_empty() && raw.lines().all(|l| !is_prose(l) || l.trim().is_empty());
        let code_lines = non_prose_lines(&lines);
        if all_code && !code_lines.is_empty() {
            if let Some(code) = finalize(raw, suite) {
                return Ok(CandidateCode {
                    raw: raw.to_string(),
                    code,
                    method: ExtractionMethod::Verbatim,
                    truncated: false,
                });
            }
        }
        for line in code_lines {
            candidates.push(Candidate {
                text: line,
                method: ExtractionMethod::HeuristicFirstLine,
            });
        }
    }

    let total = candidates.len();
    for (idx, cand) in candidates.iter().enumerate() {
        if let Some(code) = finalize(&cand.text, suite) {
            return Ok(CandidateCode {
                raw: raw.to_string(),
                code,
                method: cand.method,
                truncated: idx + 1 < total,
            });
        }
    }
    Err(ExtractError::NoCodeFound)
}
