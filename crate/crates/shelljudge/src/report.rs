//! Execution-accuracy reporting: per-(model, suite, shots) cells and a
//! per-category breakdown, rendered as markdown, JSON or CSV.
//!
//! A non-Pass verdict of any kind (Fail, Error, Timeout) counts against the
//! cell: execution accuracy is the pass rate over all prompts, and excluding
//! harness errors would inflate it. Percentages are rounded to the nearest
//! whole percent, ties away from zero.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::orchestrator::RunRecord;
use crate::suite::{Category, Suite};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteCell {
    pub model_id: String,
    pub suite: Suite,
    pub shots: usize,
    pub pass: u32,
    pub total: u32,
    pub percent: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCell {
    pub model_id: String,
    pub shots: usize,
    pub category: Category,
    pub pass: u32,
    pub total: u32,
    pub percent: u32,
}

/// Accuracy cells for one record set, sorted deterministically.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SuiteReport {
    pub cells: Vec<SuiteCell>,
    pub category_cells: Vec<CategoryCell>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("unknown report format `{0}` (md|json|csv)")]
    UnknownFormat(String),
    #[error("report parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Markdown,
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = ReportError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" | "markdown" => Ok(Format::Markdown),
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Markdown => "md",
            Format::Json => "json",
            Format::Csv => "csv",
        })
    }
}

/// Round half away from zero to a whole percent.
pub fn percent(pass: u32, total: u32) -> u32 {
    if total == 0 {
        return 0;
    }
    ((100.0 * f64::from(pass)) / f64::from(total)).round() as u32
}

/// Aggregate records into accuracy cells. Percentages are always recomputed
/// from counts, never averaged, so aggregation is associative.
pub fn accuracy(records: &[RunRecord]) -> SuiteReport {
    let mut suite_counts: BTreeMap<(String, Suite, usize), (u32, u32)> = BTreeMap::new();
    let mut category_counts: BTreeMap<(String, usize, Category), (u32, u32)> = BTreeMap::new();
    for record in records {
        let pass = u32::from(record.verdict.passed());
        let s = suite_counts
            .entry((record.model_id.clone(), record.suite, record.shots))
            .or_insert((0, 0));
        s.0 += pass;
        s.1 += 1;
        let c = category_counts
            .entry((record.model_id.clone(), record.shots, record.category))
            .or_insert((0, 0));
        c.0 += pass;
        c.1 += 1;
    }
    SuiteReport {
        cells: suite_counts
            .into_iter()
            .map(|((model_id, suite, shots), (pass, total))| SuiteCell {
                model_id,
                suite,
                shots,
                pass,
                total,
                percent: percent(pass, total),
            })
            .collect(),
        category_cells: category_counts
            .into_iter()
            .map(
                |((model_id, shots, category), (pass, total))| CategoryCell {
                    model_id,
                    shots,
                    category,
                    pass,
                    total,
                    percent: percent(pass, total),
                },
            )
            .collect(),
    }
}

/// Merge two reports by summing counts and recomputing percentages.
/// `merge(accuracy(a), accuracy(b)) == accuracy(a ++ b)`.
pub fn merge(a: &SuiteReport, b: &SuiteReport) -> SuiteReport {
    let mut suite_counts: BTreeMap<(String, Suite, usize), (u32, u32)> = BTreeMap::new();
    for cell in a.cells.iter().chain(&b.cells) {
        let e = suite_counts
            .entry((cell.model_id.clone(), cell.suite, cell.shots))
            .or_insert((0, 0));
        e.0 += cell.pass;
        e.1 += cell.total;
    }
    let mut category_counts: BTreeMap<(String, usize, Category), (u32, u32)> = BTreeMap::new();
    for cell in a.category_cells.iter().chain(&b.category_cells) {
        let e = category_counts
            .entry((cell.model_id.clone(), cell.shots, cell.category))
            .or_insert((0, 0));
        e.0 += cell.pass;
        e.1 += cell.total;
    }
    SuiteReport {
        cells: suite_counts
            .into_iter()
            .map(|((model_id, suite, shots), (pass, total))| SuiteCell {
                model_id,
                suite,
                shots,
                pass,
                total,
                percent: percent(pass, total),
            })
            .collect(),
        category_cells: category_counts
            .into_iter()
            .map(
                |((model_id, shots, category), (pass, total))| CategoryCell {
                    model_id,
                    shots,
                    category,
                    pass,
                    total,
                    percent: percent(pass, total),
                },
            )
            .collect(),
    }
}

fn sorted_unique<T: Ord + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut v: Vec<T> = items.collect();
    v.sort();
    v.dedup();
    v
}

fn render_markdown(report: &SuiteReport) -> String {
    let mut out = String::from("# Execution accuracy\n\n");

    let models = sorted_unique(report.cells.iter().map(|c| c.model_id.clone()));
    let suites = sorted_unique(report.cells.iter().map(|c| c.suite));
    let shots = sorted_unique(report.cells.iter().map(|c| c.shots));

    if !models.is_empty() {
        // Suite group header row, then the EA-k labels, matching the
        // models x (suites x shot settings) table layout.
        out.push_str("| Model |");
        for suite in &suites {
            out.push_str(&format!(" {suite} |"));
            for _ in 1..shots.len() {
                out.push_str("  |");
            }
        }
        out.push('\n');
        out.push_str("|---|");
        for _ in 0..suites.len() * shots.len() {
            out.push_str("---|");
        }
        out.push('\n');
        out.push_str("| |");
        for _ in &suites {
            for k in &shots {
                out.push_str(&format!(" EA-{k} |"));
            }
        }
        out.push('\n');
        let lookup: BTreeMap<(&str, Suite, usize), u32> = report
            .cells
            .iter()
            .map(|c| ((c.model_id.as_str(), c.suite, c.shots), c.percent))
            .collect();
        for model in &models {
            out.push_str(&format!("| {model} |"));
            for suite in &suites {
                for k in &shots {
                    match lookup.get(&(model.as_str(), *suite, *k)) {
                        Some(pct) => out.push_str(&format!(" {pct}% |")),
                        None => out.push_str(" - |"),
                    }
                }
            }
            out.push('\n');
        }
    } else {
        out.push_str("No records.\n");
    }

    if !report.category_cells.is_empty() {
        out.push_str("\n## Category breakdown\n\n");
        let models = sorted_unique(report.category_cells.iter().map(|c| c.model_id.clone()));
        let categories = sorted_unique(report.category_cells.iter().map(|c| c.category));
        let shots = sorted_unique(report.category_cells.iter().map(|c| c.shots));
        out.push_str("| Model |");
        for k in &shots {
            out.push_str(&format!(" EA-{k} |"));
            for _ in 1..categories.len() {
                out.push_str("  |");
            }
        }
        out.push('\n');
        out.push_str("|---|");
        for _ in 0..shots.len() * categories.len() {
            out.push_str("---|");
        }
        out.push('\n');
        out.push_str("| |");
        for _ in &shots {
            for cat in &categories {
                out.push_str(&format!(" {cat} |"));
            }
        }
        out.push('\n');
        let lookup: BTreeMap<(&str, usize, Category), u32> = report
            .category_cells
            .iter()
            .map(|c| ((c.model_id.as_str(), c.shots, c.category), c.percent))
            .collect();
        for model in &models {
            out.push_str(&format!("| {model} |"));
            for k in &shots {
                for cat in &categories {
                    match lookup.get(&(model.as_str(), *k, *cat)) {
                        Some(pct) => out.push_str(&format!(" {pct}% |")),
                        None => out.push_str(" - |"),
                    }
                }
            }
            out.push('\n');
        }
    }
    out
}

fn render_csv(report: &SuiteReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "kind", "model", "suite", "shots", "category", "pass", "total", "percent",
    ])
    .expect("csv write");
    for c in &report.cells {
        w.write_record([
            "suite".to_string(),
            c.model_id.clone(),
            suite_token(c.suite).to_string(),
            c.shots.to_string(),
            String::new(),
            c.pass.to_string(),
            c.total.to_string(),
            c.percent.to_string(),
        ])
        .expect("csv write");
    }
    for c in &report.category_cells {
        w.write_record([
            "category".to_string(),
            c.model_id.clone(),
            String::new(),
            c.shots.to_string(),
            category_token(c.category).to_string(),
            c.pass.to_string(),
            c.total.to_string(),
            c.percent.to_string(),
        ])
        .expect("csv write");
    }
    String::from_utf8(w.into_inner().expect("csv flush")).expect("csv is utf-8")
}

fn suite_token(suite: Suite) -> &'static str {
    match suite {
        Suite::SingleLineBash => "single-line-bash",
        Suite::MultiLineBash => "multi-line-bash",
        Suite::PowerShell => "powershell",
    }
}

fn suite_from_token(tok: &str) -> Result<Suite, ReportError> {
    match tok {
        "single-line-bash" => Ok(Suite::SingleLineBash),
        "multi-line-bash" => Ok(Suite::MultiLineBash),
        "powershell" => Ok(Suite::PowerShell),
        other => Err(ReportError::Parse(format!("unknown suite `{other}`"))),
    }
}

fn category_token(category: Category) -> &'static str {
    match category {
        Category::SystemAdmin => "system-admin",
        Category::Math => "math",
        Category::Diagnostics => "diagnostics",
        Category::Monitoring => "monitoring",
        Category::Other => "other",
    }
}

fn category_from_token(tok: &str) -> Result<Category, ReportError> {
    match tok {
        "system-admin" => Ok(Category::SystemAdmin),
        "math" => Ok(Category::Math),
        "diagnostics" => Ok(Category::Diagnostics),
        "monitoring" => Ok(Category::Monitoring),
        "other" => Ok(Category::Other),
        other => Err(ReportError::Parse(format!("unknown category `{other}`"))),
    }
}

/// Render a report in the requested format. Markdown mirrors the
/// models x suites x EA-k table layout; JSON and CSV are lossless.
pub fn render(report: &SuiteReport, format: Format) -> String {
    match format {
        Format::Markdown => render_markdown(report),
        Format::Json => serde_json::to_string_pretty(report).expect("report is serializable"),
        Format::Csv => render_csv(report),
    }
}

pub fn parse_json(text: &str) -> Result<SuiteReport, ReportError> {
    serde_json::from_str(text).map_err(|e| ReportError::Parse(e.to_string()))
}

pub fn parse_csv(text: &str) -> Result<SuiteReport, ReportError> {
    let mut report = SuiteReport::default();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    for row in reader.records() {
        let row = row.map_err(|e| ReportError::Parse(e.to_string()))?;
        let get = |i: usize| row.get(i).unwrap_or("").to_string();
        let parse_num = |i: usize| -> Result<u32, ReportError> {
            get(i)
                .parse()
                .map_err(|e| ReportError::Parse(format!("column {i}: {e}")))
        };
        match get(0).as_str() {
            "suite" => report.cells.push(SuiteCell {
                model_id: get(1),
                suite: suite_from_token(&get(2))?,
                shots: parse_num(3)? as usize,
                pass: parse_num(5)?,
                total: parse_num(6)?,
                percent: parse_num(7)?,
            }),
            "category" => report.category_cells.push(CategoryCell {
                model_id: get(1),
                shots: parse_num(3)? as usize,
                category: category_from_token(&get(4))?,
                pass: parse_num(5)?,
                total: parse_num(6)?,
                percent: parse_num(7)?,
            }),
            other => return Err(ReportError::Parse(format!("unknown row kind `{other}`"))),
        }
    }
    Ok(report)
}
