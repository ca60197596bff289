//! Deterministic stand-in for every model role.
//!
//! The mock recognizes which template a prompt was rendered from, recovers
//! the bindings, and answers from rules in a scenario file:
//!
//! * `schemas`: question pattern to table header and primary key. `${group}`
//!   in a header name is replaced by that named group, title-cased.
//! * `cues`: per column (lowercase), patterns whose presence makes a chunk
//!   relevant.
//! * `records`: patterns with named groups that yield one row each; `columns`
//!   maps a column name (which may use `${group}`) to the group holding its
//!   value.
//! * `analyses`: question pattern to question kind; the named groups `k` and
//!   `threshold` supply parameters.
//! * `extract_corruption_rate`: share of extraction replies that come back
//!   malformed.
//!
//! Replies are a pure function of (scenario, seed, prompt).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, LazyLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{BackendError, BackendReply, ChatBackend, ModelConfig, Usage};
use crate::analysis::{canned_script, reference_answer, AnalysisTask, QuestionKind};
use crate::chunking::estimate_tokens;
use crate::parsers::{split_row, PromptKind, QuestionSchema, Templates};
use crate::tabular::{column_key, merge_tables, numeric_value_key, render_table, DataTable};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed scenario: {0}")]
    Format(String),
    #[error("bad pattern {pattern:?}: {message}")]
    Pattern { pattern: String, message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    extract_corruption_rate: f64,
    #[serde(default)]
    schemas: Vec<RawSchemaRule>,
    #[serde(default)]
    cues: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    records: Vec<RawRecordRule>,
    #[serde(default)]
    analyses: Vec<RawAnalysisRule>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchemaRule {
    question: String,
    header: Vec<String>,
    primary_key: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecordRule {
    pattern: String,
    columns: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnalysisRule {
    question: String,
    kind: String,
    #[serde(default)]
    key_column: Option<String>,
    #[serde(default)]
    value_column: Option<String>,
}

#[derive(Debug)]
struct SchemaRule {
    question: Regex,
    header: Vec<String>,
    primary_key: String,
}

#[derive(Debug)]
struct RecordRule {
    pattern: Regex,
    columns: Vec<(String, String)>,
}

#[derive(Debug)]
struct AnalysisRule {
    question: Regex,
    kind: String,
    key_column: Option<String>,
    value_column: Option<String>,
}

/// Compiled scenario rules.
#[derive(Debug)]
pub struct MockScenario {
    raw: RawScenario,
    schemas: Vec<SchemaRule>,
    cues: BTreeMap<String, Vec<Regex>>,
    records: Vec<RecordRule>,
    analyses: Vec<AnalysisRule>,
}

const ANALYSIS_KINDS: [&str; 8] = ["max", "min", "top_k", "kth_largest", "count_above", "sum", "average", "list_above"];

fn compile(pattern: &str) -> Result<Regex, ScenarioError> {
    Regex::new(pattern).map_err(|e| ScenarioError::Pattern { pattern: pattern.to_string(), message: e.to_string() })
}

fn title_case(s: &str) -> String {
    s.split_whitespace()
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_uppercase().chain(c.flat_map(|x| x.to_lowercase())).collect(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Replaces `${name}` with the title-cased capture.
fn expand(template: &str, caps: &Captures<'_>) -> String {
    static SLOT: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static pattern"));
    if !template.contains("${") {
        return template.to_string();
    }
    SLOT.replace_all(template, |m: &Captures<'_>| caps.name(&m[1]).map_or(String::new(), |v| title_case(v.as_str())))
        .into_owned()
}

impl MockScenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let raw: RawScenario = serde_json::from_str(text).map_err(|e| ScenarioError::Format(e.to_string()))?;
        Self::compile(raw)
    }

    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text)
    }

    /// Rules covering the bundled synthetic datasets: student resumes and
    /// company reports.
    pub fn builtin() -> Self {
        Self::from_json(include_str!("../../scenarios/oracle.json")).expect("bundled scenario is valid")
    }

    fn compile(raw: RawScenario) -> Result<Self, ScenarioError> {
        if !(0.0..=1.0).contains(&raw.extract_corruption_rate) {
            return Err(ScenarioError::Format(format!(
                "extract_corruption_rate must be within [0, 1], got {}",
                raw.extract_corruption_rate
            )));
        }
        let schemas = raw
            .schemas
            .iter()
            .map(|r| Ok(SchemaRule { question: compile(&r.question)?, header: r.header.clone(), primary_key: r.primary_key.clone() }))
            .collect::<Result<_, ScenarioError>>()?;
        let cues = raw
            .cues
            .iter()
            .map(|(col, pats)| Ok((column_key(col), pats.iter().map(|p| compile(p)).collect::<Result<_, _>>()?)))
            .collect::<Result<_, ScenarioError>>()?;
        let records = raw
            .records
            .iter()
            .map(|r| {
                Ok(RecordRule {
                    pattern: compile(&r.pattern)?,
                    columns: r.columns.iter().map(|(c, g)| (c.clone(), g.clone())).collect(),
                })
            })
            .collect::<Result<_, ScenarioError>>()?;
        let analyses = raw
            .analyses
            .iter()
            .map(|r| {
                if !ANALYSIS_KINDS.contains(&r.kind.as_str()) {
                    return Err(ScenarioError::Format(format!("unknown analysis kind {:?}", r.kind)));
                }
                Ok(AnalysisRule {
                    question: compile(&r.question)?,
                    kind: r.kind.clone(),
                    key_column: r.key_column.clone(),
                    value_column: r.value_column.clone(),
                })
            })
            .collect::<Result<_, ScenarioError>>()?;
        Ok(Self { raw, schemas, cues, records, analyses })
    }

    pub fn seed(&self) -> u64 {
        self.raw.seed
    }

    /// Digest of the rules, seed and corruption rate.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.raw).expect("scenario serializes");
        hex_digest(&json)
    }

    pub fn corruption_rate(&self) -> f64 {
        self.raw.extract_corruption_rate
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut raw = self.raw.clone();
        raw.seed = seed;
        Self::compile(raw).expect("already validated")
    }

    pub fn with_corruption_rate(&self, rate: f64) -> Result<Self, ScenarioError> {
        let mut raw = self.raw.clone();
        raw.extract_corruption_rate = rate;
        Self::compile(raw)
    }

    /// Schema the analyze step should infer for `question`.
    pub fn schema_for(&self, question: &str) -> Option<QuestionSchema> {
        self.schemas.iter().find_map(|rule| {
            let caps = rule.question.captures(question)?;
            let header = rule.header.iter().map(|h| expand(h, &caps)).collect();
            QuestionSchema::new(header, &expand(&rule.primary_key, &caps)).ok()
        })
    }

    /// Question kind and columns for `question` over a table with `header`.
    pub fn task_for(&self, question: &str, header: &[String]) -> Option<AnalysisTask> {
        let non_index: Vec<&String> = header.iter().filter(|h| column_key(h) != "index").collect();
        self.analyses.iter().find_map(|rule| {
            let caps = rule.question.captures(question)?;
            let k = caps.name("k").and_then(|m| m.as_str().parse().ok()).unwrap_or(1);
            let threshold = caps.name("threshold").map(|m| m.as_str().to_string()).unwrap_or_else(|| "0".into());
            let kind = match rule.kind.as_str() {
                "max" => QuestionKind::Max,
                "min" => QuestionKind::Min,
                "top_k" => QuestionKind::TopK { k },
                "kth_largest" => QuestionKind::KthLargest { k },
                "count_above" => QuestionKind::CountAbove { threshold },
                "sum" => QuestionKind::Sum,
                "average" => QuestionKind::Average,
                _ => QuestionKind::ListAbove { threshold },
            };
            let key_column = rule.key_column.clone().or_else(|| non_index.first().map(|s| s.to_string()))?;
            let value_column = rule.value_column.clone().or_else(|| non_index.last().map(|s| s.to_string()))?;
            Some(AnalysisTask { kind, key_column, value_column })
        })
    }

    fn is_relevant(&self, chunk: &str, column: &str) -> bool {
        self.cues.get(&column_key(column)).is_some_and(|pats| pats.iter().any(|p| p.is_match(chunk)))
    }

    /// Rows for `header` found in `text`, in order of appearance.
    pub fn scan_records(&self, text: &str, header: &[String]) -> Vec<Vec<String>> {
        let wanted: Vec<String> = header.iter().map(|h| column_key(h)).collect();
        let mut found: Vec<(usize, Vec<String>)> = Vec::new();
        for rule in &self.records {
            for caps in rule.pattern.captures_iter(text) {
                let values: BTreeMap<String, String> = rule
                    .columns
                    .iter()
                    .filter_map(|(col, group)| Some((column_key(&expand(col, &caps)), caps.name(group)?.as_str().trim().to_string())))
                    .collect();
                if let Some(row) = wanted.iter().map(|w| values.get(w).cloned()).collect::<Option<Vec<_>>>() {
                    found.push((caps.get(0).map_or(0, |m| m.start()), row));
                }
            }
        }
        found.sort_by_key(|(at, _)| *at);
        found.into_iter().map(|(_, row)| row).collect()
    }

    /// The answer a perfect reader of `context` gives, with the records it
    /// used.
    pub fn oracle_answer(&self, context: &str, question: &str) -> Option<(String, DataTable)> {
        let schema = self.schema_for(question)?;
        let table = DataTable::for_schema(&schema).with_rows(self.scan_records(context, &schema.header)).ok()?;
        let merged = merge_tables(&[table], &schema).ok()?.table;
        let task = self.task_for(question, &schema.header)?;
        Some((reference_answer(&task, &merged), merged))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Replies to rendered prompts according to a [`MockScenario`].
pub struct MockBackend {
    scenario: Arc<MockScenario>,
    templates: Templates,
}

const NO_SCHEMA_REPLY: &str = "I am not sure which data this question needs.";
const NO_CODE_REPLY: &str = "I cannot write a program for this question.";
const NO_ANSWER_REPLY: &str = "I cannot answer this question from the document.";

impl MockBackend {
    pub fn new(scenario: Arc<MockScenario>, templates: Templates) -> Self {
        Self { scenario, templates }
    }

    fn rng(&self, prompt: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.scenario.seed().to_le_bytes());
        h.update(prompt.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }

    /// The reply text for `prompt`.
    pub fn reply(&self, prompt: &str) -> Result<String, BackendError> {
        let (kind, b) = self.templates.classify(prompt).ok_or(BackendError::UnrecognizedTemplate)?;
        let get = |k: &str| b.get(k).map(String::as_str).unwrap_or("");
        let s = &*self.scenario;
        Ok(match kind {
            PromptKind::AnalyzeQuestion => match s.schema_for(get("question")) {
                Some(schema) => format!(
                    "``` header:\n{}\n```\n```primary key\n{}\n```",
                    schema.header_row(),
                    schema.primary_key
                ),
                None => NO_SCHEMA_REPLY.to_string(),
            },
            PromptKind::RelevanceFilter => {
                let columns: Vec<&str> = get("headers_list").split(" or ").map(str::trim).collect();
                match columns.iter().find(|c| s.is_relevant(get("doc_chunk"), c)) {
                    Some(c) => format!("Yes, there is information about the {c}."),
                    None => format!("No, there is no information about the {}.", columns.join(" or the ")),
                }
            }
            PromptKind::ExtractData => {
                let header: Vec<String> =
                    split_row(get("table_header")).into_iter().filter(|c| !c.is_empty()).collect();
                let rows = s.scan_records(get("doc_chunk"), &header);
                let mut rng = self.rng(prompt);
                let corrupt = rng.gen::<f64>() < s.corruption_rate();
                if rows.is_empty() {
                    "```table\nno data\n```".to_string()
                } else {
                    let table = DataTable::new(header, 0)
                        .and_then(|t| t.with_rows(rows))
                        .map_err(|e| BackendError::Fatal(e.to_string()))?;
                    let rendered = render_table(&table);
                    if corrupt {
                        corrupt_table(&rendered, &mut rng)
                    } else {
                        format!("```table\n{rendered}\n```")
                    }
                }
            }
            PromptKind::ProcessDataByCode => {
                let header_line = get("df_show").lines().find(|l| l.contains('|')).unwrap_or("");
                let header: Vec<String> = split_row(header_line).into_iter().filter(|c| !c.is_empty()).collect();
                match s.task_for(get("question"), &header) {
                    Some(task) => format!("```python\n{}```", canned_script(&task)),
                    None => NO_CODE_REPLY.to_string(),
                }
            }
            PromptKind::Conclude => format!("The final answer is: {}", get("answer").trim()),
            PromptKind::Judge => {
                if answer_contains(get("candidate"), get("reference")) {
                    "correct".to_string()
                } else {
                    "incorrect".to_string()
                }
            }
            PromptKind::BaselineNormal => match s.oracle_answer(get("context"), get("question")) {
                Some((answer, _)) => answer,
                None => NO_ANSWER_REPLY.to_string(),
            },
            PromptKind::BaselineCot => match s.oracle_answer(get("context"), get("question")) {
                Some((answer, table)) => {
                    let mut out = String::new();
                    for (i, row) in table.rows().iter().enumerate() {
                        let fields: Vec<String> =
                            table.header().iter().zip(row).map(|(h, v)| format!("{h} = {v}")).collect();
                        out.push_str(&format!("Item {}: {}.\n", i + 1, fields.join(", ")));
                    }
                    out.push_str(&format!("Final answer: {answer}"));
                    out
                }
                None => NO_ANSWER_REPLY.to_string(),
            },
        })
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, _config: &ModelConfig, prompt: &str) -> Result<BackendReply, BackendError> {
        let text = self.reply(prompt)?;
        let usage = Usage { input_tokens: estimate_tokens(prompt) as u64, output_tokens: estimate_tokens(&text) as u64 };
        Ok(BackendReply { text, usage: Some(usage), hit_length_limit: false })
    }
}

/// Damages a rendered table the way small models do. The delimiter row is
/// always broken; a second defect may follow: header case drift, a missing
/// fence, or a renamed column (which only a retry can fix).
pub fn corrupt_table(rendered: &str, rng: &mut impl Rng) -> String {
    let mut lines: Vec<String> = rendered.lines().map(str::to_string).collect();
    if lines.len() >= 2 {
        match rng.gen_range(0..3) {
            0 => {
                lines.remove(1);
            }
            1 => lines[1] = "|--|--".to_string(),
            _ => lines[1] = "|-- --|".to_string(),
        }
    }
    let mut fenced = true;
    match rng.gen_range(0..4) {
        1 => lines[0] = lines[0].to_lowercase(),
        2 => fenced = false,
        3 => {
            let cells = split_row(&lines[0]);
            if let Some(last) = cells.last() {
                let renamed = format!("{last} value");
                let mut cells = cells.clone();
                *cells.last_mut().unwrap() = renamed;
                lines[0] = format!("| {} |", cells.join(" | "));
            }
        }
        _ => {}
    }
    let body = lines.join("\n");
    if fenced {
        format!("```table\n{body}\n```")
    } else {
        format!("Here is the extracted table:\n{body}")
    }
}

pub(crate) fn answer_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| matches!(c, ',' | ';' | ':' | '.' | '!' | '?' | '"' | '\'' | '(' | ')')))
        .filter(|w| !w.is_empty())
        .map(|w| numeric_value_key(w).unwrap_or_else(|| w.to_lowercase()))
        .collect()
}

/// Whether the reference's words occur contiguously in the candidate,
/// ignoring case, punctuation and number formatting.
pub fn answer_contains(candidate: &str, reference: &str) -> bool {
    let cand = answer_tokens(candidate);
    let refs = answer_tokens(reference);
    !refs.is_empty() && cand.windows(refs.len()).any(|w| w == refs.as_slice())
}
