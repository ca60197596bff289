//! Prompt templates and the parsers that turn model replies into typed values.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tabular::{column_key, DataTable};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("schema parse error: {0}")]
    Schema(String),
    #[error("table parse error: {0}")]
    Table(String),
    #[error("header mismatch: expected {expected:?}, got {got:?}")]
    HeaderMismatch { expected: Vec<String>, got: Vec<String> },
    #[error("no fenced code block in response")]
    Code,
    #[error("placeholder {{{0}}} is not bound")]
    UnboundPlaceholder(String),
    #[error("cannot read template {path}: {message}")]
    TemplateIo { path: String, message: String },
}

/// The table header inferred for a question, plus which column identifies a
/// row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSchema {
    pub header: Vec<String>,
    pub primary_key: String,
}

impl QuestionSchema {
    /// Trims names; rejects empty or duplicate columns and a key outside the
    /// header. The key is stored with the header's spelling.
    pub fn new(header: Vec<String>, primary_key: &str) -> Result<Self, ParseError> {
        let header: Vec<String> = header.into_iter().map(|h| h.trim().to_string()).collect();
        if header.is_empty() {
            return Err(ParseError::Schema("empty header".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for h in &header {
            if h.is_empty() {
                return Err(ParseError::Schema("empty column name".into()));
            }
            if !seen.insert(column_key(h)) {
                return Err(ParseError::Schema(format!("duplicate column {h:?}")));
            }
        }
        let key = column_key(primary_key.trim().trim_matches(|c| c == '"' || c == '\''));
        let primary_key = header
            .iter()
            .find(|h| column_key(h) == key)
            .cloned()
            .ok_or_else(|| ParseError::Schema(format!("primary key {primary_key:?} is not in the header")))?;
        Ok(Self { header, primary_key })
    }

    pub fn primary_key_index(&self) -> usize {
        self.header.iter().position(|h| *h == self.primary_key).unwrap_or(0)
    }

    /// `| a | b |`, as bound into the extraction prompt.
    pub fn header_row(&self) -> String {
        let mut out = String::from("|");
        for h in &self.header {
            out.push(' ');
            out.push_str(h);
            out.push_str(" |");
        }
        out
    }

    /// Lower-cased names joined by " or ", as bound into the relevance prompt.
    pub fn headers_list(&self) -> String {
        self.header.iter().map(|h| h.to_lowercase()).collect::<Vec<_>>().join(" or ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    AnalyzeQuestion,
    RelevanceFilter,
    ExtractData,
    ProcessDataByCode,
    Conclude,
    Judge,
    BaselineNormal,
    BaselineCot,
}

impl PromptKind {
    pub const ALL: [PromptKind; 8] = [
        PromptKind::AnalyzeQuestion,
        PromptKind::RelevanceFilter,
        PromptKind::ExtractData,
        PromptKind::ProcessDataByCode,
        PromptKind::Conclude,
        PromptKind::Judge,
        PromptKind::BaselineNormal,
        PromptKind::BaselineCot,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptKind::AnalyzeQuestion => "analyze_question.txt",
            PromptKind::RelevanceFilter => "relevance_filter.txt",
            PromptKind::ExtractData => "extract_data.txt",
            PromptKind::ProcessDataByCode => "process_data_by_code.txt",
            PromptKind::Conclude => "conclude.txt",
            PromptKind::Judge => "judge.txt",
            PromptKind::BaselineNormal => "baseline_normal.txt",
            PromptKind::BaselineCot => "baseline_cot.txt",
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            PromptKind::AnalyzeQuestion => include_str!("../templates/analyze_question.txt"),
            PromptKind::RelevanceFilter => include_str!("../templates/relevance_filter.txt"),
            PromptKind::ExtractData => include_str!("../templates/extract_data.txt"),
            PromptKind::ProcessDataByCode => include_str!("../templates/process_data_by_code.txt"),
            PromptKind::Conclude => include_str!("../templates/conclude.txt"),
            PromptKind::Judge => include_str!("../templates/judge.txt"),
            PromptKind::BaselineNormal => include_str!("../templates/baseline_normal.txt"),
            PromptKind::BaselineCot => include_str!("../templates/baseline_cot.txt"),
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name().trim_end_matches(".txt"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Slot(String),
}

/// A prompt body with `{name}` placeholders.
#[derive(Debug)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    body: String,
    pieces: Vec<Piece>,
    matcher: OnceLock<Regex>,
}

fn split_pieces(body: &str) -> Vec<Piece> {
    let slot = Regex::new(r"\{([a-z_]+)\}").unwrap();
    let mut pieces = Vec::new();
    let mut last = 0;
    for m in slot.captures_iter(body) {
        let whole = m.get(0).unwrap();
        if whole.start() > last {
            pieces.push(Piece::Literal(body[last..whole.start()].to_string()));
        }
        pieces.push(Piece::Slot(m[1].to_string()));
        last = whole.end();
    }
    if last < body.len() {
        pieces.push(Piece::Literal(body[last..].to_string()));
    }
    pieces
}

impl PromptTemplate {
    pub fn new(kind: PromptKind, body: impl Into<String>) -> Self {
        let body = body.into();
        let pieces = split_pieces(&body);
        Self { kind, body, pieces, matcher: OnceLock::new() }
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(n) => Some(n.as_str()),
                Piece::Literal(_) => None,
            })
            .collect();
        names.dedup();
        names
    }

    /// Substitutes every placeholder in one pass; bound values are never
    /// rescanned.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, ParseError> {
        let mut out = String::with_capacity(self.body.len());
        for piece in &self.pieces {
            match piece {
                Piece::Literal(l) => out.push_str(l),
                Piece::Slot(name) => {
                    let value = bindings
                        .iter()
                        .find(|(k, _)| k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| ParseError::UnboundPlaceholder(name.clone()))?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`render`](Self::render): recovers the bindings from a
    /// prompt this template produced.
    pub fn match_prompt(&self, prompt: &str) -> Option<HashMap<String, String>> {
        let re = self.matcher.get_or_init(|| {
            let mut pat = String::from(r"(?s)\A");
            let mut named = std::collections::HashSet::new();
            for piece in &self.pieces {
                match piece {
                    Piece::Literal(l) => pat.push_str(&regex::escape(l)),
                    Piece::Slot(n) if named.insert(n) => pat.push_str(&format!("(?P<{n}>.*?)")),
                    Piece::Slot(_) => pat.push_str("(?:.*?)"),
                }
            }
            pat.push_str(r"\z");
            Regex::new(&pat).expect("escaped template compiles")
        });
        let caps = re.captures(prompt)?;
        Some(
            re.capture_names()
                .flatten()
                .filter_map(|n| caps.name(n).map(|m| (n.to_string(), m.as_str().to_string())))
                .collect(),
        )
    }
}

/// The full template set. Bodies ship with the crate; a directory holding
/// files of the same names overrides them one by one.
#[derive(Debug, Clone)]
pub struct Templates {
    by_kind: BTreeMap<PromptKind, Arc<PromptTemplate>>,
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Templates {
    pub fn builtin() -> Self {
        let by_kind = PromptKind::ALL
            .iter()
            .map(|&k| (k, Arc::new(PromptTemplate::new(k, k.builtin_body()))))
            .collect();
        Self { by_kind }
    }

    pub fn with_overrides(dir: &Path) -> Result<Self, ParseError> {
        let mut templates = Self::builtin();
        for kind in PromptKind::ALL {
            let path = dir.join(kind.file_name());
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|e| ParseError::TemplateIo {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                templates.by_kind.insert(kind, Arc::new(PromptTemplate::new(kind, body)));
            }
        }
        Ok(templates)
    }

    pub fn get(&self, kind: PromptKind) -> &PromptTemplate {
        &self.by_kind[&kind]
    }

    pub fn render(&self, kind: PromptKind, bindings: &[(&str, &str)]) -> Result<String, ParseError> {
        self.get(kind).render(bindings)
    }

    /// Which template produced `prompt`, with its bindings. Repair and retry
    /// suffixes are stripped first.
    pub fn classify(&self, prompt: &str) -> Option<(PromptKind, HashMap<String, String>)> {
        let base = strip_retry_suffix(prompt);
        self.by_kind
            .values()
            .find_map(|t| t.match_prompt(base).map(|b| (t.kind, b)))
    }
}

pub const FORMAT_REMINDER: &str =
    "Your previous answer could not be parsed. Answer again and follow the required output format exactly.";
const SCRIPT_FAILURE_MARKER: &str = "\n\nThe previous code failed when it was executed. Error output:\n";

/// The original prompt plus a terse reminder, for the one-shot repair.
pub fn repair_prompt(original: &str) -> String {
    format!("{original}\n\n{FORMAT_REMINDER}")
}

/// The original code prompt plus the failing script's error output.
pub fn script_retry_prompt(original: &str, stderr: &str) -> String {
    let tail: String = {
        let lines: Vec<&str> = stderr.trim_end().lines().collect();
        lines[lines.len().saturating_sub(20)..].join("\n")
    };
    format!("{original}{SCRIPT_FAILURE_MARKER}{tail}\nPlease write a corrected code snippet.")
}

pub fn strip_retry_suffix(prompt: &str) -> &str {
    if let Some(base) = prompt.strip_suffix(&format!("\n\n{FORMAT_REMINDER}")) {
        return base;
    }
    match prompt.rfind(SCRIPT_FAILURE_MARKER) {
        Some(at) => &prompt[..at],
        None => prompt,
    }
}

struct Fence<'a> {
    info: String,
    lines: Vec<&'a str>,
}

fn fenced_blocks(text: &str) -> Vec<Fence<'_>> {
    let mut blocks = Vec::new();
    let mut current: Option<Fence<'_>> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("```") {
            match current.take() {
                Some(block) => blocks.push(block),
                None => {
                    current = Some(Fence { info: rest.trim().to_lowercase(), lines: Vec::new() })
                }
            }
        } else if let Some(block) = current.as_mut() {
            block.lines.push(line);
        }
    }
    if let Some(block) = current {
        blocks.push(block);
    }
    blocks
}

/// Splits a pipe row into trimmed cells. `\|` is a literal pipe and `\\` a
/// literal backslash.
pub(crate) fn split_row(line: &str) -> Vec<String> {
    let mut line = line.trim();
    line = line.strip_prefix('|').unwrap_or(line);
    let mut cells = Vec::new();
    let mut cell = String::new();
    let mut chars = line.chars().peekable();
    let mut trailing_pipe = false;
    while let Some(c) = chars.next() {
        trailing_pipe = false;
        match c {
            '\\' if matches!(chars.peek(), Some('|') | Some('\\')) => {
                cell.push(chars.next().unwrap());
            }
            '|' => {
                cells.push(cell.trim().to_string());
                cell.clear();
                trailing_pipe = true;
            }
            c => cell.push(c),
        }
    }
    if !trailing_pipe || !cell.trim().is_empty() {
        cells.push(cell.trim().to_string());
    }
    cells
}

fn is_delimiter_row(cells: &[String]) -> bool {
    cells.iter().any(|c| c.contains('-'))
        && cells.iter().all(|c| c.chars().all(|ch| matches!(ch, '-' | ':' | ' ')))
}

fn is_placeholder(cell: &str) -> bool {
    let c = cell.trim().to_lowercase();
    matches!(c.as_str(), "" | "-" | "n/a" | "unknown")
}

fn first_pipe_run<'a>(lines: &[&'a str]) -> Vec<&'a str> {
    lines
        .iter()
        .skip_while(|l| !l.contains('|'))
        .take_while(|l| l.contains('|'))
        .copied()
        .collect()
}

fn says_no_data(lines: &[&str]) -> bool {
    lines.iter().any(|l| l.trim().to_lowercase().trim_end_matches('.') == "no data")
}

/// Result of parsing an extraction reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TableResponse {
    Table(DataTable),
    NoData,
}

/// Parses the markdown table in an extraction reply against the schema.
///
/// Takes the fenced `table` block if there is one, else the first fenced block
/// holding pipe rows, else the first run of pipe rows anywhere. Delimiter rows
/// are skipped wherever they appear, so a missing or broken one is harmless.
/// The `index` column is dropped, header cells are matched to the schema
/// case-insensitively (columns may come in any order), and rows with the wrong
/// arity or an empty/placeholder cell are discarded.
pub fn parse_markdown_table(response: &str, schema: &QuestionSchema) -> Result<TableResponse, ParseError> {
    let blocks = fenced_blocks(response);
    let chosen: Vec<&str> = blocks
        .iter()
        .find(|b| b.info.starts_with("table"))
        .or_else(|| blocks.iter().find(|b| b.lines.iter().any(|l| l.contains('|'))))
        .map(|b| b.lines.clone())
        .unwrap_or_else(|| response.lines().collect());

    let rows = first_pipe_run(&chosen);
    if rows.is_empty() {
        if says_no_data(&chosen) || says_no_data(&response.lines().collect::<Vec<_>>()) {
            return Ok(TableResponse::NoData);
        }
        return Err(ParseError::Table("no markdown table in response".into()));
    }

    let mut parsed = rows.iter().map(|l| split_row(l)).filter(|cells| !is_delimiter_row(cells));
    let got_header = parsed
        .next()
        .ok_or_else(|| ParseError::Table("table has only delimiter rows".into()))?;

    let mismatch = || ParseError::HeaderMismatch {
        expected: schema.header.clone(),
        got: got_header.clone(),
    };
    let wanted: Vec<String> = schema.header.iter().map(|h| column_key(h)).collect();
    let mut mapping: Vec<Option<usize>> = Vec::with_capacity(got_header.len());
    let mut index_dropped = false;
    for cell in &got_header {
        let key = column_key(cell);
        match wanted.iter().position(|w| *w == key) {
            Some(pos) => {
                if mapping.contains(&Some(pos)) {
                    return Err(mismatch());
                }
                mapping.push(Some(pos));
            }
            None if key == "index" && !index_dropped => {
                index_dropped = true;
                mapping.push(None);
            }
            None => return Err(mismatch()),
        }
    }
    if mapping.iter().flatten().count() != wanted.len() {
        return Err(mismatch());
    }

    let mut table = DataTable::for_schema(schema);
    for cells in parsed {
        if cells.len() != mapping.len() {
            continue;
        }
        let mut row = vec![String::new(); wanted.len()];
        for (cell, slot) in cells.into_iter().zip(&mapping) {
            if let Some(pos) = slot {
                row[*pos] = cell;
            }
        }
        if row.iter().any(|c| is_placeholder(c)) {
            continue;
        }
        table.push_row(row).expect("row built with schema arity");
    }
    Ok(TableResponse::Table(table))
}

/// Reads the header row and primary key out of a schema-analysis reply.
pub fn parse_schema(response: &str) -> Result<QuestionSchema, ParseError> {
    let blocks = fenced_blocks(response);
    let header_line = blocks
        .iter()
        .find(|b| b.info.starts_with("header"))
        .and_then(|b| b.lines.iter().find(|l| l.contains('|')).copied())
        .or_else(|| {
            // unfenced "header:" followed by a pipe row
            let lines: Vec<&str> = response.lines().collect();
            lines
                .iter()
                .position(|l| l.trim().to_lowercase().starts_with("header"))
                .and_then(|i| lines[i..].iter().find(|l| l.contains('|')).copied())
        })
        .ok_or_else(|| ParseError::Schema("no header block".into()))?;

    let header: Vec<String> = split_row(header_line).into_iter().filter(|c| !c.is_empty()).collect();
    if header.is_empty() {
        return Err(ParseError::Schema("empty header row".into()));
    }

    let key = blocks
        .iter()
        .find(|b| b.info.starts_with("primary key") || b.info.starts_with("primary_key"))
        .and_then(|b| b.lines.iter().map(|l| l.trim()).find(|l| !l.is_empty()).map(str::to_string))
        .or_else(|| {
            let re = Regex::new(r#"(?i)primary key(?: is)?\s*[:=]?\s*"?([^"\n]+?)"?\.?\s*$"#).unwrap();
            response.lines().find_map(|l| re.captures(l.trim()).map(|c| c[1].trim().to_string()))
        })
        .ok_or_else(|| ParseError::Schema("no primary key block".into()))?;

    QuestionSchema::new(header, &key)
}

/// Whether a relevance reply says to keep the chunk. Only an explicit leading
/// "no" drops it.
pub fn parse_relevance(response: &str) -> bool {
    let mut words = response
        .split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase());
    let mut first = words.next();
    if first.as_deref() == Some("answer") {
        first = words.next();
    }
    first.as_deref() != Some("no")
}

/// The script inside a codegen reply: the first fenced block mentioning
/// `data.json`, else the first fenced block.
pub fn parse_code_block(response: &str) -> Result<String, ParseError> {
    let blocks = fenced_blocks(response);
    let pick = blocks
        .iter()
        .find(|b| b.lines.iter().any(|l| l.contains("data.json")))
        .or_else(|| blocks.first())
        .ok_or(ParseError::Code)?;
    let body = pick.lines.join("\n");
    if body.trim().is_empty() {
        return Err(ParseError::Code);
    }
    Ok(body + "\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

/// "incorrect" anywhere wins; no verdict word at all counts as Incorrect.
pub fn parse_judge(response: &str) -> Verdict {
    let lower = response.to_lowercase();
    if lower.contains("incorrect") {
        Verdict::Incorrect
    } else if lower.contains("correct") {
        Verdict::Correct
    } else {
        Verdict::Incorrect
    }
}
