//! The string-celled table passed between extraction, the sandbox and the
//! conclusion step.

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parsers::QuestionSchema;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TableError {
    #[error("table header is empty")]
    EmptyHeader,
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("primary key index {index} out of range for {columns} columns")]
    PrimaryKeyOutOfRange { index: usize, columns: usize },
    #[error("row has {got} cells, header has {expected}")]
    Arity { expected: usize, got: usize },
    #[error("header mismatch: expected {expected:?}, got {got:?}")]
    HeaderMismatch { expected: Vec<String>, got: Vec<String> },
    #[error("preview size must be at least 1")]
    EmptyPreview,
}

/// Ordered header plus rows of string cells. Every row has the header's
/// arity; cells are never typed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct DataTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    primary_key_index: usize,
}

#[derive(Deserialize)]
struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    primary_key_index: usize,
}

impl TryFrom<RawTable> for DataTable {
    type Error = TableError;

    fn try_from(raw: RawTable) -> Result<Self, Self::Error> {
        let mut table = DataTable::new(raw.header, raw.primary_key_index)?;
        for row in raw.rows {
            table.push_row(row)?;
        }
        Ok(table)
    }
}

pub(crate) fn column_key(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl DataTable {
    pub fn new(header: Vec<String>, primary_key_index: usize) -> Result<Self, TableError> {
        if header.is_empty() {
            return Err(TableError::EmptyHeader);
        }
        let mut seen = std::collections::HashSet::new();
        for name in &header {
            if name.trim().is_empty() || !seen.insert(column_key(name)) {
                return Err(TableError::DuplicateColumn(name.clone()));
            }
        }
        if primary_key_index >= header.len() {
            return Err(TableError::PrimaryKeyOutOfRange {
                index: primary_key_index,
                columns: header.len(),
            });
        }
        Ok(Self { header, rows: Vec::new(), primary_key_index })
    }

    pub fn for_schema(schema: &QuestionSchema) -> Self {
        Self {
            header: schema.header.clone(),
            rows: Vec::new(),
            primary_key_index: schema.primary_key_index(),
        }
    }

    pub fn with_rows(mut self, rows: Vec<Vec<String>>) -> Result<Self, TableError> {
        for row in rows {
            self.push_row(row)?;
        }
        Ok(self)
    }

    pub fn push_row(&mut self, row: Vec<String>) -> Result<(), TableError> {
        if row.len() != self.header.len() {
            return Err(TableError::Arity { expected: self.header.len(), got: row.len() });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn primary_key_index(&self) -> usize {
        self.primary_key_index
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        let key = column_key(name);
        self.header.iter().position(|h| column_key(h) == key)
    }

    pub fn column(&self, index: usize) -> impl Iterator<Item = &str> {
        self.rows.iter().map(move |r| r[index].as_str())
    }

    fn head(&self, n: usize) -> DataTable {
        DataTable {
            header: self.header.clone(),
            rows: self.rows.iter().take(n).cloned().collect(),
            primary_key_index: self.primary_key_index,
        }
    }
}

const CURRENCY: &[char] = &['$', '€', '£', '¥', '₹', '₩', '₽'];

static PLAIN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d+(?:\.\d+)?$").unwrap());
static COMMA_GROUPS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\d{1,3}(?:,\d{3})+(?:\.\d+)?$").unwrap());
static SPACE_GROUPS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\d{1,3}(?:[ \u{a0}\u{202f}]\d{3})+(?:[.,]\d+)?$").unwrap());
static DOT_GROUPS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\d{1,3}(?:\.\d{3})+,\d+$").unwrap());
static DECIMAL_COMMA: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d+,\d+$").unwrap());

/// Canonical form of a numeric-looking cell: no grouping separators, a period
/// as decimal point, no currency symbol, no `+`. Anything that does not look
/// like a number comes back untouched.
pub fn normalize_number(cell: &str) -> String {
    normalize_numeric(cell).unwrap_or_else(|| cell.to_string())
}

/// Like [`normalize_number`] but `None` for non-numeric input.
pub fn normalize_numeric(cell: &str) -> Option<String> {
    let mut rest = cell.trim();
    let mut negative = false;
    let mut signed = false;
    let take_sign = |s: &str, negative: &mut bool, signed: &mut bool| -> Option<usize> {
        match s.chars().next() {
            Some('-') | Some('−') => {
                *negative = true;
                *signed = true;
                Some(s.chars().next().unwrap().len_utf8())
            }
            Some('+') => {
                *signed = true;
                Some(1)
            }
            _ => None,
        }
    };
    if let Some(n) = take_sign(rest, &mut negative, &mut signed) {
        rest = rest[n..].trim_start();
    }
    rest = rest.trim_start_matches(CURRENCY).trim_start();
    if !signed {
        if let Some(n) = take_sign(rest, &mut negative, &mut signed) {
            rest = rest[n..].trim_start();
        }
    }
    rest = rest.trim_end_matches(CURRENCY).trim_end();

    let body = if PLAIN.is_match(rest) {
        rest.to_string()
    } else if COMMA_GROUPS.is_match(rest) {
        rest.replace(',', "")
    } else if SPACE_GROUPS.is_match(rest) {
        rest.chars()
            .filter(|c| !matches!(c, ' ' | '\u{a0}' | '\u{202f}'))
            .map(|c| if c == ',' { '.' } else { c })
            .collect()
    } else if DOT_GROUPS.is_match(rest) {
        rest.replace('.', "").replace(',', ".")
    } else if DECIMAL_COMMA.is_match(rest) {
        rest.replace(',', ".")
    } else {
        return None;
    };
    Some(if negative { format!("-{body}") } else { body })
}

/// Canonical spelling of a cell's numeric value, so that `1,234.50` and
/// `1234.5` compare equal. `None` for non-numeric cells.
pub fn numeric_value_key(cell: &str) -> Option<String> {
    let n = normalize_numeric(cell)?;
    let (negative, body) = match n.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, n.as_str()),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    let int = match int.trim_start_matches('0') {
        "" => "0",
        i => i,
    };
    let frac = frac.trim_end_matches('0');
    let value = if frac.is_empty() { int.to_string() } else { format!("{int}.{frac}") };
    Some(if negative && value != "0" { format!("-{value}") } else { value })
}

/// Deduplication key: trimmed, whitespace-collapsed, case-folded,
/// number-normalized.
pub fn normalize_key(cell: &str) -> String {
    let collapsed = cell.split_whitespace().collect::<Vec<_>>().join(" ");
    normalize_number(&collapsed).to_lowercase()
}

/// A primary key seen more than once with differing cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyConflict {
    pub key: String,
    pub kept: Vec<String>,
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeOutcome {
    pub table: DataTable,
    pub rows_in: usize,
    pub duplicates_dropped: usize,
    pub conflicts: Vec<KeyConflict>,
}

/// Concatenates per-chunk tables and removes duplicate primary keys, keeping
/// the first occurrence.
pub fn concat_dedup(tables: &[DataTable], schema: &QuestionSchema) -> Result<DataTable, TableError> {
    merge_tables(tables, schema).map(|m| m.table)
}

/// [`concat_dedup`] with bookkeeping about what was dropped.
pub fn merge_tables(tables: &[DataTable], schema: &QuestionSchema) -> Result<MergeOutcome, TableError> {
    let mut merged = DataTable::for_schema(schema);
    let pk = merged.primary_key_index;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut rows_in = 0;
    let mut duplicates_dropped = 0;
    let mut conflicts = Vec::new();

    for table in tables {
        if table.header != merged.header {
            return Err(TableError::HeaderMismatch {
                expected: merged.header.clone(),
                got: table.header.clone(),
            });
        }
        for row in &table.rows {
            rows_in += 1;
            let row: Vec<String> = row.iter().map(|c| normalize_number(c)).collect();
            let key = normalize_key(&row[pk]);
            match seen.get(&key) {
                Some(&at) => {
                    duplicates_dropped += 1;
                    let kept = &merged.rows[at];
                    let differs = kept
                        .iter()
                        .zip(&row)
                        .enumerate()
                        .any(|(i, (a, b))| i != pk && a != b);
                    if differs {
                        conflicts.push(KeyConflict { key, kept: kept.clone(), dropped: row });
                    }
                }
                None => {
                    seen.insert(key, merged.rows.len());
                    merged.rows.push(row);
                }
            }
        }
    }
    Ok(MergeOutcome { table: merged, rows_in, duplicates_dropped, conflicts })
}

pub(crate) fn escape_cell(cell: &str) -> String {
    let mut out = String::with_capacity(cell.len());
    for c in cell.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '|' => out.push_str("\\|"),
            '\n' | '\r' => out.push(' '),
            c => out.push(c),
        }
    }
    out
}

/// Markdown pipe table with a 1-based `index` column in front, in the layout
/// the extraction prompt asks for.
pub fn render_table(table: &DataTable) -> String {
    let mut out = String::from("| index |");
    for h in &table.header {
        out.push(' ');
        out.push_str(&escape_cell(h));
        out.push_str(" |");
    }
    out.push('\n');
    out.push('|');
    for _ in 0..=table.header.len() {
        out.push_str("--|");
    }
    for (i, row) in table.rows.iter().enumerate() {
        out.push('\n');
        out.push_str(&format!("| {} |", i + 1));
        for cell in row {
            out.push(' ');
            out.push_str(&escape_cell(cell));
            out.push_str(" |");
        }
    }
    out
}

/// The first `n` rows rendered as markdown.
pub fn head_preview(table: &DataTable, n: usize) -> Result<String, TableError> {
    if n == 0 {
        return Err(TableError::EmptyPreview);
    }
    Ok(render_table(&table.head(n)))
}

pub const DEFAULT_PREVIEW_ROWS: usize = 5;

/// Column-oriented JSON, `{column: {"0": cell, "1": cell, ...}}`, every value
/// a JSON string. This is what `pd.read_json(path, dtype=False)` loads back
/// into the same frame.
pub fn to_interchange_json(table: &DataTable) -> Vec<u8> {
    let quote = |s: &str| serde_json::to_string(s).expect("strings always serialize");
    let mut out = String::from("{");
    for (c, name) in table.header.iter().enumerate() {
        if c > 0 {
            out.push(',');
        }
        out.push_str(&quote(name));
        out.push_str(":{");
        for (r, row) in table.rows.iter().enumerate() {
            if r > 0 {
                out.push(',');
            }
            out.push_str(&format!("\"{r}\":"));
            out.push_str(&quote(&row[c]));
        }
        out.push('}');
    }
    out.push('}');
    out.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn schema(header: &[&str]) -> QuestionSchema {
        QuestionSchema::new(s(header), header[0]).unwrap()
    }

    fn table(header: &[&str], rows: &[&[&str]]) -> DataTable {
        DataTable::new(s(header), 0)
            .unwrap()
            .with_rows(rows.iter().map(|r| s(r)).collect())
            .unwrap()
    }

    #[test]
    fn normalizes_numbers() {
        assert_eq!(normalize_number("1,234.56"), "1234.56");
        assert_eq!(normalize_number("company A"), "company A");
        assert_eq!(normalize_number("200"), "200");
        assert_eq!(normalize_number(" $1,000 "), "1000");
        assert_eq!(normalize_number("1 234 567"), "1234567");
        assert_eq!(normalize_number("1.234,56"), "1234.56");
        assert_eq!(normalize_number("12,5"), "12.5");
        assert_eq!(normalize_number("-€3,000.5"), "-3000.5");
        assert_eq!(normalize_number("+7"), "7");
        assert_eq!(normalize_number("25%"), "25%");
        assert_eq!(normalize_number("1,23,456"), "1,23,456");
    }

    #[test]
    fn numeric_value_keys() {
        assert_eq!(numeric_value_key("1,234.50").as_deref(), Some("1234.5"));
        assert_eq!(numeric_value_key("1234.5").as_deref(), Some("1234.5"));
        assert_eq!(numeric_value_key("007").as_deref(), Some("7"));
        assert_eq!(numeric_value_key("-0.00").as_deref(), Some("0"));
        assert_eq!(numeric_value_key("3.0").as_deref(), Some("3"));
        assert_eq!(numeric_value_key("Sonali Jain"), None);
    }

    #[test]
    fn normalized_output_parses_as_number() {
        for input in ["1,234.56", "1.234,56", "$ 99", "12,5", "3 000,25"] {
            let out = normalize_number(input);
            assert!(out.parse::<f64>().is_ok(), "{input} -> {out}");
        }
    }

    #[test]
    fn exact_duplicates_collapse() {
        let sc = schema(&["name", "profit"]);
        let a = table(&["name", "profit"], &[&["company A", "200"]]);
        let b = table(&["name", "profit"], &[&["company A", "200"]]);
        let out = merge_tables(&[a, b], &sc).unwrap();
        assert_eq!(out.table.len(), 1);
        assert!(out.conflicts.is_empty());
    }

    #[test]
    fn first_occurrence_wins_in_both_orders() {
        let sc = schema(&["name", "profit"]);
        let a = table(&["name", "profit"], &[&["Company A", "200"]]);
        let b = table(&["name", "profit"], &[&["company a ", "500"]]);
        let ab = merge_tables(&[a.clone(), b.clone()], &sc).unwrap();
        assert_eq!(ab.table.rows(), &[s(&["Company A", "200"])]);
        assert_eq!(ab.conflicts.len(), 1);
        let ba = concat_dedup(&[b, a], &sc).unwrap();
        assert_eq!(ba.rows(), &[s(&["company a ", "500"])]);
    }

    #[test]
    fn empty_input_gives_schema_header() {
        let sc = schema(&["name", "profit"]);
        let out = concat_dedup(&[], &sc).unwrap();
        assert_eq!(out.header(), sc.header.as_slice());
        assert!(out.is_empty());
    }

    #[test]
    fn header_mismatch_rejected() {
        let sc = schema(&["name", "profit"]);
        let t = table(&["name", "revenue"], &[]);
        assert!(matches!(concat_dedup(&[t], &sc), Err(TableError::HeaderMismatch { .. })));
    }

    #[test]
    fn renders_extraction_example() {
        let t = table(&["name", "profit"], &[&["company A", "200"], &["company B", "500"]]);
        assert_eq!(
            render_table(&t),
            "| index | name | profit |\n|--|--|--|\n| 1 | company A | 200 |\n| 2 | company B | 500 |"
        );
    }

    #[test]
    fn renders_empty_table() {
        let t = table(&["name", "profit"], &[]);
        assert_eq!(render_table(&t), "| index | name | profit |\n|--|--|--|");
    }

    #[test]
    fn escapes_pipes() {
        let t = table(&["name", "note"], &[&["a|b", "c\\d"]]);
        assert_eq!(render_table(&t).lines().nth(2).unwrap(), "| 1 | a\\|b | c\\\\d |");
    }

    #[test]
    fn preview_rows() {
        let rows: Vec<Vec<String>> = (0..300).map(|i| vec![format!("s{i}"), i.to_string()]).collect();
        let big = DataTable::new(s(&["name", "age"]), 0).unwrap().with_rows(rows).unwrap();
        assert_eq!(head_preview(&big, 5).unwrap().lines().count(), 2 + 5);
        let small = table(&["name", "age"], &[&["a", "1"], &["b", "2"]]);
        assert_eq!(head_preview(&small, 5).unwrap().lines().count(), 2 + 2);
        assert_eq!(head_preview(&small, 0), Err(TableError::EmptyPreview));
    }

    #[test]
    fn interchange_json_golden() {
        let t = table(&["name", "profit"], &[&["company A", "200"]]);
        assert_eq!(
            String::from_utf8(to_interchange_json(&t)).unwrap(),
            include_str!("../tests/fixtures/interchange_one_row.json").trim_end()
        );
        let empty = table(&["name", "profit"], &[]);
        assert_eq!(to_interchange_json(&empty), br#"{"name":{},"profit":{}}"#);
        let three = table(&["k"], &[&["x"], &["y"], &["z"]]);
        assert_eq!(to_interchange_json(&three), br#"{"k":{"0":"x","1":"y","2":"z"}}"#);
    }

    #[test]
    fn construction_invariants() {
        assert_eq!(DataTable::new(vec![], 0), Err(TableError::EmptyHeader));
        assert!(matches!(DataTable::new(s(&["a", " A"]), 0), Err(TableError::DuplicateColumn(_))));
        assert!(DataTable::new(s(&["a"]), 1).is_err());
        let mut t = DataTable::new(s(&["a", "b"]), 0).unwrap();
        assert_eq!(t.push_row(s(&["x"])), Err(TableError::Arity { expected: 2, got: 1 }));
        let bad: Result<DataTable, _> =
            serde_json::from_str(r#"{"header":["a"],"rows":[["x","y"]],"primary_key_index":0}"#);
        assert!(bad.is_err());
    }

    proptest! {
        #[test]
        fn normalize_number_is_idempotent(cell in "\\PC{0,24}") {
            let once = normalize_number(&cell);
            prop_assert_eq!(normalize_number(&once), once.clone());
        }

        #[test]
        fn numeric_like_inputs_are_idempotent(cell in "[-+$ ]{0,2}[0-9]{1,3}([,. ][0-9]{3}){0,3}([.,][0-9]{1,4})?[ €]{0,2}") {
            let once = normalize_number(&cell);
            prop_assert_eq!(normalize_number(&once), once);
        }

        #[test]
        fn interchange_json_is_lossless(rows in proptest::collection::vec(("\\PC{0,12}", "\\PC{0,12}"), 0..8)) {
            let rows: Vec<Vec<String>> = rows.into_iter().map(|(a, b)| vec![a, b]).collect();
            let t = DataTable::new(s(&["name", "value"]), 0).unwrap().with_rows(rows.clone()).unwrap();
            // independent reader: generic JSON value, columns in file order
            let bytes = to_interchange_json(&t);
            let text = String::from_utf8(bytes).unwrap();
            let v: serde_json::Value = serde_json::from_str(&text).unwrap();
            let obj = v.as_object().unwrap();
            prop_assert_eq!(obj.len(), 2);
            prop_assert!(text.starts_with(r#"{"name":"#), "column order");
            for (c, name) in ["name", "value"].iter().enumerate() {
                let col = obj[*name].as_object().unwrap();
                prop_assert_eq!(col.len(), rows.len());
                for (r, row) in rows.iter().enumerate() {
                    prop_assert_eq!(col[&r.to_string()].as_str().unwrap(), row[c].as_str());
                }
            }
        }
    }
}
