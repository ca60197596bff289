//! JSON-lines datasets. Each benchmark's native record layout is adapted by
//! a [`FieldMapping`] instead of code, so a new source only needs a small
//! mapping file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::chunking::estimate_tokens;

use super::{BenchmarkSample, Regime, TaskType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    #[default]
    JsonLines,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("invalid field mapping: {0}")]
    Mapping(String),
}

/// Where each sample field comes from in a source record. Field names may be
/// dotted paths into nested objects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldMapping {
    #[serde(default)]
    pub id: Option<String>,
    /// Concatenated with blank lines in between; array values are joined
    /// the same way.
    pub context: Vec<String>,
    pub question: String,
    pub answer: String,
    /// Fixed regime for every record of this source.
    #[serde(default)]
    pub regime: Option<Regime>,
    /// Per-record regime field, used when `regime` is unset.
    #[serde(default)]
    pub regime_field: Option<String>,
    #[serde(default)]
    pub task_type: Option<String>,
    /// Raw task-type values (compared case-insensitively) to task types.
    /// Values not listed leave the task type empty.
    #[serde(default)]
    pub task_type_values: BTreeMap<String, TaskType>,
    /// Records whose field does not equal the given value are skipped.
    #[serde(default)]
    pub require: BTreeMap<String, String>,
}

impl FieldMapping {
    /// The layout written by [`write_jsonl`].
    pub fn native() -> Self {
        Self {
            id: Some("id".into()),
            context: vec!["context".into()],
            question: "question".into(),
            answer: "reference_answer".into(),
            regime: None,
            regime_field: Some("regime".into()),
            task_type: Some("task_type".into()),
            task_type_values: BTreeMap::new(),
            require: BTreeMap::new(),
        }
    }

    /// Loong release records: financial reports, English only, with the
    /// comparison and clustering levels tagged.
    pub fn loong() -> Self {
        let values = [
            ("comparison", TaskType::Comparison),
            ("level2", TaskType::Comparison),
            ("2", TaskType::Comparison),
            ("cluster", TaskType::Cluster),
            ("clustering", TaskType::Cluster),
            ("level3", TaskType::Cluster),
            ("3", TaskType::Cluster),
        ];
        Self {
            id: Some("id".into()),
            context: vec!["docs".into()],
            question: "question".into(),
            answer: "answer".into(),
            regime: Some(Regime::NumericalSparse),
            regime_field: None,
            task_type: Some("level".into()),
            task_type_values: values.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            require: [("language".to_string(), "en".to_string())].into_iter().collect(),
        }
    }

    /// Difficult-retrieval records: resumes in `context`.
    pub fn difficult_retrieval() -> Self {
        Self {
            id: Some("id".into()),
            context: vec!["context".into()],
            question: "question".into(),
            answer: "answer".into(),
            regime: Some(Regime::NumericalDense),
            regime_field: None,
            task_type: None,
            task_type_values: BTreeMap::new(),
            require: BTreeMap::new(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "native" => Some(Self::native()),
            "loong" => Some(Self::loong()),
            "difficult_retrieval" | "difficult-retrieval" => Some(Self::difficult_retrieval()),
            _ => None,
        }
    }

    /// A preset name or a path to a JSON mapping file.
    pub fn resolve(name_or_path: &str) -> Result<Self, DatasetError> {
        if let Some(m) = Self::preset(name_or_path) {
            return Ok(m);
        }
        let path = Path::new(name_or_path);
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.into(), source })?;
        let m: Self = serde_json::from_str(&text).map_err(|e| DatasetError::Mapping(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.context.is_empty() {
            return Err(DatasetError::Mapping("at least one context field is required".into()));
        }
        if self.regime.is_none() && self.regime_field.is_none() {
            return Err(DatasetError::Mapping("set either `regime` or `regime_field`".into()));
        }
        Ok(())
    }
}

fn lookup<'a>(record: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(record, |v, key| v.get(key)).filter(|v| !v.is_null())
}

fn as_text(v: &Value, joiner: &str) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Array(items) => {
            let parts: Option<Vec<String>> = items.iter().map(|i| as_text(i, joiner)).collect();
            parts.map(|p| p.join(joiner))
        }
        Value::Null | Value::Object(_) => None,
    }
}

fn parse_regime(raw: &str) -> Option<Regime> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "numerical_dense" | "numericaldense" | "dense" => Some(Regime::NumericalDense),
        "numerical_sparse" | "numericalsparse" | "sparse" => Some(Regime::NumericalSparse),
        _ => None,
    }
}

fn parse_task_type(raw: &str, values: &BTreeMap<String, TaskType>) -> Option<TaskType> {
    let key = raw.trim().to_ascii_lowercase();
    if let Some(t) = values.iter().find(|(k, _)| k.to_ascii_lowercase() == key).map(|(_, t)| *t) {
        return Some(t);
    }
    match key.as_str() {
        "comparison" => Some(TaskType::Comparison),
        "cluster" => Some(TaskType::Cluster),
        _ => None,
    }
}

/// Parses one record. `Ok(None)` means the record was filtered out by
/// `require`.
fn read_record(record: &Value, mapping: &FieldMapping, line: usize, stem: &str) -> Result<Option<BenchmarkSample>, String> {
    if !record.is_object() {
        return Err("record is not a JSON object".into());
    }
    for (field, want) in &mapping.require {
        let got = lookup(record, field).and_then(|v| as_text(v, ","));
        if got.as_deref().map(str::trim) != Some(want.as_str()) {
            return Ok(None);
        }
    }
    let required = |field: &str, joiner: &str| -> Result<String, String> {
        let v = lookup(record, field).ok_or_else(|| format!("missing field `{field}`"))?;
        as_text(v, joiner).ok_or_else(|| format!("field `{field}` is not text"))
    };
    let context = mapping
        .context
        .iter()
        .map(|f| required(f, "\n\n"))
        .collect::<Result<Vec<_>, _>>()?
        .join("\n\n");
    let question = required(&mapping.question, " ")?;
    if question.trim().is_empty() {
        return Err(format!("field `{}` is empty", mapping.question));
    }
    let answer = required(&mapping.answer, ", ")?;
    if answer.trim().is_empty() {
        return Err(format!("field `{}` is empty", mapping.answer));
    }
    let regime = match (mapping.regime, &mapping.regime_field) {
        (Some(r), _) => r,
        (None, Some(f)) => {
            let raw = required(f, "")?;
            parse_regime(&raw).ok_or_else(|| format!("unknown regime `{raw}`"))?
        }
        (None, None) => return Err("mapping gives no regime".into()),
    };
    let task_type = match &mapping.task_type {
        Some(f) => lookup(record, f).and_then(|v| as_text(v, "")).and_then(|raw| parse_task_type(&raw, &mapping.task_type_values)),
        None => None,
    };
    let id = match &mapping.id {
        Some(f) => lookup(record, f).and_then(|v| as_text(v, "-")),
        None => None,
    }
    .unwrap_or_else(|| format!("{stem}-{line}"));
    Ok(Some(BenchmarkSample {
        id,
        context_tokens: estimate_tokens(&context),
        context,
        question,
        reference_answer: answer,
        regime,
        task_type,
    }))
}

pub fn load_dataset(path: &Path, format: DatasetFormat, mapping: &FieldMapping) -> Result<Vec<BenchmarkSample>, DatasetError> {
    let DatasetFormat::JsonLines = format;
    mapping.validate()?;
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.into(), source })?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
    parse_jsonl(&text, mapping, stem)
}

/// [`load_dataset`] over in-memory text.
pub fn parse_jsonl(text: &str, mapping: &FieldMapping, stem: &str) -> Result<Vec<BenchmarkSample>, DatasetError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: Value =
            serde_json::from_str(raw).map_err(|e| DatasetError::Format { line, message: format!("invalid JSON: {e}") })?;
        if let Some(s) = read_record(&record, mapping, line, stem).map_err(|message| DatasetError::Format { line, message })? {
            out.push(s);
        }
    }
    Ok(out)
}

/// One compact JSON object per line, in the native layout.
pub fn write_jsonl(samples: &[BenchmarkSample], mut out: impl Write) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn native_round_trip() {
        let s = BenchmarkSample {
            id: "a".into(),
            context: "Hallie Turner is a 21 years old student.\n".into(),
            question: "Which student is the oldest?".into(),
            reference_answer: "Hallie Turner".into(),
            regime: Regime::NumericalDense,
            task_type: None,
            context_tokens: estimate_tokens("Hallie Turner is a 21 years old student.\n"),
        };
        let mut buf = Vec::new();
        write_jsonl(std::slice::from_ref(&s), &mut buf).unwrap();
        let back = parse_jsonl(std::str::from_utf8(&buf).unwrap(), &FieldMapping::native(), "x").unwrap();
        assert_eq!(back, vec![s]);
    }

    #[test]
    fn missing_answer_reports_line() {
        let text = "{\"context\":\"c\",\"question\":\"q\",\"answer\":\"a\"}\n\n{\"context\":\"c\",\"question\":\"q\"}\n";
        match parse_jsonl(text, &FieldMapping::difficult_retrieval(), "dr") {
            Err(DatasetError::Format { line: 3, message }) => assert!(message.contains("answer"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_json_reports_line() {
        let text = "{\"context\":\"c\",\"question\":\"q\",\"answer\":\"a\"}\nnot json\n";
        assert!(matches!(
            parse_jsonl(text, &FieldMapping::difficult_retrieval(), "dr"),
            Err(DatasetError::Format { line: 2, .. })
        ));
    }

    #[test]
    fn loong_layout() {
        let text = concat!(
            "{\"id\":\"l1\",\"language\":\"en\",\"level\":\"comparison\",\"docs\":[\"r1\",\"r2\"],\"question\":\"q\",\"answer\":[\"A\",\"B\"]}\n",
            "{\"id\":\"l2\",\"language\":\"zh\",\"level\":\"comparison\",\"docs\":\"r\",\"question\":\"q\",\"answer\":\"A\"}\n",
            "{\"id\":\"l3\",\"language\":\"en\",\"level\":\"Clustering\",\"docs\":\"r\",\"question\":\"q\",\"answer\":12.5}\n",
        );
        let s = parse_jsonl(text, &FieldMapping::loong(), "loong").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].context, "r1\n\nr2");
        assert_eq!(s[0].reference_answer, "A, B");
        assert_eq!(s[0].task_type, Some(TaskType::Comparison));
        assert_eq!(s[1].task_type, Some(TaskType::Cluster));
        assert_eq!(s[1].reference_answer, "12.5");
        assert!(s.iter().all(|x| x.regime == Regime::NumericalSparse));
    }

    #[test]
    fn ids_default_to_line_numbers() {
        let mut m = FieldMapping::difficult_retrieval();
        m.id = None;
        let s = parse_jsonl("{\"context\":\"c\",\"question\":\"q\",\"answer\":\"a\"}\n", &m, "dr").unwrap();
        assert_eq!(s[0].id, "dr-1");
    }

    #[test]
    fn nested_paths_and_mapping_files() {
        let m: FieldMapping = serde_json::from_str(
            r#"{"context":["input.doc"],"question":"input.q","answer":"output","regime":"numerical_dense"}"#,
        )
        .unwrap();
        let s = parse_jsonl("{\"input\":{\"doc\":\"d\",\"q\":\"q\"},\"output\":7}\n", &m, "n").unwrap();
        assert_eq!((s[0].context.as_str(), s[0].reference_answer.as_str()), ("d", "7"));
        assert!(FieldMapping::resolve("native").is_ok());
        assert!(matches!(FieldMapping::resolve("/nonexistent/mapping.json"), Err(DatasetError::Io { .. })));
    }
}
