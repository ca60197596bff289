//! The seven-stage workflow: analyze the question, segment, drop irrelevant
//! chunks, segment again, extract a table, compute over it with a generated
//! script, conclude.
//!
//! With a run directory every stage writes `NN-name.json` holding its input
//! hash, output, and model exchanges. A later run in the same directory
//! reuses each stage whose input hash still matches.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chunking::{resegment, segment, Chunk, ChunkingConfig};
use crate::gateway::{ChatExchange, CostLedger, Gateway, GatewayError, MockScenario, ModelConfig, ModelRole};
use crate::parsers::{
    parse_code_block, parse_markdown_table, parse_relevance, parse_schema, repair_prompt, script_retry_prompt,
    ParseError, PromptKind, QuestionSchema, TableResponse, Templates,
};
use crate::sandbox::{default_parallelism, resolve_answer, ExecutionResult, Sandbox, SandboxError, SandboxLimits};
use crate::tabular::{head_preview, merge_tables, DataTable, KeyConflict, DEFAULT_PREVIEW_ROWS};

/// One-shot repair switches. All on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub schema_repair: bool,
    pub table_repair: bool,
    pub code_repair: bool,
    /// Regenerate the script once, showing the model the error output.
    pub script_retry: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { schema_repair: true, table_repair: true, code_repair: true, script_retry: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxSettings {
    pub interpreter: Option<String>,
    pub timeout_ms: u64,
    pub max_output_bytes: usize,
    /// Scripts running at once across all runs sharing this pipeline.
    pub max_concurrent: usize,
}

impl Default for SandboxSettings {
    fn default() -> Self {
        let limits = SandboxLimits::default();
        Self {
            interpreter: None,
            timeout_ms: limits.timeout_ms,
            max_output_bytes: limits.max_output_bytes,
            max_concurrent: default_parallelism(),
        }
    }
}

impl SandboxSettings {
    pub fn limits(&self) -> SandboxLimits {
        SandboxLimits { timeout_ms: self.timeout_ms, max_output_bytes: self.max_output_bytes }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub chunking: ChunkingConfig,
    pub models: BTreeMap<ModelRole, ModelConfig>,
    pub retries: RetryPolicy,
    pub sandbox: SandboxSettings,
    /// Parent directory for run directories; `None` keeps nothing on disk.
    pub artifact_dir: Option<PathBuf>,
    /// Worker threads for the filter and extract fan-out.
    pub workers: usize,
    /// Reuse finished stages found in the run directory.
    pub resume: bool,
    pub preview_rows: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            chunking: ChunkingConfig::default(),
            models: ModelRole::ALL.iter().map(|&r| (r, ModelConfig::default_for(r))).collect(),
            retries: RetryPolicy::default(),
            sandbox: SandboxSettings::default(),
            artifact_dir: None,
            workers: 8,
            resume: true,
            preview_rows: DEFAULT_PREVIEW_ROWS,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.chunking.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        for role in [ModelRole::Main, ModelRole::Extractor, ModelRole::Filter] {
            let m = self.models.get(&role).ok_or_else(|| PipelineError::Config(format!("no {role} model configured")))?;
            if m.role != role {
                return Err(PipelineError::Config(format!("model under {role} is tagged {}", m.role)));
            }
            m.validate()?;
        }
        if self.workers == 0 {
            return Err(PipelineError::Config("workers must be at least 1".into()));
        }
        if self.sandbox.max_concurrent == 0 || self.sandbox.timeout_ms == 0 {
            return Err(PipelineError::Config("sandbox max_concurrent and timeout_ms must be at least 1".into()));
        }
        if self.preview_rows == 0 {
            return Err(PipelineError::Config("preview_rows must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Analyze,
    Segment,
    Filter,
    Resegment,
    Extract,
    Process,
    Conclude,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Analyze, Stage::Segment, Stage::Filter, Stage::Resegment, Stage::Extract, Stage::Process, Stage::Conclude];

    pub fn file_stem(self) -> &'static str {
        match self {
            Stage::Analyze => "01-analyze",
            Stage::Segment => "02-segment",
            Stage::Filter => "03-filter",
            Stage::Resegment => "04-resegment",
            Stage::Extract => "05-extract",
            Stage::Process => "06-process",
            Stage::Conclude => "07-conclude",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.json", self.file_stem())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StageError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("could not read the schema reply: {0}")]
    Schema(ParseError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no relevant evidence found in the context")]
    EmptyEvidence,
    #[error("no extraction reply matched the schema: {0}")]
    HeaderMismatch(ParseError),
    #[error("every extraction failed; last error: {0}")]
    ExtractionFailed(String),
    #[error("could not read the code reply: {0}")]
    Code(ParseError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("script failed with exit status {exit_status}{}", if *.timed_out { " (timed out)" } else { "" })]
    ScriptFailed { exit_status: i32, timed_out: bool },
    #[error("artifact i/o error: {0}")]
    Io(String),
}

impl StageError {
    /// Stable short name for reports.
    pub fn kind(&self) -> &'static str {
        match self {
            StageError::EmptyQuestion => "empty_question",
            StageError::EmptyAnswer => "empty_answer",
            StageError::Schema(_) => "schema_parse",
            StageError::Gateway(GatewayError::Transport { .. }) => "transport",
            StageError::Gateway(_) => "gateway",
            StageError::EmptyEvidence => "empty_evidence",
            StageError::HeaderMismatch(_) => "header_mismatch",
            StageError::ExtractionFailed(_) => "extraction_failed",
            StageError::Code(_) => "code_parse",
            StageError::Sandbox(SandboxError::NoAnswer) => "no_answer",
            StageError::Sandbox(SandboxError::InterpreterMissing(_) | SandboxError::NoInterpreter) => {
                "interpreter_missing"
            }
            StageError::Sandbox(_) => "sandbox",
            StageError::ScriptFailed { .. } => "script_failed",
            StageError::Io(_) => "io",
        }
    }
}

fn io_err(e: impl fmt::Display) -> StageError {
    StageError::Io(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Succeeded,
    Failed,
}

/// Everything a run produced. Serializes deterministically; timings live
/// in `timings.json` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub status: RunStatus,
    pub failure: Option<StageFailure>,
    pub question: String,
    pub schema: Option<QuestionSchema>,
    pub chunks_total: usize,
    pub chunks_kept: usize,
    pub extract_chunks: usize,
    pub tables_extracted: usize,
    pub rows_extracted: usize,
    pub duplicates_dropped: usize,
    pub conflicts: Vec<KeyConflict>,
    pub merged_table: Option<DataTable>,
    pub script: Option<String>,
    pub execution: Option<ExecutionResult>,
    pub answer: Option<String>,
    pub final_answer: Option<String>,
    pub ledger: CostLedger,
    #[serde(skip)]
    pub stage_timings: BTreeMap<Stage, Duration>,
    #[serde(skip)]
    pub resumed_stages: Vec<Stage>,
}

impl RunArtifact {
    fn new(question: &str) -> Self {
        Self {
            status: RunStatus::Failed,
            failure: None,
            question: question.to_string(),
            schema: None,
            chunks_total: 0,
            chunks_kept: 0,
            extract_chunks: 0,
            tables_extracted: 0,
            rows_extracted: 0,
            duplicates_dropped: 0,
            conflicts: Vec::new(),
            merged_table: None,
            script: None,
            execution: None,
            answer: None,
            final_answer: None,
            ledger: CostLedger::default(),
            stage_timings: BTreeMap::new(),
            resumed_stages: Vec::new(),
        }
    }

    pub fn succeeded(&self) -> bool {
        self.status == RunStatus::Succeeded
    }
}

/// Directory name for a run: a digest of question and context, so that
/// repeating a run lands in the same place and can resume.
pub fn run_id(question: &str, context: &str) -> String {
    let mut h = Sha256::new();
    h.update(question.as_bytes());
    h.update([0u8]);
    h.update(context.as_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Applies `f` to every item on up to `workers` threads. Results come back
/// in item order whatever the scheduling.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkMeta {
    pub index: usize,
    pub token_count: usize,
    pub byte_range: std::ops::Range<usize>,
}

impl From<&Chunk> for ChunkMeta {
    fn from(c: &Chunk) -> Self {
        Self { index: c.index, token_count: c.token_count, byte_range: c.byte_range.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub index: usize,
    pub kept: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractStatus {
    Table,
    NoData,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkExtraction {
    pub index: usize,
    pub status: ExtractStatus,
    pub rows: usize,
    pub repaired: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractOutcome {
    pub chunks: Vec<ChunkExtraction>,
    pub table: DataTable,
    pub tables_extracted: usize,
    pub rows_extracted: usize,
    pub duplicates_dropped: usize,
    pub conflicts: Vec<KeyConflict>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessOutcome {
    pub script: String,
    pub attempts: Vec<ExecutionResult>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageRecord<T> {
    stage: Stage,
    input_hash: String,
    output: Option<T>,
    failure: Option<StageFailure>,
    exchanges: Vec<ChatExchange>,
}

/// Where a run keeps its files, and whether earlier results may be reused.
struct RunStore {
    dir: PathBuf,
    resume: bool,
    _temp: Option<tempfile::TempDir>,
}

impl RunStore {
    fn load<T: DeserializeOwned>(&self, stage: Stage, input_hash: &str) -> Option<StageRecord<T>> {
        if !self.resume {
            return None;
        }
        let bytes = std::fs::read(self.dir.join(stage.file_name())).ok()?;
        let record: StageRecord<T> = serde_json::from_slice(&bytes).ok()?;
        (record.input_hash == input_hash && record.failure.is_none() && record.output.is_some()).then_some(record)
    }

    fn save<T: Serialize>(&self, record: &StageRecord<T>) -> Result<(), StageError> {
        let bytes = serde_json::to_vec_pretty(record).map_err(io_err)?;
        std::fs::write(self.dir.join(record.stage.file_name()), bytes).map_err(io_err)
    }
}

/// A configured workflow. Cheap to [`fork`](Self::fork) for concurrent runs.
pub struct Pipeline {
    config: PipelineConfig,
    gateway: Gateway,
    sandbox: Sandbox,
    templates: Templates,
    fingerprint: String,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline").field("config", &self.config).finish()
    }
}

impl Pipeline {
    /// Builds the gateway from the configured models; mock roles answer from
    /// `scenario`.
    pub fn new(config: PipelineConfig, scenario: Arc<MockScenario>, templates: Templates) -> Result<Self, PipelineError> {
        config.validate()?;
        let gateway = Gateway::new(config.models.values().cloned(), scenario.clone(), templates.clone())?;
        let fingerprint = scenario.fingerprint();
        Ok(Self::with_gateway(config, gateway, templates, fingerprint))
    }

    /// Uses an existing gateway. `backend_fingerprint` should change whenever
    /// the backends would answer differently; it keys stage reuse.
    pub fn with_gateway(config: PipelineConfig, gateway: Gateway, templates: Templates, backend_fingerprint: String) -> Self {
        let sandbox = Sandbox::new(config.sandbox.interpreter.clone(), config.sandbox.limits(), config.sandbox.max_concurrent);
        let mut fp = backend_fingerprint;
        for kind in PromptKind::ALL {
            fp.push_str(&digest(&[templates.get(kind).body().as_bytes()]));
        }
        let models = serde_json::to_vec(&config.models).expect("models serialize");
        let fingerprint = digest(&[fp.as_bytes(), &models]);
        Self { config, gateway, sandbox, templates, fingerprint }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn templates(&self) -> &Templates {
        &self.templates
    }

    /// Same configuration and backends, fresh ledger.
    pub fn fork(&self) -> Self {
        Self {
            config: self.config.clone(),
            gateway: self.gateway.fork(),
            sandbox: self.sandbox.clone(),
            templates: self.templates.clone(),
            fingerprint: self.fingerprint.clone(),
        }
    }

    fn render(&self, kind: PromptKind, bindings: &[(&str, &str)]) -> String {
        self.templates.render(kind, bindings).expect("pipeline binds every placeholder of its templates")
    }

    /// Infers the table header and primary key for `question` with the main
    /// model.
    pub fn analyze_question(&self, question: &str) -> Result<QuestionSchema, StageError> {
        analyze_with(self, &self.gateway, question)
    }

    /// Keeps the chunks the filter model finds relevant, in order. A failed
    /// call keeps its chunk.
    pub fn filter_chunks(&self, chunks: &[Chunk], schema: &QuestionSchema) -> Vec<Chunk> {
        let decisions = filter_with(self, &self.gateway, chunks, schema);
        chunks.iter().zip(&decisions).filter(|(_, d)| d.kept).map(|(c, _)| c.clone()).collect()
    }

    /// Extracts and merges one table from all chunks.
    pub fn extract_all(&self, chunks: &[Chunk], schema: &QuestionSchema) -> Result<ExtractOutcome, StageError> {
        extract_with(self, &self.gateway, chunks, schema)
    }

    /// Final answer from the main model, given the script and its output.
    pub fn conclude(&self, question: &str, script: &str, answer: &str) -> Result<String, StageError> {
        conclude_with(self, &self.gateway, question, script, answer)
    }

    /// Runs every stage, keeping files under `artifact_dir/<run id>` when an
    /// artifact directory is configured.
    pub fn run(&self, question: &str, context: &str) -> RunArtifact {
        let dir = self.config.artifact_dir.as_ref().map(|d| d.join(run_id(question, context)));
        self.run_in(question, context, dir.as_deref())
    }

    /// Runs every stage with `run_dir` as the run directory (a temporary
    /// directory when `None`). Failures are recorded in the artifact.
    pub fn run_in(&self, question: &str, context: &str, run_dir: Option<&Path>) -> RunArtifact {
        let mut artifact = RunArtifact::new(question);
        let started = Instant::now();
        let store = match open_store(run_dir, self.config.resume) {
            Ok(s) => s,
            Err(e) => {
                artifact.failure = Some(StageFailure { stage: Stage::Analyze, kind: e.kind().into(), message: e.to_string() });
                return artifact;
            }
        };
        let mut exchanges: Vec<ChatExchange> = Vec::new();
        let outcome = self.run_stages(question, context, &store, &mut artifact, &mut exchanges);
        if let Err((stage, e)) = outcome {
            tracing::warn!(%stage, error = %e, "run failed");
            artifact.failure = Some(StageFailure { stage, kind: e.kind().to_string(), message: e.to_string() });
        } else {
            artifact.status = RunStatus::Succeeded;
        }
        let mut ledger = CostLedger::new(self.gateway.pricing());
        ledger.entries = exchanges;
        ledger.sort();
        artifact.ledger = ledger;
        if store._temp.is_none() {
            let _ = write_json(&store.dir.join("run.json"), &artifact);
            let timings: BTreeMap<String, u128> = artifact
                .stage_timings
                .iter()
                .map(|(s, d)| (s.file_stem().to_string(), d.as_millis()))
                .chain(std::iter::once(("total".to_string(), started.elapsed().as_millis())))
                .collect();
            let _ = write_json(&store.dir.join("timings.json"), &timings);
        }
        artifact
    }

    fn stage<T, F>(
        &self,
        stage: Stage,
        input_hash: String,
        store: &RunStore,
        artifact: &mut RunArtifact,
        exchanges: &mut Vec<ChatExchange>,
        body: F,
    ) -> Result<T, (Stage, StageError)>
    where
        T: Serialize + DeserializeOwned + Clone,
        F: FnOnce(&Gateway) -> Result<T, StageError>,
    {
        let started = Instant::now();
        if let Some(record) = store.load::<T>(stage, &input_hash) {
            exchanges.extend(record.exchanges);
            artifact.resumed_stages.push(stage);
            artifact.stage_timings.insert(stage, started.elapsed());
            return Ok(record.output.expect("checked on load"));
        }
        let gw = self.gateway.fork();
        let result = body(&gw);
        let stage_exchanges = gw.ledger().entries;
        exchanges.extend(stage_exchanges.iter().cloned());
        let record = StageRecord {
            stage,
            input_hash,
            output: result.as_ref().ok().cloned(),
            failure: result
                .as_ref()
                .err()
                .map(|e| StageFailure { stage, kind: e.kind().to_string(), message: e.to_string() }),
            exchanges: stage_exchanges,
        };
        artifact.stage_timings.insert(stage, started.elapsed());
        store.save(&record).map_err(|e| (stage, e))?;
        result.map_err(|e| (stage, e))
    }

    fn run_stages(
        &self,
        question: &str,
        context: &str,
        store: &RunStore,
        artifact: &mut RunArtifact,
        exchanges: &mut Vec<ChatExchange>,
    ) -> Result<(), (Stage, StageError)> {
        let fp = self.fingerprint.as_bytes();
        let chunking = serde_json::to_vec(&self.config.chunking).expect("config serializes");

        let h = digest(&[b"analyze", fp, question.as_bytes()]);
        let schema: QuestionSchema =
            self.stage(Stage::Analyze, h, store, artifact, exchanges, |gw| analyze_with(self, gw, question))?;
        artifact.schema = Some(schema.clone());
        let schema_json = serde_json::to_vec(&schema).expect("schema serializes");

        let cfg = &self.config.chunking;
        let chunks = segment(context, cfg.filter_chunk_tokens, cfg.boundary_policy);
        let h = digest(&[b"segment", context.as_bytes(), &chunking]);
        let metas: Vec<ChunkMeta> = self.stage(Stage::Segment, h, store, artifact, exchanges, |_| {
            Ok(chunks.iter().map(ChunkMeta::from).collect())
        })?;
        artifact.chunks_total = metas.len();

        let h = digest(&[b"filter", fp, &schema_json, context.as_bytes(), &chunking]);
        let decisions: Vec<FilterDecision> = self.stage(Stage::Filter, h, store, artifact, exchanges, |gw| {
            let d = filter_with(self, gw, &chunks, &schema);
            if d.iter().any(|d| d.kept) {
                Ok(d)
            } else {
                Err(StageError::EmptyEvidence)
            }
        })?;
        let survivors: Vec<Chunk> =
            chunks.iter().zip(&decisions).filter(|(_, d)| d.kept).map(|(c, _)| c.clone()).collect();
        artifact.chunks_kept = survivors.len();

        let extract_chunks = resegment(&survivors, cfg.extract_chunk_tokens, cfg.boundary_policy);
        let kept_ids: Vec<u8> = decisions.iter().map(|d| d.kept as u8).collect();
        let h = digest(&[b"resegment", context.as_bytes(), &chunking, &kept_ids]);
        let metas: Vec<ChunkMeta> = self.stage(Stage::Resegment, h, store, artifact, exchanges, |_| {
            Ok(extract_chunks.iter().map(ChunkMeta::from).collect())
        })?;
        artifact.extract_chunks = metas.len();

        let merged_text = crate::chunking::merge_survivors(&survivors);
        let h = digest(&[b"extract", fp, &schema_json, merged_text.as_bytes(), &chunking]);
        let extracted: ExtractOutcome = self.stage(Stage::Extract, h, store, artifact, exchanges, |gw| {
            let out = extract_with(self, gw, &extract_chunks, &schema)?;
            if out.table.is_empty() {
                Err(StageError::EmptyEvidence)
            } else {
                Ok(out)
            }
        })?;
        artifact.tables_extracted = extracted.tables_extracted;
        artifact.rows_extracted = extracted.rows_extracted;
        artifact.duplicates_dropped = extracted.duplicates_dropped;
        artifact.conflicts = extracted.conflicts.clone();
        artifact.merged_table = Some(extracted.table.clone());
        if !extracted.conflicts.is_empty() {
            tracing::info!(conflicts = extracted.conflicts.len(), "kept first value for keys with conflicting rows");
        }

        let table_json = serde_json::to_vec(&extracted.table).expect("table serializes");
        let sandbox_json = serde_json::to_vec(&self.config.sandbox).expect("settings serialize");
        let retries = serde_json::to_vec(&self.config.retries).expect("policy serializes");
        let h = digest(&[b"process", fp, question.as_bytes(), &table_json, &sandbox_json, &retries]);
        let workspace_root = store.dir.join("sandbox");
        let processed: ProcessOutcome = self.stage(Stage::Process, h, store, artifact, exchanges, |gw| {
            process_with(self, gw, question, &extracted.table, &workspace_root)
        })?;
        artifact.script = Some(processed.script.clone());
        artifact.execution = processed.attempts.last().cloned();
        artifact.answer = Some(processed.answer.clone());

        let h = digest(&[b"conclude", fp, question.as_bytes(), processed.script.as_bytes(), processed.answer.as_bytes()]);
        let final_answer: String = self.stage(Stage::Conclude, h, store, artifact, exchanges, |gw| {
            conclude_with(self, gw, question, &processed.script, &processed.answer)
        })?;
        artifact.final_answer = Some(final_answer);
        Ok(())
    }
}

fn open_store(run_dir: Option<&Path>, resume: bool) -> Result<RunStore, StageError> {
    match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err)?;
            Ok(RunStore { dir: dir.to_path_buf(), resume, _temp: None })
        }
        None => {
            let temp = tempfile::Builder::new().prefix("numpipe-run-").tempdir().map_err(io_err)?;
            Ok(RunStore { dir: temp.path().to_path_buf(), resume: false, _temp: Some(temp) })
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(io_err)?;
    std::fs::write(path, bytes).map_err(io_err)
}

fn analyze_with(p: &Pipeline, gw: &Gateway, question: &str) -> Result<QuestionSchema, StageError> {
    if question.trim().is_empty() {
        return Err(StageError::EmptyQuestion);
    }
    let prompt = p.render(PromptKind::AnalyzeQuestion, &[("question", question)]);
    let site = Stage::Analyze.file_stem();
    let reply = gw.complete(ModelRole::Main, site, &prompt)?;
    match parse_schema(&reply.response) {
        Ok(s) => Ok(s),
        Err(e) if !p.config.retries.schema_repair => Err(StageError::Schema(e)),
        Err(_) => {
            let reply = gw.complete(ModelRole::Main, &format!("{site}/repair"), &repair_prompt(&prompt))?;
            parse_schema(&reply.response).map_err(StageError::Schema)
        }
    }
}

fn filter_with(p: &Pipeline, gw: &Gateway, chunks: &[Chunk], schema: &QuestionSchema) -> Vec<FilterDecision> {
    let headers = schema.headers_list();
    parallel_map(chunks, p.config.workers, |i, chunk| {
        let prompt = p.render(PromptKind::RelevanceFilter, &[("doc_chunk", &chunk.text), ("headers_list", &headers)]);
        match gw.complete(ModelRole::Filter, &format!("{}/{i:05}", Stage::Filter.file_stem()), &prompt) {
            Ok(reply) => FilterDecision { index: chunk.index, kept: parse_relevance(&reply.response), error: None },
            Err(e) => {
                tracing::warn!(chunk = chunk.index, error = %e, "filter call failed; keeping chunk");
                FilterDecision { index: chunk.index, kept: true, error: Some(e.to_string()) }
            }
        }
    })
}

fn extract_with(p: &Pipeline, gw: &Gateway, chunks: &[Chunk], schema: &QuestionSchema) -> Result<ExtractOutcome, StageError> {
    let header_row = schema.header_row();
    let results: Vec<(ChunkExtraction, Option<DataTable>, Option<ParseError>)> =
        parallel_map(chunks, p.config.workers, |i, chunk| {
            let prompt =
                p.render(PromptKind::ExtractData, &[("doc_chunk", &chunk.text), ("table_header", &header_row)]);
            let site = format!("{}/{i:05}", Stage::Extract.file_stem());
            let record = |status, rows, repaired, error: Option<String>| ChunkExtraction {
                index: chunk.index,
                status,
                rows,
                repaired,
                error,
            };
            let first = match gw.complete(ModelRole::Extractor, &site, &prompt) {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(chunk = chunk.index, error = %e, "extract call failed; skipping chunk");
                    return (record(ExtractStatus::Failed, 0, false, Some(e.to_string())), None, None);
                }
            };
            let mut parsed = parse_markdown_table(&first.response, schema);
            let mut repaired = false;
            if parsed.is_err() && p.config.retries.table_repair {
                repaired = true;
                parsed = match gw.complete(ModelRole::Extractor, &format!("{site}/repair"), &repair_prompt(&prompt)) {
                    Ok(r) => parse_markdown_table(&r.response, schema),
                    Err(e) => {
                        return (record(ExtractStatus::Failed, 0, true, Some(e.to_string())), None, None);
                    }
                };
            }
            match parsed {
                Ok(TableResponse::Table(t)) => (record(ExtractStatus::Table, t.len(), repaired, None), Some(t), None),
                Ok(TableResponse::NoData) => (record(ExtractStatus::NoData, 0, repaired, None), None, None),
                Err(e) => (record(ExtractStatus::Failed, 0, repaired, Some(e.to_string())), None, Some(e)),
            }
        });

    if !results.is_empty() && results.iter().all(|r| r.0.status == ExtractStatus::Failed) {
        let parse_errors: Vec<&ParseError> = results.iter().filter_map(|r| r.2.as_ref()).collect();
        if parse_errors.len() == results.len()
            && parse_errors.iter().all(|e| matches!(e, ParseError::HeaderMismatch { .. }))
        {
            return Err(StageError::HeaderMismatch(parse_errors[0].clone()));
        }
        let last = results.last().and_then(|r| r.0.error.clone()).unwrap_or_default();
        return Err(StageError::ExtractionFailed(last));
    }
    let chunks_out: Vec<ChunkExtraction> = results.iter().map(|r| r.0.clone()).collect();
    let tables: Vec<DataTable> = results.into_iter().filter_map(|r| r.1).collect();
    let merged = merge_tables(&tables, schema).map_err(|e| StageError::ExtractionFailed(e.to_string()))?;
    Ok(ExtractOutcome {
        chunks: chunks_out,
        tables_extracted: tables.len(),
        rows_extracted: merged.rows_in,
        duplicates_dropped: merged.duplicates_dropped,
        conflicts: merged.conflicts,
        table: merged.table,
    })
}

fn write_code(p: &Pipeline, gw: &Gateway, prompt: &str, site: &str) -> Result<String, StageError> {
    let reply = gw.complete(ModelRole::Main, site, prompt)?;
    match parse_code_block(&reply.response) {
        Ok(s) => Ok(s),
        Err(e) if !p.config.retries.code_repair => Err(StageError::Code(e)),
        Err(_) => {
            let reply = gw.complete(ModelRole::Main, &format!("{site}-repair"), &repair_prompt(prompt))?;
            parse_code_block(&reply.response).map_err(StageError::Code)
        }
    }
}

fn process_with(
    p: &Pipeline,
    gw: &Gateway,
    question: &str,
    table: &DataTable,
    workspace_root: &Path,
) -> Result<ProcessOutcome, StageError> {
    let preview = head_preview(table, p.config.preview_rows).map_err(|e| StageError::Io(e.to_string()))?;
    let prompt = p.render(PromptKind::ProcessDataByCode, &[("df_show", &preview), ("question", question)]);
    let site = Stage::Process.file_stem();
    if workspace_root.exists() {
        std::fs::remove_dir_all(workspace_root).map_err(io_err)?;
    }
    let mut script = write_code(p, gw, &prompt, &format!("{site}/1-code"))?;
    let mut attempts = Vec::new();
    let max_attempts = if p.config.retries.script_retry { 2 } else { 1 };
    loop {
        let n = attempts.len() + 1;
        let result = p.sandbox.run(&script, table, &workspace_root.join(format!("attempt-{n}")))?;
        let answer = if result.succeeded() { resolve_answer(&result).ok() } else { None };
        let failure = match (&answer, result.succeeded()) {
            (Some(_), _) => None,
            (None, true) => Some(StageError::Sandbox(SandboxError::NoAnswer)),
            (None, false) => Some(StageError::ScriptFailed { exit_status: result.exit_status, timed_out: result.timed_out }),
        };
        let stderr = if result.stderr.trim().is_empty() { result.stdout.clone() } else { result.stderr.clone() };
        attempts.push(result);
        match failure {
            None => return Ok(ProcessOutcome { script, attempts, answer: answer.expect("checked") }),
            Some(e) if n >= max_attempts => return Err(e),
            Some(e) => {
                tracing::info!(error = %e, "script failed; asking for a corrected one");
                script = write_code(p, gw, &script_retry_prompt(&prompt, &stderr), &format!("{site}/{}-code", n + 1))?;
            }
        }
    }
}

fn conclude_with(p: &Pipeline, gw: &Gateway, question: &str, script: &str, answer: &str) -> Result<String, StageError> {
    if answer.trim().is_empty() {
        return Err(StageError::EmptyAnswer);
    }
    let prompt = p.render(PromptKind::Conclude, &[("question", question), ("script", script), ("answer", answer)]);
    let reply = gw.complete(ModelRole::Main, Stage::Conclude.file_stem(), &prompt)?;
    let text = reply.response.trim();
    if text.is_empty() {
        Err(StageError::EmptyAnswer)
    } else {
        Ok(text.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..200).collect();
        let serial = parallel_map(&items, 1, |i, x| i * 1000 + x);
        let parallel = parallel_map(&items, 7, |i, x| {
            std::thread::sleep(Duration::from_micros((x % 5) as u64 * 50));
            i * 1000 + x
        });
        assert_eq!(serial, parallel);
        assert!(parallel_map(&Vec::<u8>::new(), 4, |_, x| *x).is_empty());
    }

    #[test]
    fn run_id_is_stable() {
        assert_eq!(run_id("q", "c"), run_id("q", "c"));
        assert_ne!(run_id("q", "c"), run_id("qc", ""));
        assert_eq!(run_id("q", "c").len(), 16);
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let mut c = PipelineConfig::default();
        c.models.remove(&ModelRole::Filter);
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.workers = 0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.models.insert(ModelRole::Main, ModelConfig::default_for(ModelRole::Judge));
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_files_are_numbered() {
        let names: Vec<String> = Stage::ALL.iter().map(|s| s.file_name()).collect();
        assert_eq!(names[0], "01-analyze.json");
        assert_eq!(names[6], "07-conclude.json");
    }
}
