//! Benchmarks, baselines, judging, and reports.

mod dataset;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::chunking::{estimate_tokens, segment, BoundaryPolicy};
use crate::gateway::{ChatExchange, CostLedger, Gateway, GatewayError, Money, ModelRole};
use crate::parsers::{parse_judge, PromptKind, Templates, Verdict};
use crate::pipeline::{parallel_map, Pipeline};
use crate::tabular::numeric_value_key;

pub use dataset::{load_dataset, parse_jsonl, write_jsonl, DatasetError, DatasetFormat, FieldMapping};
pub use synth::{
    synthesize, synthesize_detailed, GeneratedSample, SynthError, SynthKind, SynthSpec, DENSE_RECORDS,
    SPARSE_MAX_TOKENS, SPARSE_MIN_TOKENS, SPARSE_REPORTS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    NumericalDense,
    NumericalSparse,
}

impl Regime {
    pub fn short_name(self) -> &'static str {
        match self {
            Regime::NumericalDense => "dense",
            Regime::NumericalSparse => "sparse",
        }
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "dense" | "numerical_dense" => Ok(Regime::NumericalDense),
            "sparse" | "numerical_sparse" => Ok(Regime::NumericalSparse),
            other => Err(format!("unknown regime `{other}` (expected dense or sparse)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Comparison,
    Cluster,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub reference_answer: String,
    pub regime: Regime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_type: Option<TaskType>,
    pub context_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    #[serde(alias = "normal")]
    NormalPrompt,
    #[serde(alias = "cot")]
    CotPrompt,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::NormalPrompt, Method::CotPrompt, Method::Ours];

    pub fn label(self) -> &'static str {
        match self {
            Method::Ours => "Ours",
            Method::NormalPrompt => "normal prompt",
            Method::CotPrompt => "CoT prompt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ours => "ours",
            Method::NormalPrompt => "normal",
            Method::CotPrompt => "cot",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ours" => Ok(Method::Ours),
            "normal" | "normal_prompt" | "normalprompt" => Ok(Method::NormalPrompt),
            "cot" | "cot_prompt" | "cotprompt" => Ok(Method::CotPrompt),
            other => Err(format!("unknown method `{other}` (expected ours, normal, or cot)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    NormalPrompt,
    CotPrompt,
}

impl BaselineKind {
    fn prompt_kind(self) -> PromptKind {
        match self {
            BaselineKind::NormalPrompt => PromptKind::BaselineNormal,
            BaselineKind::CotPrompt => PromptKind::BaselineCot,
        }
    }

    fn call_site(self) -> &'static str {
        match self {
            BaselineKind::NormalPrompt => "baseline/normal",
            BaselineKind::CotPrompt => "baseline/cot",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutcome {
    pub answer: String,
    pub raw_reply: String,
    pub ledger: CostLedger,
    /// The context was cut to fit the main model's window.
    pub truncated: bool,
}

/// Longest line-aligned prefix of `context` within `budget` tokens.
fn truncate_context(context: &str, budget: usize) -> &str {
    if estimate_tokens(context) <= budget {
        return context;
    }
    let Some(first) = segment(context, budget.max(1), BoundaryPolicy::Line).into_iter().next() else {
        return "";
    };
    let mut end = first.byte_range.end;
    // A single over-long line: cut by bytes instead.
    while end > 0 && estimate_tokens(&context[..end]) > budget {
        end = (end * 9 / 10).min(end - 1);
        while !context.is_char_boundary(end) {
            end -= 1;
        }
    }
    &context[..end]
}

/// The line after the last "Final answer:" marker, or the whole reply.
pub fn extract_final_answer(reply: &str) -> String {
    let marker = "final answer:";
    let lower = reply.to_lowercase();
    match lower.rfind(marker) {
        Some(at) if lower.is_char_boundary(at) && reply.is_char_boundary(at + marker.len()) => {
            let rest = &reply[at + marker.len()..];
            rest.lines().next().unwrap_or("").trim().to_string()
        }
        _ => reply.trim().to_string(),
    }
}

/// Direct prompting with the whole context on the main model.
pub fn run_baseline(
    gateway: &Gateway,
    templates: &Templates,
    sample: &BenchmarkSample,
    kind: BaselineKind,
) -> Result<BaselineOutcome, GatewayError> {
    let gw = gateway.fork();
    let pk = kind.prompt_kind();
    let render = |ctx: &str| {
        templates
            .render(pk, &[("context", ctx), ("question", &sample.question)])
            .expect("baseline templates bind context and question")
    };
    let mut context = sample.context.as_str();
    let mut truncated = false;
    let main = gw.config(ModelRole::Main).ok_or(GatewayError::RoleNotConfigured(ModelRole::Main))?;
    if let Some(window) = main.context_window_tokens {
        let overhead = estimate_tokens(&render("")) + main.max_output_tokens as usize;
        let budget = window.saturating_sub(overhead);
        let cut = truncate_context(context, budget);
        if cut.len() < context.len() {
            tracing::warn!(sample = %sample.id, window, "context truncated to fit the main model");
            truncated = true;
            context = cut;
        }
    }
    let reply = gw.complete(ModelRole::Main, kind.call_site(), &render(context))?;
    let answer = match kind {
        BaselineKind::NormalPrompt => reply.response.trim().to_string(),
        BaselineKind::CotPrompt => extract_final_answer(&reply.response),
    };
    Ok(BaselineOutcome { answer, raw_reply: reply.response, ledger: gw.ledger(), truncated })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgedBy {
    /// Normalized equality; no model call.
    Match,
    Model,
    /// The method produced no answer.
    NoAnswer,
    /// No judge role configured and no normalized match.
    Unjudged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeOutcome {
    pub verdict: Verdict,
    pub judged_by: JudgedBy,
    pub exchanges: Vec<ChatExchange>,
}

fn normalize_answer(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    let trimmed = collapsed.trim_end_matches(['.', '!']).trim();
    numeric_value_key(trimmed).unwrap_or_else(|| trimmed.to_lowercase())
}

/// Case, whitespace, and number-format insensitive equality.
pub fn answers_match(candidate: &str, reference: &str) -> bool {
    let (c, r) = (normalize_answer(candidate), normalize_answer(reference));
    !r.is_empty() && c == r
}

pub fn judge(
    gateway: &Gateway,
    templates: &Templates,
    candidate: &str,
    reference: &str,
    question: &str,
) -> Result<JudgeOutcome, GatewayError> {
    if answers_match(candidate, reference) {
        return Ok(JudgeOutcome { verdict: Verdict::Correct, judged_by: JudgedBy::Match, exchanges: Vec::new() });
    }
    if !gateway.has_role(ModelRole::Judge) {
        return Ok(JudgeOutcome { verdict: Verdict::Incorrect, judged_by: JudgedBy::Unjudged, exchanges: Vec::new() });
    }
    let gw = gateway.fork();
    let prompt = templates
        .render(PromptKind::Judge, &[("question", question), ("reference", reference), ("candidate", candidate)])
        .expect("judge template binds its placeholders");
    let reply = gw.complete(ModelRole::Judge, "judge", &prompt)?;
    Ok(JudgeOutcome { verdict: parse_judge(&reply.response), judged_by: JudgedBy::Model, exchanges: gw.ledger().entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Samples in flight at once.
    pub max_concurrent_samples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { max_concurrent_samples: 4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub input: u64,
    pub output: u64,
    pub calls: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub stage: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleVerdict {
    pub id: String,
    pub regime: Regime,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_type: Option<TaskType>,
    pub question: String,
    pub reference: String,
    pub candidate: Option<String>,
    pub verdict: Verdict,
    pub judged_by: JudgedBy,
    /// Method cost; the judge is accounted separately.
    pub cost: Money,
    pub cost_by_role: BTreeMap<ModelRole, Money>,
    pub tokens: BTreeMap<ModelRole, TokenTotals>,
    pub judge_cost: Money,
    pub truncated: bool,
    pub failure: Option<SampleFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub samples: usize,
    pub correct: usize,
    /// Percentage; `None` when there are no samples.
    pub accuracy: Option<f64>,
}

impl Accuracy {
    fn of<'a>(verdicts: impl IntoIterator<Item = &'a SampleVerdict>) -> Self {
        let (mut samples, mut correct) = (0, 0);
        for v in verdicts {
            samples += 1;
            correct += (v.verdict == Verdict::Correct) as usize;
        }
        Self { samples, correct, accuracy: (samples > 0).then(|| 100.0 * correct as f64 / samples as f64) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    #[serde(flatten)]
    pub accuracy: Accuracy,
    pub by_task_type: BTreeMap<TaskType, Accuracy>,
    pub mean_cost_per_sample: Money,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub total_ms: u128,
    pub per_sample_ms: BTreeMap<String, u128>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    #[serde(flatten)]
    pub overall: Accuracy,
    /// `true` when there were no samples to score.
    pub accuracy_undefined: bool,
    pub by_task_type: BTreeMap<TaskType, Accuracy>,
    pub by_regime: BTreeMap<Regime, RegimeSummary>,
    pub mean_cost_per_sample: Money,
    pub mean_cost_by_role: BTreeMap<ModelRole, Money>,
    pub total_cost_by_role: BTreeMap<ModelRole, Money>,
    pub judge_cost: Money,
    pub tokens: BTreeMap<ModelRole, TokenTotals>,
    pub truncated_samples: usize,
    pub failures: BTreeMap<String, SampleFailure>,
    pub verdicts: Vec<SampleVerdict>,
    #[serde(skip)]
    pub runtime: RuntimeStats,
}

fn mean(total: Money, n: usize) -> Money {
    if n == 0 {
        Money::ZERO
    } else {
        total.div_round(n as u64)
    }
}

impl EvalReport {
    pub fn from_verdicts(method: Method, mut verdicts: Vec<SampleVerdict>, runtime: RuntimeStats) -> Self {
        verdicts.sort_by(|a, b| a.id.cmp(&b.id));
        let overall = Accuracy::of(&verdicts);
        let n = verdicts.len();
        let task_types: std::collections::BTreeSet<TaskType> = verdicts.iter().filter_map(|v| v.task_type).collect();
        let by_type = |vs: &[&SampleVerdict]| -> BTreeMap<TaskType, Accuracy> {
            task_types
                .iter()
                .filter(|t| vs.iter().any(|v| v.task_type == Some(**t)))
                .map(|t| (*t, Accuracy::of(vs.iter().copied().filter(|v| v.task_type == Some(*t)))))
                .collect()
        };
        let all: Vec<&SampleVerdict> = verdicts.iter().collect();
        let regimes: std::collections::BTreeSet<Regime> = verdicts.iter().map(|v| v.regime).collect();
        let by_regime = regimes
            .into_iter()
            .map(|r| {
                let vs: Vec<&SampleVerdict> = verdicts.iter().filter(|v| v.regime == r).collect();
                let cost: Money = vs.iter().map(|v| v.cost).sum();
                let summary = RegimeSummary {
                    accuracy: Accuracy::of(vs.iter().copied()),
                    by_task_type: by_type(&vs),
                    mean_cost_per_sample: mean(cost, vs.len()),
                };
                (r, summary)
            })
            .collect();
        let mut total_cost_by_role: BTreeMap<ModelRole, Money> = BTreeMap::new();
        let mut tokens: BTreeMap<ModelRole, TokenTotals> = BTreeMap::new();
        for v in &verdicts {
            for (role, c) in &v.cost_by_role {
                let e = total_cost_by_role.entry(*role).or_insert(Money::ZERO);
                *e = *e + *c;
            }
            for (role, t) in &v.tokens {
                let e = tokens.entry(*role).or_default();
                e.input += t.input;
                e.output += t.output;
                e.calls += t.calls;
            }
        }
        let total: Money = verdicts.iter().map(|v| v.cost).sum();
        Self {
            method,
            accuracy_undefined: n == 0,
            by_task_type: by_type(&all),
            by_regime,
            mean_cost_per_sample: mean(total, n),
            mean_cost_by_role: total_cost_by_role.iter().map(|(r, c)| (*r, mean(*c, n))).collect(),
            total_cost_by_role,
            judge_cost: verdicts.iter().map(|v| v.judge_cost).sum(),
            tokens,
            truncated_samples: verdicts.iter().filter(|v| v.truncated).count(),
            failures: verdicts.iter().filter_map(|v| v.failure.clone().map(|f| (v.id.clone(), f))).collect(),
            overall,
            verdicts,
            runtime,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One-method summary followed by the per-sample list.
    pub fn render_text(&self) -> String {
        let mut out = render_comparison(std::slice::from_ref(self));
        out.push('\n');
        out.push_str(&format!(
            "samples: {}  correct: {}  accuracy: {}\n",
            self.overall.samples,
            self.overall.correct,
            pct(self.overall.accuracy)
        ));
        out.push_str(&format!("mean cost per sample: ${}\n", self.mean_cost_per_sample.to_decimal_string()));
        for (role, c) in &self.mean_cost_by_role {
            let t = self.tokens.get(role).cloned().unwrap_or_default();
            out.push_str(&format!(
                "  {role:<9} ${:<10} input {:>10}  output {:>8}  calls {:>6}\n",
                c.to_decimal_string(),
                t.input,
                t.output,
                t.calls
            ));
        }
        out.push_str(&format!("judge cost (total): ${}\n", self.judge_cost.to_decimal_string()));
        if self.truncated_samples > 0 {
            out.push_str(&format!("truncated contexts: {}\n", self.truncated_samples));
        }
        if !self.failures.is_empty() {
            out.push_str("failures:\n");
            for (id, f) in &self.failures {
                out.push_str(&format!("  {id}: {} {} ({})\n", f.stage, f.kind, f.message));
            }
        }
        out
    }
}

fn pct(a: Option<f64>) -> String {
    a.map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}"))
}

/// A table in the layout of the usual dense/sparse comparison: one row per
/// report, dense accuracy and cost, then sparse accuracy by task type and
/// cost.
pub fn render_comparison(reports: &[EvalReport]) -> String {
    let header = ["Method", "Dense Acc(%)", "Dense Cost($)", "Acc comp.(%)", "Acc clus.(%)", "Sparse Cost($)"];
    let mut rows: Vec<[String; 6]> = Vec::new();
    for r in reports {
        let dense = r.by_regime.get(&Regime::NumericalDense);
        let sparse = r.by_regime.get(&Regime::NumericalSparse);
        let sparse_type = |t| sparse.and_then(|s| s.by_task_type.get(&t)).and_then(|a| a.accuracy);
        rows.push([
            r.method.label().to_string(),
            pct(dense.and_then(|d| d.accuracy.accuracy)),
            dense.map_or("n/a".into(), |d| d.mean_cost_per_sample.to_decimal_string()),
            pct(sparse_type(TaskType::Comparison)),
            pct(sparse_type(TaskType::Cluster)),
            sparse.map_or("n/a".into(), |s| s.mean_cost_per_sample.to_decimal_string()),
        ]);
    }
    let widths: Vec<usize> =
        (0..6).map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0)).collect();
    let line = |cells: &[&str]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(&header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&line(&rule.iter().map(String::as_str).collect::<Vec<_>>()));
    for r in &rows {
        out.push_str(&line(&r.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    out
}

fn split_ledger(ledger: &CostLedger) -> (BTreeMap<ModelRole, Money>, BTreeMap<ModelRole, TokenTotals>) {
    let mut costs = BTreeMap::new();
    let mut tokens = BTreeMap::new();
    for role in ModelRole::ALL {
        let calls = ledger.calls(Some(role));
        if calls == 0 {
            continue;
        }
        costs.insert(role, ledger.total_cost(Some(role)));
        tokens.insert(
            role,
            TokenTotals {
                input: ledger.input_tokens(Some(role)),
                output: ledger.output_tokens(Some(role)),
                calls,
            },
        );
    }
    (costs, tokens)
}

/// Run directory name for a sample id.
pub fn sample_dir_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

/// Runs `method` over every sample and judges each answer. Failures count as
/// incorrect and are listed in the report.
pub fn evaluate(samples: &[BenchmarkSample], method: Method, pipeline: &Pipeline, opts: &EvalOptions) -> EvalReport {
    let started = Instant::now();
    let templates = pipeline.templates();
    let results: Vec<(SampleVerdict, Duration)> =
        parallel_map(samples, opts.max_concurrent_samples.max(1), |_, sample| {
            let t0 = Instant::now();
            let mut truncated = false;
            let (candidate, ledger, failure) = match method {
                Method::Ours => {
                    let p = pipeline.fork();
                    let dir = p.config().artifact_dir.as_ref().map(|d| d.join(sample_dir_name(&sample.id)));
                    let a = p.run_in(&sample.question, &sample.context, dir.as_deref());
                    let failure = a.failure.as_ref().map(|f| SampleFailure {
                        stage: f.stage.file_stem().to_string(),
                        kind: f.kind.clone(),
                        message: f.message.clone(),
                    });
                    (a.final_answer, a.ledger, failure)
                }
                Method::NormalPrompt | Method::CotPrompt => {
                    let kind =
                        if method == Method::CotPrompt { BaselineKind::CotPrompt } else { BaselineKind::NormalPrompt };
                    let gw = pipeline.gateway().fork();
                    match run_baseline(&gw, templates, sample, kind) {
                        Ok(o) => {
                            truncated = o.truncated;
                            (Some(o.answer), o.ledger, None)
                        }
                        Err(e) => {
                            let f = SampleFailure { stage: kind.call_site().into(), kind: "transport".into(), message: e.to_string() };
                            (None, gw.ledger(), Some(f))
                        }
                    }
                }
            };
            let (cost_by_role, tokens) = split_ledger(&ledger);
            let (verdict, judged_by, judge_cost, failure) = match &candidate {
                None => (Verdict::Incorrect, JudgedBy::NoAnswer, Money::ZERO, failure),
                Some(c) => match judge(pipeline.gateway(), templates, c, &sample.reference_answer, &sample.question) {
                    Ok(j) => {
                        let mut l = CostLedger::new(pipeline.gateway().pricing());
                        l.entries = j.exchanges;
                        (j.verdict, j.judged_by, l.total_cost(None), failure)
                    }
                    Err(e) => (
                        Verdict::Incorrect,
                        JudgedBy::Unjudged,
                        Money::ZERO,
                        Some(SampleFailure { stage: "judge".into(), kind: "transport".into(), message: e.to_string() }),
                    ),
                },
            };
            let v = SampleVerdict {
                id: sample.id.clone(),
                regime: sample.regime,
                task_type: sample.task_type,
                question: sample.question.clone(),
                reference: sample.reference_answer.clone(),
                candidate,
                verdict,
                judged_by,
                cost: ledger.total_cost(None),
                cost_by_role,
                tokens,
                judge_cost,
                truncated,
                failure,
            };
            (v, t0.elapsed())
        });
    let runtime = RuntimeStats {
        total_ms: started.elapsed().as_millis(),
        per_sample_ms: results.iter().map(|(v, d)| (v.id.clone(), d.as_millis())).collect(),
    };
    EvalReport::from_verdicts(method, results.into_iter().map(|(v, _)| v).collect(), runtime)
}
