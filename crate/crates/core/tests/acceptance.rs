//! Acceptance checks, one PASS/FAIL line each. Runs without the libtest
//! harness; the process exits non-zero if any check fails.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use numpipe_core::analysis::{canned_script, reference_answer, AnalysisTask, QuestionKind};
use numpipe_core::chunking::{estimate_tokens, segment, BoundaryPolicy};
use numpipe_core::eval::*;
use numpipe_core::gateway::{ChatExchange, CostLedger, MockScenario, ModelConfig, ModelRole};
use numpipe_core::parsers::{parse_markdown_table, parse_relevance, QuestionSchema, TableResponse, Templates};
use numpipe_core::pipeline::{parallel_map, Pipeline, PipelineConfig};
use numpipe_core::sandbox::{execute, resolve_answer, SandboxLimits};
use numpipe_core::tabular::{concat_dedup, normalize_key, normalize_number, render_table, DataTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20240601;
const INTERPRETER: &str = "python3";

type Check = Result<String, String>;

fn pipeline_with(scenario: MockScenario, artifact_dir: Option<std::path::PathBuf>) -> Pipeline {
    let mut c = PipelineConfig::default();
    c.sandbox.interpreter = Some(INTERPRETER.into());
    c.artifact_dir = artifact_dir;
    Pipeline::new(c, Arc::new(scenario), Templates::builtin()).expect("valid pipeline")
}

fn dense_samples(n: usize) -> Vec<BenchmarkSample> {
    let mut spec = SynthSpec::dense(n, SEED);
    spec.n_records = 300;
    synthesize(Regime::NumericalDense, &spec).expect("dense synthesis")
}

fn exact_dense_accuracy() -> Check {
    let samples = dense_samples(50);
    let started = Instant::now();
    let report = evaluate(&samples, Method::Ours, &pipeline_with(MockScenario::builtin(), None), &EvalOptions::default());
    let elapsed = started.elapsed();
    let acc = report.overall.accuracy.unwrap_or(0.0);
    let detail = format!("{}/{} correct in {:.1}s", report.overall.correct, report.overall.samples, elapsed.as_secs_f64());
    if acc == 100.0 && elapsed < Duration::from_secs(120) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn accuracy_under_corruption() -> Check {
    let samples = dense_samples(50);
    let scenario = MockScenario::builtin().with_corruption_rate(0.10).map_err(|e| e.to_string())?;
    let report = evaluate(&samples, Method::Ours, &pipeline_with(scenario, None), &EvalOptions::default());
    let acc = report.overall.accuracy.unwrap_or(0.0);
    let detail = format!("accuracy {acc:.1}% at corruption 0.10");
    if acc >= 90.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sparse_sample(context_tokens: usize) -> BenchmarkSample {
    let mut spec = SynthSpec::sparse(1, SEED);
    spec.context_tokens = Some(context_tokens);
    synthesize(Regime::NumericalSparse, &spec).expect("sparse synthesis").remove(0)
}

fn exchange(input_tokens: u64, output_tokens: u64) -> ChatExchange {
    ChatExchange {
        role: ModelRole::Main,
        call_site: "price".into(),
        attempt: 1,
        prompt: String::new(),
        response: String::new(),
        input_tokens,
        output_tokens,
        usage_estimated: false,
        truncated: false,
        error: None,
        latency: Duration::ZERO,
    }
}

fn cost_mechanism() -> Check {
    let small = sparse_sample(20_000);
    let large = sparse_sample(200_000);
    let p = pipeline_with(MockScenario::builtin(), None);

    let ours_main = |s: &BenchmarkSample| -> Result<u64, String> {
        let run = p.run_in(&s.question, &s.context, None);
        match run.failure {
            Some(f) => Err(format!("run failed at {}: {}", f.stage, f.message)),
            None => Ok(run.ledger.input_tokens(Some(ModelRole::Main))),
        }
    };
    let (ours_small, ours_large) = (ours_main(&small)?, ours_main(&large)?);
    let normal_main = |s: &BenchmarkSample| -> Result<u64, String> {
        run_baseline(p.gateway(), p.templates(), s, BaselineKind::NormalPrompt)
            .map(|o| o.ledger.input_tokens(Some(ModelRole::Main)))
            .map_err(|e| e.to_string())
    };
    let (normal_small, normal_large) = (normal_main(&small)?, normal_main(&large)?);

    let spread = ours_large.abs_diff(ours_small) as f64 / ours_small.min(ours_large) as f64;
    let growth = normal_large as f64 / normal_small as f64;

    let main = ModelConfig::default_for(ModelRole::Main).pricing();
    let price = |i, o| {
        let mut ledger = CostLedger::new(BTreeMap::from([(ModelRole::Main, main)]));
        ledger.entries.push(exchange(i, o));
        ledger.total_cost(None).to_decimal_string()
    };
    let (cost_in, cost_out) = (price(1_000_000, 0), price(0, 1_000_000));
    let dollars = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);

    let detail = format!(
        "ours Main input {ours_small} -> {ours_large} ({:.1}% apart); normal {normal_small} -> {normal_large} ({growth:.1}x); 1M in ${cost_in}, 1M out ${cost_out}",
        spread * 100.0
    );
    if spread < 0.10 && growth >= 8.0 && dollars(&cost_in) == 5.0 && dollars(&cost_out) == 15.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_document(rng: &mut ChaCha8Rng) -> String {
    const PIECES: &[&str] = &["alpha", "Beta", "12,345.6", "the", " ", "  ", "\n", "\n\n", "|", "é", "数字", "\t", "-", "Q3:", "🙂", "\r\n"];
    let len = rng.gen_range(0..600);
    (0..len).map(|_| PIECES[rng.gen_range(0..PIECES.len())]).collect()
}

fn segmentation() -> Check {
    let large = sparse_sample(200_000);
    let chunks = segment(&large.context, 1000, BoundaryPolicy::Line);
    let count = chunks.len();

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut broken = 0;
    for _ in 0..1000 {
        let doc = random_document(&mut rng);
        let target = rng.gen_range(1..80);
        let policy = if rng.gen_bool(0.5) { BoundaryPolicy::Line } else { BoundaryPolicy::Paragraph };
        let parts = segment(&doc, target, policy);
        let joined: String = parts.iter().map(|c| c.text.as_str()).collect();
        let contiguous = parts.windows(2).all(|w| w[0].byte_range.end == w[1].byte_range.start);
        let indexed = parts.iter().enumerate().all(|(i, c)| c.index == i);
        if joined != doc || !contiguous || !indexed {
            broken += 1;
        }
    }
    let detail = format!("{count} chunks over {} tokens; {broken}/1000 fuzzed documents not reassembled", estimate_tokens(&large.context));
    if (200..=220).contains(&count) && broken == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_cell(rng: &mut ChaCha8Rng) -> String {
    const CHARS: &[char] = &['a', 'Z', 'q', '7', '0', '.', ',', ' ', '|', '\\', '-', 'é', '$', '%', '(', ')'];
    let len = rng.gen_range(0..10);
    let tail: String = (0..len).map(|_| CHARS[rng.gen_range(0..CHARS.len())]).collect();
    // a leading letter keeps the cell from reading as a placeholder or a delimiter
    format!("{}{}", ['x', 'K', 'm'][rng.gen_range(0..3)], tail).trim_end().to_string()
}

fn random_schema(rng: &mut ChaCha8Rng) -> QuestionSchema {
    const NAMES: &[&str] = &["Name", "Revenue", "Age", "Net Profit", "Year", "Region", "Score"];
    let mut names = NAMES.to_vec();
    let arity = rng.gen_range(1..=4);
    let header: Vec<String> = (0..arity).map(|_| names.remove(rng.gen_range(0..names.len())).to_string()).collect();
    let key = header[rng.gen_range(0..header.len())].clone();
    QuestionSchema::new(header, &key).expect("distinct header")
}

fn fuzz_text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: &[&str] = &[
        "|", "||", "\\|", "\\", "---", ":-:", "```", "```table\n", "\n", " ", "yes", "No", "no data", "index", "Name", "Revenue",
        "\u{0}", "é", "🙂", "\r", "-", "n/a", "12.5", "a",
    ];
    let len = rng.gen_range(0..60);
    let mut s: String = (0..len).map(|_| PIECES[rng.gen_range(0..PIECES.len())]).collect();
    if rng.gen_bool(0.2) {
        s.extend((0..rng.gen_range(0..20)).map(|_| char::from_u32(rng.gen_range(0..0x3000)).unwrap_or('?')));
    }
    s
}

fn parser_robustness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x5);
    let mut mismatches = 0;
    for i in 0..1000 {
        let schema = random_schema(&mut rng);
        let n_rows = rng.gen_range(0..8);
        let rows: Vec<Vec<String>> =
            (0..n_rows).map(|_| schema.header.iter().map(|_| random_cell(&mut rng)).collect()).collect();
        let table = DataTable::for_schema(&schema).with_rows(rows).expect("schema arity");
        let mut rendered = render_table(&table);
        if i % 3 == 0 {
            let mut lines: Vec<&str> = rendered.lines().collect();
            lines.remove(1);
            rendered = lines.join("\n");
        }
        match parse_markdown_table(&rendered, &schema) {
            Ok(TableResponse::Table(back)) if back == table => {}
            _ => mismatches += 1,
        }
    }

    let mut panics = 0;
    for _ in 0..10_000 {
        let text = fuzz_text(&mut rng);
        let schema = random_schema(&mut rng);
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let _ = parse_relevance(&text);
            let _ = parse_markdown_table(&text, &schema);
        }));
        if outcome.is_err() {
            panics += 1;
        }
    }
    let detail = format!("{mismatches}/1000 round-trips differ; {panics}/10000 fuzzed inputs panicked");
    if mismatches == 0 && panics == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_numeric_table(rng: &mut ChaCha8Rng) -> DataTable {
    let n = rng.gen_range(1..30);
    let decimals = rng.gen_bool(0.5);
    let rows = (0..n)
        .map(|i| {
            let value = if decimals {
                format!("{}.{}", rng.gen_range(0..5000), rng.gen_range(0..10))
            } else {
                rng.gen_range(0..120).to_string()
            };
            vec![format!("Entity {i:02}"), value]
        })
        .collect();
    DataTable::new(vec!["Name".into(), "Value".into()], 0)
        .expect("header")
        .with_rows(rows)
        .expect("arity")
}

fn sandbox_agrees_with_reference() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x6);
    let mut cases = Vec::new();
    for round in 0..100 {
        let table = random_numeric_table(&mut rng);
        let k = rng.gen_range(1..=table.len());
        let threshold = rng.gen_range(0..120).to_string();
        let kinds = [
            QuestionKind::Max,
            QuestionKind::Min,
            QuestionKind::KthLargest { k },
            QuestionKind::CountAbove { threshold },
            QuestionKind::Average,
        ];
        for (j, kind) in kinds.into_iter().enumerate() {
            let task = AnalysisTask { kind, key_column: "Name".into(), value_column: "Value".into() };
            cases.push((round * 5 + j, task, table.clone()));
        }
    }
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let outcomes = parallel_map(&cases, 4, |_, (id, task, table)| {
        let expected = reference_answer(task, table);
        let run = execute(INTERPRETER, &canned_script(task), table, SandboxLimits::default(), &scratch.path().join(id.to_string()));
        match run.map_err(|e| e.to_string()).and_then(|r| resolve_answer(&r).map_err(|e| e.to_string())) {
            Ok(got) if answers_match(&got, &expected) => None,
            Ok(got) => Some(format!("{}: sandbox {got:?}, reference {expected:?}", task.kind.name())),
            Err(e) => Some(format!("{}: {e}", task.kind.name())),
        }
    });
    let failures: Vec<String> = outcomes.into_iter().flatten().collect();
    let detail = format!("{}/{} answers agree", cases.len() - failures.len(), cases.len());
    match failures.first() {
        None => Ok(detail),
        Some(first) => Err(format!("{detail}; first disagreement {first}")),
    }
}

fn case_variant(key: &str, rng: &mut ChaCha8Rng) -> String {
    key.chars()
        .map(|c| if rng.gen_bool(0.5) { c.to_ascii_uppercase() } else { c.to_ascii_lowercase() })
        .collect()
}

fn dedup_properties() -> Check {
    let schema = QuestionSchema::new(vec!["Company".into(), "Profit".into()], "Company").expect("schema");
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x7);
    let keys = ["acme corp", "globex", "initech", "umbrella", "hooli", "stark ind"];
    let random_table = |rng: &mut ChaCha8Rng| {
        let rows = (0..rng.gen_range(0..8))
            .map(|_| {
                let key = case_variant(keys[rng.gen_range(0..keys.len())], rng);
                vec![key, rng.gen_range(0..1000).to_string()]
            })
            .collect();
        DataTable::for_schema(&schema).with_rows(rows).expect("arity")
    };
    let mut violations = 0;
    for _ in 0..500 {
        let (a, b) = (random_table(&mut rng), random_table(&mut rng));
        let Ok(merged) = concat_dedup(&[a.clone(), b.clone()], &schema) else {
            violations += 1;
            continue;
        };
        let idempotent = concat_dedup(&[merged.clone()], &schema).ok().as_ref() == Some(&merged);

        let mut first_seen: Vec<Vec<String>> = Vec::new();
        let mut seen: HashMap<String, ()> = HashMap::new();
        for row in a.rows().iter().chain(b.rows()) {
            if seen.insert(normalize_key(&row[0]), ()).is_none() {
                first_seen.push(row.iter().map(|c| normalize_number(c)).collect());
            }
        }
        if !idempotent || merged.rows() != first_seen.as_slice() {
            violations += 1;
        }
    }
    let detail = format!("{violations}/500 pairs violate idempotence or first-wins");
    if violations == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn reproducible_reports() -> Check {
    let mut spec = SynthSpec::dense(8, SEED);
    spec.n_records = 120;
    let samples = synthesize(Regime::NumericalDense, &spec).map_err(|e| e.to_string())?;
    let scenario = MockScenario::builtin().with_corruption_rate(0.10).map_err(|e| e.to_string())?.with_seed(SEED);
    let report = |method| {
        let dir = tempfile::tempdir().expect("tempdir");
        let p = pipeline_with(scenario.with_seed(SEED), Some(dir.path().to_path_buf()));
        evaluate(&samples, method, &p, &EvalOptions::default()).to_json()
    };
    let mut differing = Vec::new();
    for method in [Method::Ours, Method::CotPrompt] {
        if report(method) != report(method) {
            differing.push(method.to_string());
        }
    }
    if differing.is_empty() {
        Ok("report JSON byte-identical across two runs (ours, cot)".into())
    } else {
        Err(format!("report JSON differs for {}", differing.join(", ")))
    }
}

fn main() {
    let checks: [(&str, fn() -> Check); 8] = [
        ("dense_exact_accuracy", exact_dense_accuracy),
        ("corruption_tolerance", accuracy_under_corruption),
        ("main_cost_independent_of_context", cost_mechanism),
        ("segmentation_lossless_and_sized", segmentation),
        ("parser_round_trip_and_fuzz", parser_robustness),
        ("sandbox_matches_reference", sandbox_agrees_with_reference),
        ("dedup_idempotent_first_wins", dedup_properties),
        ("reports_reproducible", reproducible_reports),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let outcome = catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({detail}) [{secs:.1}s]");
            }
        }
    }
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
