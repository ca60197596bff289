//! `numpipe`: run the workflow on a document, evaluate on a dataset,
//! generate synthetic datasets, and inspect run directories.
//!
//! Exit status: 0 on success, 1 for usage or input errors, 2 when a run
//! fails at one of its stages.

mod inspect;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use numpipe_core::config::AppConfig;
use numpipe_core::eval::{
    evaluate, load_dataset, synthesize, write_jsonl, DatasetFormat, FieldMapping, Method, Regime, SynthKind, SynthSpec,
};
use numpipe_core::gateway::ModelRole;
use numpipe_core::pipeline::{run_id, RunArtifact};
use numpipe_core::sandbox::resolve_interpreter;

#[derive(Debug, Parser)]
#[command(name = "numpipe", version, about = "Numeric question answering over long documents")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by all commands. Each one overrides the matching config
/// file entry.
#[derive(Debug, Default, Args)]
struct CommonArgs {
    /// TOML config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// `chunking.filter_chunk_tokens`
    #[arg(long, global = true, value_name = "N")]
    filter_chunk_tokens: Option<usize>,
    /// `chunking.extract_chunk_tokens`
    #[arg(long, global = true, value_name = "N")]
    extract_chunk_tokens: Option<usize>,
    /// `sandbox.interpreter`; NUMPIPE_SANDBOX_INTERPRETER takes precedence.
    #[arg(long, global = true, value_name = "PROGRAM")]
    sandbox_interpreter: Option<String>,
    /// `eval.method`: ours, normal, or cot.
    #[arg(long, global = true)]
    method: Option<Method>,
    /// `mock.seed` and `synth.seed`
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `run.artifact_dir`
    #[arg(long, global = true, value_name = "DIR")]
    artifact_dir: Option<PathBuf>,
    /// `run.workers`
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// `run.resume = false`
    #[arg(long, global = true)]
    no_resume: bool,
    /// `mock.extract_corruption_rate`
    #[arg(long, global = true, value_name = "RATE")]
    extract_corruption_rate: Option<f64>,
    /// `eval.max_concurrent_samples`
    #[arg(long, global = true, value_name = "N")]
    max_concurrent_samples: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Answer a question about a document.
    Run {
        /// Plain-text document to read
        #[arg(long, value_name = "FILE")]
        context: PathBuf,
        /// Question to answer from the document
        #[arg(long)]
        question: String,
        /// Print the full run record as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Score a method on a JSON-lines dataset.
    Eval {
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        /// Record layout: native, loong, difficult_retrieval, or a mapping file.
        #[arg(long, default_value = "native")]
        mapping: String,
        /// Directory for report.json, report.txt, and timings.json.
        #[arg(long, value_name = "DIR", default_value = "eval-report")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        /// dense or sparse
        #[arg(long)]
        regime: Regime,
        #[arg(long, short = 'n')]
        n_samples: usize,
        /// Resumes (dense) or reports (sparse) per sample.
        #[arg(long)]
        n_records: Option<usize>,
        /// Comma-separated question kinds, e.g. max,min,count_above.
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<SynthKind>>,
        /// Sparse only: target context size.
        #[arg(long)]
        context_tokens: Option<usize>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Summarize a run directory stage by stage.
    Inspect { dir: PathBuf },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Stage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Stage(_) => 2,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn load_config(common: &CommonArgs) -> Result<AppConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => AppConfig::load(p).map_err(usage)?,
        None => AppConfig::default(),
    };
    apply_overrides(&mut cfg, common);
    Ok(cfg)
}

/// Flag over config over default, field by field.
fn apply_overrides(cfg: &mut AppConfig, f: &CommonArgs) {
    let p = &mut cfg.pipeline;
    if let Some(n) = f.filter_chunk_tokens {
        p.chunking.filter_chunk_tokens = n;
    }
    if let Some(n) = f.extract_chunk_tokens {
        p.chunking.extract_chunk_tokens = n;
    }
    p.sandbox.interpreter = resolve_interpreter(f.sandbox_interpreter.as_deref(), p.sandbox.interpreter.as_deref());
    if let Some(d) = &f.artifact_dir {
        p.artifact_dir = Some(d.clone());
    }
    if let Some(n) = f.workers {
        p.workers = n;
    }
    if f.no_resume {
        p.resume = false;
    }
    if let Some(m) = f.method {
        cfg.eval.method = m;
    }
    if let Some(n) = f.max_concurrent_samples {
        cfg.eval.max_concurrent_samples = n;
    }
    if let Some(s) = f.seed {
        cfg.mock.seed = Some(s);
        cfg.synth.seed = s;
    }
    if let Some(r) = f.extract_corruption_rate {
        cfg.mock.extract_corruption_rate = Some(r);
    }
}

fn cost_summary(a: &RunArtifact) -> String {
    let mut parts = vec![format!("${} total", a.ledger.total_cost(None).to_decimal_string())];
    for role in ModelRole::ALL {
        let calls = a.ledger.calls(Some(role));
        if calls > 0 {
            parts.push(format!(
                "{role} ${} ({calls} calls, {} in / {} out tokens)",
                a.ledger.total_cost(Some(role)).to_decimal_string(),
                a.ledger.input_tokens(Some(role)),
                a.ledger.output_tokens(Some(role))
            ));
        }
    }
    parts.join("; ")
}

fn cmd_run(cfg: AppConfig, context: &Path, question: &str, json: bool) -> Result<(), Failure> {
    let text = fs::read_to_string(context).map_err(|e| usage(format!("cannot read {}: {e}", context.display())))?;
    let mut cfg = cfg;
    let parent = cfg.pipeline.artifact_dir.get_or_insert_with(|| PathBuf::from("runs")).clone();
    let pipeline = cfg.build_pipeline().map_err(usage)?;
    let artifact = pipeline.run(question, &text);
    let dir = parent.join(run_id(question, &text));
    if json {
        println!("{}", serde_json::to_string_pretty(&artifact).expect("artifact serializes"));
    }
    match (&artifact.failure, &artifact.final_answer) {
        (None, Some(answer)) => {
            if !json {
                println!("{answer}");
                println!("cost: {}", cost_summary(&artifact));
                println!("artifacts: {}", dir.display());
            }
            Ok(())
        }
        (failure, _) => {
            let why = failure.as_ref().map_or_else(
                || "run produced no answer".to_string(),
                |f| format!("failed at stage {} ({}): {}", f.stage, f.kind, f.message),
            );
            eprintln!("cost: {}", cost_summary(&artifact));
            eprintln!("artifacts: {}", dir.display());
            Err(Failure::Stage(why))
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn cmd_eval(cfg: AppConfig, dataset: &Path, mapping: &str, out: &Path) -> Result<(), Failure> {
    let mapping = FieldMapping::resolve(mapping).map_err(usage)?;
    let samples = load_dataset(dataset, DatasetFormat::JsonLines, &mapping).map_err(usage)?;
    let pipeline = cfg.build_pipeline().map_err(usage)?;
    let report = evaluate(&samples, cfg.eval.method, &pipeline, &cfg.eval.options());
    fs::create_dir_all(out).map_err(|e| usage(format!("cannot create {}: {e}", out.display())))?;
    write_file(&out.join("report.json"), report.to_json().as_bytes())?;
    let text = report.render_text();
    write_file(&out.join("report.txt"), text.as_bytes())?;
    let timings = serde_json::to_string_pretty(&report.runtime).expect("timings serialize") + "\n";
    write_file(&out.join("timings.json"), timings.as_bytes())?;
    print!("{text}");
    println!("report: {}", out.join("report.json").display());
    Ok(())
}

fn cmd_synth(
    cfg: AppConfig,
    regime: Regime,
    n_samples: usize,
    n_records: Option<usize>,
    kinds: Option<Vec<SynthKind>>,
    context_tokens: Option<usize>,
    out: &Path,
) -> Result<(), Failure> {
    let seed = cfg.synth.seed;
    let mut spec = match regime {
        Regime::NumericalDense => SynthSpec::dense(n_samples, seed),
        Regime::NumericalSparse => SynthSpec::sparse(n_samples, seed),
    };
    if let Some(n) = n_records.or(cfg.synth.n_records) {
        spec.n_records = n;
    }
    if let Some(k) = kinds.or(cfg.synth.question_kinds) {
        spec.question_kinds = k;
    }
    spec.context_tokens = context_tokens.or(cfg.synth.context_tokens);
    let samples = synthesize(regime, &spec).map_err(usage)?;
    let file = fs::File::create(out).map_err(|e| usage(format!("cannot create {}: {e}", out.display())))?;
    let mut w = BufWriter::new(file);
    write_jsonl(&samples, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| usage(format!("cannot write {}: {e}", out.display())))?;
    println!("wrote {} {} samples to {}", samples.len(), regime.short_name(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Inspect { dir } => inspect::inspect(&dir).map(|text| print!("{text}")).map_err(usage),
        command => {
            let cfg = load_config(&cli.common)?;
            match command {
                Command::Run { context, question, json } => cmd_run(cfg, &context, &question, json),
                Command::Eval { dataset, mapping, out } => cmd_eval(cfg, &dataset, &mapping, &out),
                Command::Synth { regime, n_samples, n_records, kinds, context_tokens, out } => {
                    cmd_synth(cfg, regime, n_samples, n_records, kinds, context_tokens, &out)
                }
                Command::Inspect { .. } => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.common.verbose {
        0 => tracing_subscriber::filter::LevelFilter::WARN,
        1 => tracing_subscriber::filter::LevelFilter::INFO,
        _ => tracing_subscriber::filter::LevelFilter::DEBUG,
    };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(level).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Stage(m) => eprintln!("run failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
