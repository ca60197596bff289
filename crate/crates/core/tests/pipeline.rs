use std::sync::Arc;

use numpipe_core::gateway::{MockScenario, ModelRole};
use numpipe_core::parsers::Templates;
use numpipe_core::pipeline::{Pipeline, PipelineConfig, RunStatus, Stage};

const INTRO_EXAMPLE: &str = "Hallie Turner is a 21 years old student, graduated from ......\n\
The student named Sonali Jain is graduated from ...... His age is 25 ......\n\
Jack likes basketball and ......\n";

fn config(filter_tokens: usize, extract_tokens: usize, workers: usize) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.chunking.filter_chunk_tokens = filter_tokens;
    c.chunking.extract_chunk_tokens = extract_tokens;
    c.workers = workers;
    c.sandbox.interpreter = Some("python3".into());
    c
}

fn pipeline(c: PipelineConfig) -> Pipeline {
    Pipeline::new(c, Arc::new(MockScenario::builtin()), Templates::builtin()).unwrap()
}

const FIRST: [&str; 8] = ["Alice", "Bruno", "Chen", "Dana", "Emeka", "Farah", "Goran", "Hana"];
const LAST: [&str; 6] = ["Adams", "Brook", "Costa", "Duval", "Evans", "Fujii"];

/// Student lines interleaved with filler, so small filter chunks drop some.
/// Names are unique for `n <= 48`.
fn roster(n: usize) -> (String, Vec<(String, u32)>) {
    let mut text = String::new();
    let mut people = Vec::new();
    for i in 0..n {
        let name = format!("{} {}", FIRST[i % FIRST.len()], LAST[(i / FIRST.len()) % LAST.len()]);
        let age = 18 + ((i * 7) % 13) as u32;
        match i % 3 {
            0 => text.push_str(&format!("{name} is a {age} years old student, graduated from Lakeside College.\n")),
            1 => text.push_str(&format!(
                "The student named {name} is graduated from Hill School, likes chess. Her age is {age} and counting.\n"
            )),
            _ => text.push_str(&format!("{name}, a student of Riverside Academy, is {age} years old.\n")),
        }
        text.push_str("The weather was mild and the library stayed open late for everyone.\n");
        people.push((name, age));
    }
    (text, people)
}

#[test]
fn intro_example_names_the_oldest_student() {
    let p = pipeline(config(1000, 8000, 2));
    let a = p.run("Which student is the oldest?", INTRO_EXAMPLE);
    assert_eq!(a.status, RunStatus::Succeeded, "{:?}", a.failure);
    let answer = a.final_answer.unwrap();
    assert!(answer.contains("Sonali Jain"), "{answer}");
    let schema = a.schema.unwrap();
    assert_eq!(schema.header, ["Student Name", "Age"]);
    assert_eq!(a.merged_table.unwrap().len(), 2);
    assert!(a.chunks_kept <= a.chunks_total);
}

#[test]
fn irrelevant_context_fails_with_empty_evidence() {
    let p = pipeline(config(1000, 8000, 1));
    let a = p.run("Which student is the oldest?", "Jack likes basketball and tennis.\nThe sky is blue.\n");
    assert_eq!(a.status, RunStatus::Failed);
    let f = a.failure.unwrap();
    assert_eq!(f.kind, "empty_evidence");
    assert!(matches!(f.stage, Stage::Filter | Stage::Extract));
    assert!(a.final_answer.is_none());
    assert!(a.ledger.calls(None) > 0, "partial work is kept");
}

#[test]
fn empty_question_is_rejected_at_analysis() {
    let p = pipeline(config(1000, 8000, 1));
    let a = p.run("   ", INTRO_EXAMPLE);
    assert_eq!(a.failure.unwrap().stage, Stage::Analyze);
}

#[test]
fn count_matches_ground_truth() {
    let (ctx, people) = roster(48);
    let expected = people.iter().filter(|(_, a)| *a > 24).count();
    let p = pipeline(config(200, 1000, 4));
    let a = p.run("How many students are older than 24?", &ctx);
    assert!(a.succeeded(), "{:?}", a.failure);
    assert_eq!(a.answer.as_deref(), Some(expected.to_string().as_str()));
    assert!(a.chunks_total > 1);
}

#[test]
fn main_prompts_never_carry_context_chunks() {
    let (ctx, _) = roster(48);
    let c = config(150, 600, 4);
    let chunks = numpipe_core::chunking::segment(&ctx, 150, c.chunking.boundary_policy);
    assert!(chunks.len() > 5);
    let a = pipeline(c).run("Which student is the youngest?", &ctx);
    assert!(a.succeeded(), "{:?}", a.failure);
    let main: Vec<_> = a.ledger.entries.iter().filter(|e| e.role == ModelRole::Main).collect();
    assert!(main.len() >= 3);
    for e in main {
        for chunk in &chunks {
            assert!(!e.prompt.contains(chunk.text.trim()), "main prompt at {} embeds a chunk", e.call_site);
        }
    }
}

#[test]
fn parallel_and_serial_agree() {
    let (ctx, _) = roster(48);
    let q = "What is the average age of the students?";
    let serial = pipeline(config(120, 500, 1)).run(q, &ctx);
    let parallel = pipeline(config(120, 500, 8)).run(q, &ctx);
    assert!(serial.succeeded(), "{:?}", serial.failure);
    assert_eq!(serial.merged_table, parallel.merged_table);
    assert_eq!(serial_json(&serial), serial_json(&parallel));
}

fn serial_json(a: &numpipe_core::pipeline::RunArtifact) -> String {
    serde_json::to_string(a).unwrap()
}

#[test]
fn identical_runs_are_byte_identical() {
    let (ctx, _) = roster(40);
    let q = "Which student is the 3rd oldest?";
    let scenario = Arc::new(MockScenario::builtin().with_corruption_rate(0.3).unwrap());
    let make = || Pipeline::new(config(200, 800, 3), scenario.clone(), Templates::builtin()).unwrap();
    let a = make().run(q, &ctx);
    let b = make().run(q, &ctx);
    assert!(a.succeeded(), "{:?}", a.failure);
    assert_eq!(serial_json(&a), serial_json(&b));
}

#[test]
fn run_directory_holds_stage_files_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(1000, 8000, 2);
    c.artifact_dir = Some(dir.path().to_path_buf());
    let p = pipeline(c);
    let first = p.run("Which student is the oldest?", INTRO_EXAMPLE);
    assert!(first.succeeded());
    assert!(first.resumed_stages.is_empty());

    let run_dir = dir.path().join(numpipe_core::pipeline::run_id("Which student is the oldest?", INTRO_EXAMPLE));
    for stage in Stage::ALL {
        assert!(run_dir.join(stage.file_name()).is_file(), "{stage} missing");
    }
    for f in ["run.json", "timings.json", "sandbox/attempt-1/data.json", "sandbox/attempt-1/script.py"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }

    let second = p.fork().run("Which student is the oldest?", INTRO_EXAMPLE);
    assert_eq!(second.resumed_stages, Stage::ALL.to_vec());
    assert_eq!(serial_json(&first), serial_json(&second));

    // A different question invalidates everything downstream of analysis.
    let third = p.run("Which student is the youngest?", INTRO_EXAMPLE);
    assert!(third.final_answer.unwrap().contains("Hallie Turner"));
}

#[test]
fn stage_reuse_requires_matching_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let p = pipeline(config(1000, 8000, 1));
    let a = p.run_in("Which student is the oldest?", INTRO_EXAMPLE, Some(&run_dir));
    assert!(a.succeeded());
    let changed = INTRO_EXAMPLE.replace("25", "19");
    let b = p.run_in("Which student is the oldest?", &changed, Some(&run_dir));
    assert_eq!(b.resumed_stages, vec![Stage::Analyze]);
    assert!(b.final_answer.unwrap().contains("Hallie Turner"));
}

#[test]
fn disabling_resume_recomputes() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let mut c = config(1000, 8000, 1);
    c.resume = false;
    let p = pipeline(c);
    p.run_in("Which student is the oldest?", INTRO_EXAMPLE, Some(&run_dir));
    let b = p.run_in("Which student is the oldest?", INTRO_EXAMPLE, Some(&run_dir));
    assert!(b.resumed_stages.is_empty());
}

#[test]
fn conclude_requires_an_answer() {
    let p = pipeline(config(1000, 8000, 1));
    assert!(p.conclude("q?", "print(1)", "  ").is_err());
    let text = p.conclude("Which student is the oldest?", "print(1)", "Sonali Jain").unwrap();
    assert!(text.contains("Sonali Jain"));
}

#[test]
fn stage_methods_compose() {
    let p = pipeline(config(1000, 8000, 2));
    let schema = p.analyze_question("which company has the highest profit?").unwrap();
    assert_eq!(schema.header, ["Company Name", "Profit"]);
    assert_eq!(schema.primary_key, "Company Name");

    let student = p.analyze_question("Which student is the oldest?").unwrap();
    let chunks = numpipe_core::chunking::segment(INTRO_EXAMPLE, 10, Default::default());
    let kept = p.filter_chunks(&chunks, &student);
    assert!(kept.iter().all(|c| !c.text.contains("basketball")));
    assert!(p.filter_chunks(&[], &student).is_empty());

    let out = p.extract_all(&kept, &student).unwrap();
    assert_eq!(out.table.len(), 2);
    let doubled = [kept.clone(), kept].concat();
    let out = p.extract_all(&doubled, &student).unwrap();
    assert_eq!(out.table.len(), 2);
    assert_eq!(out.duplicates_dropped, 2);
}
