//! Synthetic benchmark generation.
//!
//! Dense samples are student resumes, one per line, with hobby and club
//! lines mixed in. Sparse samples are a handful of long company reports
//! where the figures a question needs are a few sentences among hundreds of
//! boilerplate paragraphs. Ground truth is computed from the generated
//! records, never from the rendered text.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{reference_answer, AnalysisTask, QuestionKind};
use crate::chunking::estimate_tokens;
use crate::tabular::DataTable;

use super::{BenchmarkSample, Regime, TaskType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Max,
    Min,
    TopK,
    KthLargest,
    CountAbove,
    ListAbove,
    Sum,
    Average,
}

impl std::str::FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.trim().to_ascii_lowercase()))
            .map_err(|_| format!("unknown question kind `{s}`"))
    }
}

impl SynthKind {
    pub const DENSE_DEFAULT: [SynthKind; 5] =
        [SynthKind::Max, SynthKind::Min, SynthKind::CountAbove, SynthKind::KthLargest, SynthKind::Average];
    pub const SPARSE_DEFAULT: [SynthKind; 5] =
        [SynthKind::Max, SynthKind::Min, SynthKind::KthLargest, SynthKind::ListAbove, SynthKind::CountAbove];

    fn sparse_task_type(self) -> TaskType {
        match self {
            SynthKind::Max | SynthKind::Min | SynthKind::TopK | SynthKind::KthLargest => TaskType::Comparison,
            _ => TaskType::Cluster,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_samples: usize,
    /// Resumes per dense sample; reports per sparse sample.
    pub n_records: usize,
    /// Cycled through in order, one per sample.
    pub question_kinds: Vec<SynthKind>,
    pub seed: u64,
    /// Sparse only: total context size to aim for. Drawn per sample from
    /// the 40k to 200k band when absent.
    #[serde(default)]
    pub context_tokens: Option<usize>,
}

pub const DENSE_RECORDS: usize = 300;
pub const SPARSE_REPORTS: usize = 5;
pub const SPARSE_MIN_TOKENS: usize = 40_000;
pub const SPARSE_MAX_TOKENS: usize = 200_000;

impl SynthSpec {
    pub fn dense(n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            n_records: DENSE_RECORDS,
            question_kinds: SynthKind::DENSE_DEFAULT.to_vec(),
            seed,
            context_tokens: None,
        }
    }

    pub fn sparse(n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            n_records: SPARSE_REPORTS,
            question_kinds: SynthKind::SPARSE_DEFAULT.to_vec(),
            seed,
            context_tokens: None,
        }
    }

    pub fn validate(&self, regime: Regime) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1".into());
        }
        if self.n_records < 2 {
            return bad(format!("n_records must be at least 2, got {}", self.n_records));
        }
        if self.question_kinds.is_empty() {
            return bad("question_kinds is empty".into());
        }
        match regime {
            Regime::NumericalDense => {
                if self.n_records > FIRST_NAMES.len() * LAST_NAMES.len() {
                    return bad(format!("at most {} resumes per sample", FIRST_NAMES.len() * LAST_NAMES.len()));
                }
                if self.question_kinds.contains(&SynthKind::ListAbove) {
                    return bad("list_above questions are only generated for sparse samples".into());
                }
                if self.context_tokens.is_some() {
                    return bad("context_tokens applies to sparse samples; size dense ones with n_records".into());
                }
            }
            Regime::NumericalSparse => {
                if self.n_records > COMPANY_HEADS.len() {
                    return bad(format!("at most {} reports per sample", COMPANY_HEADS.len()));
                }
                if let Some(t) = self.context_tokens {
                    if t < 1_000 * self.n_records {
                        return bad(format!("context_tokens {t} too small for {} reports", self.n_records));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SynthError {
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
}

/// A sample together with the records it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub sample: BenchmarkSample,
    pub task: AnalysisTask,
    /// Header of `records`: key column then value column.
    pub header: [String; 2],
    /// (key, plain decimal value) in document order.
    pub records: Vec<(String, String)>,
}

pub fn synthesize(regime: Regime, spec: &SynthSpec) -> Result<Vec<BenchmarkSample>, SynthError> {
    Ok(synthesize_detailed(regime, spec)?.into_iter().map(|g| g.sample).collect())
}

pub fn synthesize_detailed(regime: Regime, spec: &SynthSpec) -> Result<Vec<GeneratedSample>, SynthError> {
    spec.validate(regime)?;
    Ok((0..spec.n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let stream = match regime {
                Regime::NumericalDense => 0,
                Regime::NumericalSparse => 1u64 << 32,
            };
            rng.set_stream(stream + i as u64);
            let kind = spec.question_kinds[i % spec.question_kinds.len()];
            match regime {
                Regime::NumericalDense => dense_sample(&mut rng, spec, i, kind),
                Regime::NumericalSparse => sparse_sample(&mut rng, spec, i, kind),
            }
        })
        .collect())
}

fn ordinal(k: usize) -> String {
    let suffix = match (k % 10, k % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{k}{suffix}")
}

fn ground_truth(task: &AnalysisTask, header: &[String; 2], records: &[(String, String)]) -> String {
    let rows = records.iter().map(|(k, v)| vec![k.clone(), v.clone()]).collect();
    let table = DataTable::new(header.to_vec(), 0).and_then(|t| t.with_rows(rows)).expect("two-column table");
    reference_answer(task, &table)
}

/// Makes the answer to a ranking question unique: the `k` leaders get
/// distinct values strictly beyond everyone else.
fn separate_leaders(values: &mut [i64], k: usize, descending: bool, rng: &mut ChaCha8Rng) {
    let picks = sample_indices(rng, values.len(), k).into_vec();
    let others: Vec<i64> = values.iter().enumerate().filter(|(i, _)| !picks.contains(i)).map(|(_, v)| *v).collect();
    let (lo, hi) = (others.iter().min().copied().unwrap_or(0), others.iter().max().copied().unwrap_or(0));
    let mut steps: Vec<i64> = (1..=k as i64).collect();
    steps.shuffle(rng);
    for (p, s) in picks.into_iter().zip(steps) {
        values[p] = if descending { hi + s } else { lo - s };
    }
}

const FIRST_NAMES: [&str; 48] = [
    "Aaron", "Abigail", "Adrian", "Aisha", "Alana", "Amir", "Anika", "Arjun", "Beatrice", "Bruno", "Camila", "Carlos",
    "Chloe", "Dario", "Deepa", "Diego", "Elena", "Emeka", "Farah", "Felix", "Gemma", "Goran", "Hallie", "Hiro",
    "Imani", "Ivan", "Jasmine", "Jonah", "Kavya", "Keiko", "Lars", "Leila", "Marco", "Mei", "Nadia", "Nikhil",
    "Olivia", "Omar", "Priya", "Quentin", "Rosa", "Samir", "Sonali", "Tariq", "Uma", "Viktor", "Wen", "Yara",
];
const LAST_NAMES: [&str; 40] = [
    "Abbott", "Baker", "Castillo", "Chen", "Dubois", "Eriksen", "Ferreira", "Garcia", "Haddad", "Hughes", "Ito",
    "Jain", "Kowalski", "Larsen", "Lopez", "Mensah", "Morris", "Nakamura", "Novak", "Okafor", "Olsen", "Patel",
    "Quinn", "Ramos", "Rossi", "Sato", "Schmidt", "Silva", "Tanaka", "Turner", "Usman", "Vargas", "Walsh",
    "Weber", "Xu", "Yamamoto", "Young", "Zhang", "Ziegler", "Moreau",
];
const SCHOOLS: [&str; 10] = [
    "Lakeside University", "Northbridge College", "Riverside Institute of Technology", "Hillcrest University",
    "Eastfield College", "Westmoor Polytechnic", "Summit State University", "Harborview College",
    "Greenhill Academy", "Pinecrest University",
];
const MAJORS: [&str; 10] = [
    "computer science", "economics", "biology", "mechanical engineering", "history", "statistics", "chemistry",
    "architecture", "linguistics", "applied mathematics",
];
const HOBBIES: [&str; 12] = [
    "basketball", "chess", "landscape photography", "rock climbing", "the violin", "baking sourdough bread",
    "long distance running", "bird watching", "table tennis", "amateur astronomy", "pottery", "hiking",
];
const INDUSTRIES: [&str; 6] = ["logistics", "healthcare", "energy", "publishing", "software", "banking"];
const JOBS: [&str; 6] = ["library assistant", "barista", "teaching assistant", "tutor", "lab technician", "cashier"];

fn dense_sample(rng: &mut ChaCha8Rng, spec: &SynthSpec, i: usize, kind: SynthKind) -> GeneratedSample {
    let n = spec.n_records;
    let pool = FIRST_NAMES.len() * LAST_NAMES.len();
    let names: Vec<String> = sample_indices(rng, pool, n)
        .into_iter()
        .map(|j| format!("{} {}", FIRST_NAMES[j % FIRST_NAMES.len()], LAST_NAMES[j / FIRST_NAMES.len()]))
        .collect();
    let mut ages: Vec<i64> = (0..n).map(|_| rng.gen_range(19..=38)).collect();
    let k = rng.gen_range(2..=n.clamp(2, 5));
    let threshold = rng.gen_range(22..=34);
    let (qkind, question) = match kind {
        SynthKind::Max => {
            separate_leaders(&mut ages, 1, true, rng);
            (QuestionKind::Max, "Which student is the oldest?".to_string())
        }
        SynthKind::Min => {
            separate_leaders(&mut ages, 1, false, rng);
            (QuestionKind::Min, "Which student is the youngest?".to_string())
        }
        SynthKind::TopK => {
            separate_leaders(&mut ages, k, true, rng);
            (QuestionKind::TopK { k }, format!("Who are the top {k} oldest students?"))
        }
        SynthKind::KthLargest => {
            separate_leaders(&mut ages, k, true, rng);
            (QuestionKind::KthLargest { k }, format!("Which student is the {} oldest?", ordinal(k)))
        }
        SynthKind::CountAbove => (
            QuestionKind::CountAbove { threshold: threshold.to_string() },
            format!("How many students are older than {threshold}?"),
        ),
        SynthKind::Sum => (QuestionKind::Sum, "What is the sum of the ages of all students?".to_string()),
        SynthKind::Average => (QuestionKind::Average, "What is the average age of the students?".to_string()),
        SynthKind::ListAbove => unreachable!("rejected by validate"),
    };

    let mut context = String::new();
    let mut records = Vec::with_capacity(n);
    for (name, age) in names.iter().zip(&ages) {
        let female = rng.gen_bool(0.5);
        let (he, his) = if female { ("She", "Her") } else { ("He", "His") };
        let school = SCHOOLS.choose(rng).expect("non-empty");
        let major = MAJORS.choose(rng).expect("non-empty");
        let hobby = HOBBIES.choose(rng).expect("non-empty");
        let hobby2 = HOBBIES.choose(rng).expect("non-empty");
        let job = JOBS.choose(rng).expect("non-empty");
        let line = match rng.gen_range(0..3) {
            0 => format!(
                "{name} is a {age} years old student, graduated from {school} with a major in {major}. {he} spends weekends on {hobby} and volunteers at the campus {hobby2} club. {he} is described by classmates as reliable and curious."
            ),
            1 => format!(
                "The student named {name} is graduated from {school}, where {} studied {major} and won a departmental prize. {his} age is {age}. In {} spare time {} enjoys {hobby} and worked as a {job}.",
                he.to_lowercase(),
                his.to_lowercase(),
                he.to_lowercase()
            ),
            _ => format!(
                "{name}, a student of {school}, is {age} years old. {he} works part-time as a {job}, majors in {major}, and lists {hobby} and {hobby2} among {} favourite pastimes.",
                his.to_lowercase()
            ),
        };
        let industry = INDUSTRIES.choose(rng).expect("non-empty");
        let closing = match rng.gen_range(0..3) {
            0 => format!(" {he} completed a summer internship at a regional {industry} firm and hopes to continue into graduate study after finishing the current coursework."),
            1 => format!(" Referees mention strong teamwork during a group project with a local {industry} company, along with steady grades across the final two years."),
            _ => format!(" {he} has attended several career fairs, is interested in roles in the {industry} sector, and is available to start work early next year."),
        };
        context.push_str(&line);
        context.push_str(&closing);
        context.push('\n');
        if rng.gen_bool(0.2) {
            let first = FIRST_NAMES.choose(rng).expect("non-empty");
            let filler = match rng.gen_range(0..3) {
                0 => format!("{first} likes {hobby} and {hobby2}, and often talks about them after lectures."),
                1 => format!("The {school} {hobby} society meets every Thursday evening in the main hall."),
                _ => format!("Applications for the {major} exchange programme close at the end of the semester."),
            };
            context.push_str(&filler);
            context.push('\n');
        }
        records.push((name.clone(), age.to_string()));
    }

    let header = ["Student Name".to_string(), "Age".to_string()];
    let task = AnalysisTask { kind: qkind, key_column: header[0].clone(), value_column: header[1].clone() };
    let answer = ground_truth(&task, &header, &records);
    GeneratedSample {
        sample: BenchmarkSample {
            id: format!("dense-{:04}", i),
            context_tokens: estimate_tokens(&context),
            context,
            question,
            reference_answer: answer,
            regime: Regime::NumericalDense,
            task_type: None,
        },
        task,
        header,
        records,
    }
}

const COMPANY_HEADS: [&str; 12] = [
    "Northwind", "Bluecrest", "Silverline", "Redwood", "Ironbridge", "Goldleaf", "Clearwater", "Stonegate",
    "Brightpath", "Oakmont", "Harborlight", "Westfield",
];
const COMPANY_MIDS: [&str; 8] = ["Harbor", "Valley", "Summit", "Meridian", "Atlas", "Pioneer", "Coastal", "Granite"];
const COMPANY_TAILS: [&str; 6] = ["Holdings", "Group", "Industries", "Corporation", "Partners", "Systems"];
const METRICS: [&str; 4] = ["revenue", "net profit", "total assets", "operating cash flow"];

fn title_case(s: &str) -> String {
    s.split(' ')
        .map(|w| {
            let mut c = w.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect::<String>()).unwrap_or_default()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Tenths of a million as a figure, with thousands separators half the time.
fn money_text(tenths: i64, rng: &mut ChaCha8Rng) -> String {
    let whole = tenths / 10;
    let frac = tenths % 10;
    let int = if whole >= 1000 && rng.gen_bool(0.5) { format!("{},{:03}", whole / 1000, whole % 1000) } else { whole.to_string() };
    format!("{int}.{frac}")
}

fn plain_money(tenths: i64) -> String {
    format!("{}.{}", tenths / 10, tenths % 10)
}

fn boilerplate(rng: &mut ChaCha8Rng, company: &str) -> String {
    const OPENERS: [&str; 8] = [
        "During the reporting period the board continued to review governance practices across all subsidiaries",
        "Management reaffirmed its commitment to sustainable operations and transparent disclosure",
        "The audit committee met on several occasions to examine internal controls and risk registers",
        "Regional teams completed a multi-year programme of facility upgrades and logistics consolidation",
        "Customer satisfaction surveys were conducted in each major market and results were shared with staff",
        "Procurement policies were updated to reflect revised supplier standards and ethical sourcing guidance",
        "The remuneration framework was benchmarked against peers and adjusted for long-term incentives",
        "Information security investments focused on identity management, monitoring, and incident response",
    ];
    const MIDDLES: [&str; 8] = [
        "and the group expects these measures to support resilience over the medium term",
        "while preparing for new reporting requirements that take effect in the coming years",
        "with particular attention to working capital discipline and the timing of capital expenditure",
        "as part of a wider effort to simplify the organisation and reduce duplicated functions",
        "and progress against each objective is tracked in quarterly management reviews",
        "following recommendations from external advisers engaged earlier in the cycle",
        "in line with the strategy outlined to shareholders at the previous annual meeting",
        "so that operating units can respond faster to changes in customer demand",
    ];
    let opener = OPENERS.choose(rng).expect("non-empty");
    let middle = MIDDLES.choose(rng).expect("non-empty");
    match rng.gen_range(0..6) {
        0 => format!(
            "{opener}, {middle}. Headcount at {company} stood at {} employees at year end, compared with {} a year earlier.",
            rng.gen_range(800..20_000),
            rng.gen_range(800..20_000)
        ),
        1 => {
            let metric = METRICS.choose(rng).expect("non-empty");
            format!(
                "{opener}, {middle}. In the prior fiscal year {metric} was {} million dollars, a figure restated for comparability.",
                plain_money(rng.gen_range(1_000..90_000))
            )
        }
        2 => format!(
            "{opener}, {middle}. Capital expenditure guidance for the next period is between {} and {} million dollars.",
            rng.gen_range(10..200),
            rng.gen_range(200..500)
        ),
        _ => format!("{opener}, {middle}. Further detail is provided in the notes to the consolidated statements."),
    }
}

fn sparse_sample(rng: &mut ChaCha8Rng, spec: &SynthSpec, i: usize, kind: SynthKind) -> GeneratedSample {
    let n = spec.n_records;
    let heads = sample_indices(rng, COMPANY_HEADS.len(), n).into_vec();
    let companies: Vec<String> = heads
        .iter()
        .map(|&h| {
            format!(
                "{} {} {}",
                COMPANY_HEADS[h],
                COMPANY_MIDS.choose(rng).expect("non-empty"),
                COMPANY_TAILS.choose(rng).expect("non-empty")
            )
        })
        .collect();
    let metric = *METRICS.choose(rng).expect("non-empty");
    let metric_title = title_case(metric);

    // Figures in tenths of a million, distinct per metric.
    let mut figures: Vec<[i64; 4]> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = [0i64; 4];
        for (m, slot) in row.iter_mut().enumerate() {
            loop {
                let v = rng.gen_range(1_000..99_999);
                if figures.iter().all(|r| r[m] != v) {
                    *slot = v;
                    break;
                }
            }
        }
        figures.push(row);
    }
    let mi = METRICS.iter().position(|m| *m == metric).expect("known metric");
    let values: Vec<i64> = figures.iter().map(|r| r[mi]).collect();
    let mut sorted = values.clone();
    sorted.sort_unstable();

    let k = rng.gen_range(2..=n);
    let cut = rng.gen_range(1..n);
    let threshold = (sorted[cut - 1] + sorted[cut]) / 20;
    let (qkind, question) = match kind {
        SynthKind::Max => (QuestionKind::Max, format!("Which company reported the highest {metric}?")),
        SynthKind::Min => (QuestionKind::Min, format!("Which company reported the lowest {metric}?")),
        SynthKind::TopK => (QuestionKind::TopK { k }, format!("What are the top {k} companies by {metric}?")),
        SynthKind::KthLargest => {
            (QuestionKind::KthLargest { k }, format!("Which company reported the {} highest {metric}?", ordinal(k)))
        }
        SynthKind::ListAbove => (
            QuestionKind::ListAbove { threshold: threshold.to_string() },
            format!("Which companies reported {metric} above {threshold} million dollars?"),
        ),
        SynthKind::CountAbove => (
            QuestionKind::CountAbove { threshold: threshold.to_string() },
            format!("How many companies reported {metric} above {threshold} million dollars?"),
        ),
        SynthKind::Sum => (QuestionKind::Sum, format!("What is the total of the {metric} of all companies?")),
        SynthKind::Average => (QuestionKind::Average, format!("What is the average {metric} of the companies?")),
    };

    let total = spec.context_tokens.unwrap_or_else(|| rng.gen_range(SPARSE_MIN_TOKENS + 5_000..=SPARSE_MAX_TOKENS - 5_000));
    let per_report = total / n;
    let mut context = String::new();
    for (company, row) in companies.iter().zip(&figures) {
        let mut paragraphs: Vec<String> = Vec::new();
        let mut tokens = 0;
        let heading = format!("Annual Report of {company}");
        tokens += estimate_tokens(&heading) + 1;
        let key_lines: Vec<String> = METRICS
            .iter()
            .zip(row)
            .map(|(m, v)| {
                let fig = money_text(*v, rng);
                if rng.gen_bool(0.5) {
                    let article = if m.starts_with(['a', 'e', 'i', 'o', 'u']) { "an " } else { "a " };
                    let article = if rng.gen_bool(0.5) { article } else { "" };
                    format!(
                        "For the fiscal year under review, {company} reported {article}{m} of {fig} million dollars, reflecting conditions described elsewhere in this report."
                    )
                } else {
                    format!(
                        "{company}'s {m} for the current fiscal year amounted to {fig} million dollars, as presented in the audited statements."
                    )
                }
            })
            .collect();
        tokens += key_lines.iter().map(|l| estimate_tokens(l) + 1).sum::<usize>();
        while tokens < per_report {
            let p = boilerplate(rng, company);
            tokens += estimate_tokens(&p) + 1;
            paragraphs.push(p);
        }
        for line in key_lines {
            let at = rng.gen_range(0..=paragraphs.len());
            paragraphs.insert(at, line);
        }
        context.push_str(&heading);
        context.push('\n');
        for p in paragraphs {
            context.push_str(&p);
            context.push('\n');
        }
    }

    let records: Vec<(String, String)> =
        companies.iter().zip(&values).map(|(c, v)| (c.clone(), plain_money(*v))).collect();
    let header = ["Company Name".to_string(), metric_title];
    let task = AnalysisTask { kind: qkind, key_column: header[0].clone(), value_column: header[1].clone() };
    let answer = ground_truth(&task, &header, &records);
    GeneratedSample {
        sample: BenchmarkSample {
            id: format!("sparse-{:04}", i),
            context_tokens: estimate_tokens(&context),
            context,
            question,
            reference_answer: answer,
            regime: Regime::NumericalSparse,
            task_type: Some(kind.sparse_task_type()),
        },
        task,
        header,
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordinals() {
        let got: Vec<String> = [1, 2, 3, 4, 11, 12, 13, 21, 22].iter().map(|&k| ordinal(k)).collect();
        assert_eq!(got, ["1st", "2nd", "3rd", "4th", "11th", "12th", "13th", "21st", "22nd"]);
    }

    #[test]
    fn leaders_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 1..5 {
            let mut v: Vec<i64> = (0..50).map(|_| rng.gen_range(19..=38)).collect();
            separate_leaders(&mut v, k, true, &mut rng);
            let mut s = v.clone();
            s.sort_unstable_by(|a, b| b.cmp(a));
            assert!(s[..=k].windows(2).all(|w| w[0] > w[1]), "{k}: {:?}", &s[..=k]);
            separate_leaders(&mut v, 1, false, &mut rng);
            let mut s = v.clone();
            s.sort_unstable();
            assert!(s[0] < s[1]);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec::dense(1, 0).validate(Regime::NumericalDense).is_ok());
        assert!(SynthSpec::sparse(1, 0).validate(Regime::NumericalSparse).is_ok());
        let mut s = SynthSpec::dense(1, 0);
        s.n_records = 1;
        assert!(s.validate(Regime::NumericalDense).is_err());
        let mut s = SynthSpec::dense(0, 0);
        assert!(s.validate(Regime::NumericalDense).is_err());
        s = SynthSpec::dense(1, 0);
        s.question_kinds = vec![SynthKind::ListAbove];
        assert!(s.validate(Regime::NumericalDense).is_err());
        s = SynthSpec::sparse(1, 0);
        s.n_records = 40;
        assert!(s.validate(Regime::NumericalSparse).is_err());
    }

    #[test]
    fn title_case_metrics() {
        assert_eq!(title_case("operating cash flow"), "Operating Cash Flow");
        assert_eq!(title_case("revenue"), "Revenue");
    }
}
