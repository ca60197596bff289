//! Question kinds the workflow is exercised on, with an exact in-process
//! answer for each and the pandas script a code-writing model would return.
//!
//! Both sides use the same conventions: values are cells matching
//! `-?[0-9]+(\.[0-9]+)?` (others are skipped), ties keep table order,
//! averages are rounded half away from zero to two places, name lists for
//! thresholds are sorted.

use std::cmp::Ordering;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::tabular::DataTable;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuestionKind {
    Max,
    Min,
    TopK { k: usize },
    KthLargest { k: usize },
    CountAbove { threshold: String },
    Sum,
    Average,
    ListAbove { threshold: String },
}

impl QuestionKind {
    pub fn name(&self) -> &'static str {
        match self {
            QuestionKind::Max => "max",
            QuestionKind::Min => "min",
            QuestionKind::TopK { .. } => "top_k",
            QuestionKind::KthLargest { .. } => "kth_largest",
            QuestionKind::CountAbove { .. } => "count_above",
            QuestionKind::Sum => "sum",
            QuestionKind::Average => "average",
            QuestionKind::ListAbove { .. } => "list_above",
        }
    }
}

/// A question kind bound to the columns it reads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisTask {
    pub kind: QuestionKind,
    pub key_column: String,
    pub value_column: String,
}

pub const NO_DATA: &str = "no data";
pub const NONE_MATCHED: &str = "none";

/// Exact decimal: the value and the number of fractional digits it was
/// written with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decimal {
    value: BigRational,
    scale: u32,
}

impl Decimal {
    pub fn parse(text: &str) -> Option<Self> {
        let t = text.trim();
        let (neg, digits) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t),
        };
        let (int, frac) = match digits.split_once('.') {
            Some((i, f)) => (i, f),
            None => (digits, ""),
        };
        let ok = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
        if !ok(int) || (digits.contains('.') && !ok(frac)) {
            return None;
        }
        let mantissa: BigInt = format!("{int}{frac}").parse().ok()?;
        let scale = frac.len() as u32;
        let value = BigRational::new(mantissa, BigInt::from(10u32).pow(scale));
        Some(Self { value: if neg { -value } else { value }, scale })
    }

    fn from_ratio(value: BigRational, scale: u32) -> Self {
        Self { value, scale }
    }

    /// Plain notation with exactly `scale` fractional digits (the value must
    /// be representable at that scale).
    pub fn to_plain(&self) -> String {
        let factor = BigInt::from(10u32).pow(self.scale);
        let scaled = (&self.value * BigRational::from_integer(factor.clone())).to_integer();
        let neg = scaled.is_negative();
        let digits = scaled.abs().to_string();
        let s = self.scale as usize;
        let body = if s == 0 {
            digits
        } else {
            let padded = format!("{digits:0>width$}", width = s + 1);
            let (i, f) = padded.split_at(padded.len() - s);
            format!("{i}.{f}")
        };
        if neg {
            format!("-{body}")
        } else {
            body
        }
    }

    /// Rounds to `places` digits, ties away from zero.
    pub fn round_half_up(&self, places: u32) -> Self {
        let factor = BigRational::from_integer(BigInt::from(10u32).pow(places));
        let scaled = &self.value * &factor;
        let half = BigRational::new(BigInt::one(), BigInt::from(2));
        let magnitude = (scaled.abs() + half).floor();
        let rounded = if scaled.is_negative() { -magnitude } else { magnitude };
        Self::from_ratio(rounded / factor, places)
    }
}

impl PartialOrd for Decimal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.value.cmp(&other.value))
    }
}

fn numeric_rows(table: &DataTable, task: &AnalysisTask) -> Vec<(String, Decimal)> {
    let (Some(k), Some(v)) = (table.column_index(&task.key_column), table.column_index(&task.value_column)) else {
        return Vec::new();
    };
    table
        .rows()
        .iter()
        .filter_map(|r| Decimal::parse(&r[v]).map(|d| (r[k].clone(), d)))
        .collect()
}

fn ranked_desc(rows: &[(String, Decimal)]) -> Vec<(String, Decimal)> {
    let mut ranked = rows.to_vec();
    ranked.sort_by(|a, b| b.1.value.cmp(&a.1.value));
    ranked
}

/// The answer the canned script prints for `task` over `table`, computed in
/// process.
pub fn reference_answer(task: &AnalysisTask, table: &DataTable) -> String {
    let rows = numeric_rows(table, task);
    match &task.kind {
        QuestionKind::Max => rows
            .iter()
            .fold(None::<&(String, Decimal)>, |best, r| match best {
                Some(b) if r.1.value <= b.1.value => Some(b),
                _ => Some(r),
            })
            .map_or_else(|| NO_DATA.to_string(), |r| r.0.clone()),
        QuestionKind::Min => rows
            .iter()
            .fold(None::<&(String, Decimal)>, |best, r| match best {
                Some(b) if r.1.value >= b.1.value => Some(b),
                _ => Some(r),
            })
            .map_or_else(|| NO_DATA.to_string(), |r| r.0.clone()),
        QuestionKind::TopK { k } => {
            let ranked = ranked_desc(&rows);
            if ranked.is_empty() {
                NO_DATA.to_string()
            } else {
                ranked.iter().take(*k).map(|r| r.0.as_str()).collect::<Vec<_>>().join(", ")
            }
        }
        QuestionKind::KthLargest { k } => {
            let ranked = ranked_desc(&rows);
            match k.checked_sub(1).and_then(|i| ranked.get(i)) {
                Some(r) => r.0.clone(),
                None => NO_DATA.to_string(),
            }
        }
        QuestionKind::CountAbove { threshold } => {
            let Some(t) = Decimal::parse(threshold) else { return "0".into() };
            rows.iter().filter(|r| r.1.value > t.value).count().to_string()
        }
        QuestionKind::Sum => sum(&rows).to_plain(),
        QuestionKind::Average => {
            if rows.is_empty() {
                return NO_DATA.to_string();
            }
            let total = sum(&rows);
            let mean = total.value / BigRational::from_integer(BigInt::from(rows.len()));
            Decimal::from_ratio(mean, 0).round_half_up(2).to_plain()
        }
        QuestionKind::ListAbove { threshold } => {
            let Some(t) = Decimal::parse(threshold) else { return NONE_MATCHED.into() };
            let mut names: Vec<&str> =
                rows.iter().filter(|r| r.1.value > t.value).map(|r| r.0.as_str()).collect();
            names.sort();
            if names.is_empty() {
                NONE_MATCHED.to_string()
            } else {
                names.join(", ")
            }
        }
    }
}

fn sum(rows: &[(String, Decimal)]) -> Decimal {
    let scale = rows.iter().map(|r| r.1.scale).max().unwrap_or(0);
    let value = rows.iter().fold(BigRational::zero(), |acc, r| acc + &r.1.value);
    Decimal::from_ratio(value, scale)
}

fn py_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// The analysis script for `task`: loads `data.json`, computes the answer,
/// writes `data_p.json` and `code_answer.txt`, prints the answer.
pub fn canned_script(task: &AnalysisTask) -> String {
    let body = match &task.kind {
        QuestionKind::Max | QuestionKind::Min => {
            let f = if task.kind == QuestionKind::Max { "max" } else { "min" };
            format!(
                "if rows:\n    best = {f}(rows, key=lambda r: r[1])\n    final_answer = best[0]\n    result_rows = [(best[0], str(best[1]))]\nelse:\n    final_answer = \"{NO_DATA}\"\n    result_rows = []\n"
            )
        }
        QuestionKind::TopK { k } => format!(
            "ranked = sorted(rows, key=lambda r: r[1], reverse=True)[:{k}]\nresult_rows = [(name, str(v)) for name, v in ranked]\nfinal_answer = \", \".join(name for name, _ in ranked) if ranked else \"{NO_DATA}\"\n"
        ),
        QuestionKind::KthLargest { k } => format!(
            "ranked = sorted(rows, key=lambda r: r[1], reverse=True)\nresult_rows = [(name, str(v)) for name, v in ranked]\nfinal_answer = ranked[{k} - 1][0] if 0 < {k} <= len(ranked) else \"{NO_DATA}\"\n"
        ),
        QuestionKind::CountAbove { threshold } => format!(
            "matched = [(name, v) for name, v in rows if v > Decimal({t})]\nresult_rows = [(name, str(v)) for name, v in matched]\nfinal_answer = str(len(matched))\n",
            t = py_str(threshold)
        ),
        QuestionKind::Sum => "total = sum((v for _, v in rows), Decimal(0))\nresult_rows = [(name, str(v)) for name, v in rows]\nfinal_answer = format(total, \"f\")\n".to_string(),
        QuestionKind::Average => format!(
            "result_rows = [(name, str(v)) for name, v in rows]\nif rows:\n    total = sum((v for _, v in rows), Decimal(0))\n    mean = (total / Decimal(len(rows))).quantize(Decimal(\"0.01\"), rounding=ROUND_HALF_UP)\n    final_answer = format(mean, \"f\")\nelse:\n    final_answer = \"{NO_DATA}\"\n"
        ),
        QuestionKind::ListAbove { threshold } => format!(
            "matched = sorted(name for name, v in rows if v > Decimal({t}))\nresult_rows = [(name, \"\") for name in matched]\nfinal_answer = \", \".join(matched) if matched else \"{NONE_MATCHED}\"\n",
            t = py_str(threshold)
        ),
    };
    format!(
        r#"import re
from decimal import Decimal, ROUND_HALF_UP

import pandas as pd

df = pd.read_json("./data.json", dtype=False)
key_col = {key}
value_col = {value}

number = re.compile(r"-?[0-9]+(\.[0-9]+)?")
rows = []
if key_col in df.columns and value_col in df.columns:
    for key, raw in zip(df[key_col], df[value_col]):
        text = str(raw).strip()
        if number.fullmatch(text):
            rows.append((str(key), Decimal(text)))

{body}
pd.DataFrame(result_rows, columns=[key_col, value_col]).to_json("./data_p.json")
print(final_answer)
with open("./code_answer.txt", "w", encoding="utf-8") as f:
    f.write(final_answer)
"#,
        key = py_str(&task.key_column),
        value = py_str(&task.value_column),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn students(rows: &[(&str, &str)]) -> DataTable {
        DataTable::new(vec!["Student Name".into(), "Age".into()], 0)
            .unwrap()
            .with_rows(rows.iter().map(|(a, b)| vec![a.to_string(), b.to_string()]).collect())
            .unwrap()
    }

    fn task(kind: QuestionKind) -> AnalysisTask {
        AnalysisTask { kind, key_column: "Student Name".into(), value_column: "Age".into() }
    }

    #[test]
    fn oldest_student() {
        let t = students(&[("Hallie Turner", "21"), ("Sonali Jain", "25"), ("Jack Smith", "19")]);
        assert_eq!(reference_answer(&task(QuestionKind::Max), &t), "Sonali Jain");
        assert_eq!(reference_answer(&task(QuestionKind::Min), &t), "Jack Smith");
        assert_eq!(reference_answer(&task(QuestionKind::TopK { k: 2 }), &t), "Sonali Jain, Hallie Turner");
        assert_eq!(reference_answer(&task(QuestionKind::KthLargest { k: 3 }), &t), "Jack Smith");
        assert_eq!(reference_answer(&task(QuestionKind::KthLargest { k: 4 }), &t), NO_DATA);
        assert_eq!(reference_answer(&task(QuestionKind::CountAbove { threshold: "20".into() }), &t), "2");
        assert_eq!(reference_answer(&task(QuestionKind::Sum), &t), "65");
        assert_eq!(reference_answer(&task(QuestionKind::Average), &t), "21.67");
        assert_eq!(
            reference_answer(&task(QuestionKind::ListAbove { threshold: "20".into() }), &t),
            "Hallie Turner, Sonali Jain"
        );
    }

    #[test]
    fn ties_keep_table_order() {
        let t = students(&[("A", "30"), ("B", "30"), ("C", "10"), ("D", "10")]);
        assert_eq!(reference_answer(&task(QuestionKind::Max), &t), "A");
        assert_eq!(reference_answer(&task(QuestionKind::Min), &t), "C");
        assert_eq!(reference_answer(&task(QuestionKind::TopK { k: 3 }), &t), "A, B, C");
    }

    #[test]
    fn decimals_and_rounding() {
        let t = students(&[("A", "1.10"), ("B", "2.2"), ("C", "x"), ("D", "-0.005")]);
        assert_eq!(reference_answer(&task(QuestionKind::Sum), &t), "3.295");
        // 3.295 / 3 = 1.0983.. -> 1.10
        assert_eq!(reference_answer(&task(QuestionKind::Average), &t), "1.10");
        let half = students(&[("A", "0.125")]);
        assert_eq!(reference_answer(&task(QuestionKind::Average), &half), "0.13");
        let neg = students(&[("A", "-0.125")]);
        assert_eq!(reference_answer(&task(QuestionKind::Average), &neg), "-0.13");
    }

    #[test]
    fn empty_tables() {
        let t = students(&[]);
        assert_eq!(reference_answer(&task(QuestionKind::Max), &t), NO_DATA);
        assert_eq!(reference_answer(&task(QuestionKind::Sum), &t), "0");
        assert_eq!(reference_answer(&task(QuestionKind::Average), &t), NO_DATA);
        assert_eq!(reference_answer(&task(QuestionKind::CountAbove { threshold: "1".into() }), &t), "0");
        assert_eq!(reference_answer(&task(QuestionKind::ListAbove { threshold: "1".into() }), &t), NONE_MATCHED);
    }

    #[test]
    fn decimal_parsing() {
        assert!(Decimal::parse("12").is_some());
        assert!(Decimal::parse("-3.50").is_some());
        for bad in ["", "1.", ".5", "1e3", "NaN", "1,000", "--1", "٣"] {
            assert!(Decimal::parse(bad).is_none(), "{bad}");
        }
        assert_eq!(Decimal::parse("-3.50").unwrap().to_plain(), "-3.50");
        assert_eq!(Decimal::parse("0.05").unwrap().to_plain(), "0.05");
    }

    #[test]
    fn script_mentions_interchange_files() {
        let s = canned_script(&task(QuestionKind::Max));
        assert!(s.contains("pd.read_json(\"./data.json\", dtype=False)"));
        assert!(s.contains("to_json(\"./data_p.json\")"));
        assert!(s.contains("./code_answer.txt"));
        assert!(s.contains("key_col = \"Student Name\""));
    }
}
