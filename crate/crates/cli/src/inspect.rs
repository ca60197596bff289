//! Stage-by-stage summary of a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use numpipe_core::gateway::{ChatExchange, CostLedger, ModelConfig, ModelRole, Pricing};
use numpipe_core::pipeline::Stage;
use serde_json::Value;

fn pricing(dir: &Path) -> BTreeMap<ModelRole, Pricing> {
    let from_run = std::fs::read(dir.join("run.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<Value>(&b).ok())
        .and_then(|v| serde_json::from_value::<CostLedger>(v["ledger"].clone()).ok())
        .map(|l| l.pricing)
        .filter(|p| !p.is_empty());
    from_run.unwrap_or_else(|| ModelRole::ALL.iter().map(|&r| (r, ModelConfig::default_for(r).pricing())).collect())
}

fn shorten(s: &str, max: usize) -> String {
    let one_line = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if one_line.chars().count() <= max {
        one_line
    } else {
        one_line.chars().take(max.saturating_sub(3)).collect::<String>() + "..."
    }
}

fn detail(stage: Stage, out: &Value) -> String {
    let len = |v: &Value| v.as_array().map_or(0, Vec::len);
    match stage {
        Stage::Analyze => {
            let header: Vec<&str> = out["header"].as_array().into_iter().flatten().filter_map(Value::as_str).collect();
            format!("columns: {}; key: {}", header.join(" | "), out["primary_key"].as_str().unwrap_or("?"))
        }
        Stage::Segment | Stage::Resegment => format!("{} chunks", len(out)),
        Stage::Filter => {
            let kept = out.as_array().into_iter().flatten().filter(|d| d["kept"] == Value::Bool(true)).count();
            format!("kept {kept} of {} chunks", len(out))
        }
        Stage::Extract => format!(
            "{} rows merged from {} extracted in {} tables; {} duplicates dropped",
            len(&out["table"]["rows"]),
            out["rows_extracted"],
            out["tables_extracted"],
            out["duplicates_dropped"]
        ),
        Stage::Process => {
            let attempts = out["attempts"].as_array().cloned().unwrap_or_default();
            let last = attempts.last().cloned().unwrap_or(Value::Null);
            format!(
                "script exit {} after {} attempt(s); answer: {}",
                last["exit_status"],
                attempts.len(),
                shorten(out["answer"].as_str().unwrap_or(""), 40)
            )
        }
        Stage::Conclude => shorten(out.as_str().unwrap_or(""), 60),
    }
}

/// Renders one row per stage. Fails when `dir` is missing or holds no stage
/// files.
pub fn inspect(dir: &Path) -> Result<String, String> {
    if !dir.is_dir() {
        return Err(format!("{} is not a directory", dir.display()));
    }
    let prices = pricing(dir);
    let mut rows: Vec<[String; 4]> = Vec::new();
    let mut found = 0;
    let mut failed: Option<String> = None;
    let mut total = CostLedger::new(prices.clone());
    for stage in Stage::ALL {
        let path = dir.join(stage.file_name());
        let Ok(bytes) = std::fs::read(&path) else {
            rows.push([stage.to_string(), "not run".into(), String::new(), String::new()]);
            continue;
        };
        let record: Value =
            serde_json::from_slice(&bytes).map_err(|e| format!("{} is not a stage record: {e}", path.display()))?;
        found += 1;
        let exchanges: Vec<ChatExchange> = serde_json::from_value(record["exchanges"].clone()).unwrap_or_default();
        let mut ledger = CostLedger::new(prices.clone());
        ledger.entries = exchanges;
        let cost: Vec<String> = ModelRole::ALL
            .iter()
            .filter(|r| ledger.calls(Some(**r)) > 0)
            .map(|r| format!("{r} ${}", ledger.total_cost(Some(*r)).to_decimal_string()))
            .collect();
        total.entries.extend(ledger.entries);
        let (status, text) = if record["failure"].is_null() {
            ("ok".to_string(), detail(stage, &record["output"]))
        } else {
            let f = &record["failure"];
            failed = Some(stage.to_string());
            (
                ">> FAILED".to_string(),
                format!("{}: {}", f["kind"].as_str().unwrap_or("?"), shorten(f["message"].as_str().unwrap_or(""), 60)),
            )
        };
        rows.push([stage.to_string(), status, text, cost.join(", ")]);
    }
    if found == 0 {
        return Err(format!("{} holds no stage records", dir.display()));
    }
    let header = ["stage", "status", "detail", "cost"];
    let widths: Vec<usize> =
        (0..4).map(|i| rows.iter().map(|r| r[i].chars().count()).chain([header[i].len()]).max().unwrap_or(0)).collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: [&str; 4]| {
        let _ = writeln!(
            out,
            "{:<w0$}  {:<w1$}  {:<w2$}  {}",
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2]
        );
    };
    line(&mut out, header);
    for r in &rows {
        line(&mut out, [&r[0], &r[1], &r[2], &r[3]]);
    }
    let by_role: Vec<String> = ModelRole::ALL
        .iter()
        .filter(|r| total.calls(Some(**r)) > 0)
        .map(|r| format!("{r} ${}", total.total_cost(Some(*r)).to_decimal_string()))
        .collect();
    let _ = writeln!(out, "total cost ${} ({})", total.total_cost(None).to_decimal_string(), by_role.join(", "));
    if let Some(stage) = failed {
        let _ = writeln!(out, "run failed at stage {stage}");
    }
    Ok(out)
}
