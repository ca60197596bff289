//! TOML configuration. Every section and field is optional; command-line
//! flags are applied on top by the caller.
//!
//! ```toml
//! [chunking]
//! filter_chunk_tokens = 1000
//! extract_chunk_tokens = 8000
//! boundary_policy = "line"        # or "paragraph"
//!
//! [run]
//! artifact_dir = "runs"
//! workers = 8
//! resume = true
//! preview_rows = 5
//!
//! [retries]
//! schema_repair = true
//! table_repair = true
//! code_repair = true
//! script_retry = true
//!
//! [sandbox]
//! interpreter = "python3"
//! timeout_ms = 60000
//! max_output_bytes = 1048576
//! max_concurrent = 4
//!
//! [models.main]                   # also extractor, filter, judge
//! endpoint = "https://api.example.com/v1/chat/completions"
//! model_name = "gemini-1.5-flash"
//! price_in = "5.00"               # dollars per million tokens
//! price_out = "15.00"
//!
//! [mock]
//! scenario = "scenario.json"
//! seed = 0
//! extract_corruption_rate = 0.1
//!
//! [eval]
//! method = "ours"                 # or "normal", "cot"
//! max_concurrent_samples = 4
//!
//! [synth]
//! seed = 7
//! n_records = 300
//! question_kinds = ["max", "min", "count_above", "kth_largest", "average"]
//! context_tokens = 100000         # sparse only
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunking::ChunkingConfig;
use crate::eval::{EvalOptions, Method, SynthKind};
use crate::gateway::{MockScenario, ModelConfig, ModelRole, ScenarioError};
use crate::parsers::{ParseError, Templates};
use crate::pipeline::{Pipeline, PipelineConfig, PipelineError, RetryPolicy, SandboxSettings};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Templates(#[from] ParseError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub artifact_dir: Option<PathBuf>,
    pub workers: usize,
    pub resume: bool,
    pub preview_rows: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self { artifact_dir: p.artifact_dir, workers: p.workers, resume: p.resume, preview_rows: p.preview_rows }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    /// Scenario file; the built-in scenario when absent.
    pub scenario: Option<PathBuf>,
    pub seed: Option<u64>,
    pub extract_corruption_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub method: Method,
    pub max_concurrent_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { method: Method::Ours, max_concurrent_samples: EvalOptions::default().max_concurrent_samples }
    }
}

impl EvalSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions { max_concurrent_samples: self.max_concurrent_samples }
    }
}

/// Defaults for generated datasets; unset fields fall back to the regime's
/// own defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub n_records: Option<usize>,
    pub question_kinds: Option<Vec<SynthKind>>,
    pub context_tokens: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    chunking: ChunkingConfig,
    run: RunSection,
    retries: RetryPolicy,
    sandbox: SandboxSettings,
    models: BTreeMap<ModelRole, toml::Table>,
    mock: MockSection,
    eval: EvalSection,
    synth: SynthSection,
    /// Directory of prompt template overrides.
    templates: Option<PathBuf>,
}

/// Resolved configuration: defaults overlaid with the file.
#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub pipeline: PipelineConfig,
    pub mock: MockSection,
    pub eval: EvalSection,
    pub synth: SynthSection,
    pub templates_dir: Option<PathBuf>,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            mock: MockSection::default(),
            eval: EvalSection::default(),
            synth: SynthSection::default(),
            templates_dir: None,
        }
    }
}

/// `ModelConfig::default_for(role)` with the given keys replaced.
fn merge_model(role: ModelRole, overrides: &toml::Table) -> Result<ModelConfig, ConfigError> {
    let defaults = toml::Table::try_from(ModelConfig::default_for(role)).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let mut merged = defaults;
    for (k, v) in overrides {
        if k == "role" {
            return Err(ConfigError::Parse(format!("models.{role}: the role is implied by the section name")));
        }
        merged.insert(k.clone(), v.clone());
    }
    let m: ModelConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(format!("models.{role}: {}", e.message())))?;
    Ok(m)
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut models: BTreeMap<ModelRole, ModelConfig> =
            ModelRole::ALL.iter().map(|&r| (r, ModelConfig::default_for(r))).collect();
        for (role, table) in &raw.models {
            models.insert(*role, merge_model(*role, table)?);
        }
        let pipeline = PipelineConfig {
            chunking: raw.chunking,
            models,
            retries: raw.retries,
            sandbox: raw.sandbox,
            artifact_dir: raw.run.artifact_dir,
            workers: raw.run.workers,
            resume: raw.run.resume,
            preview_rows: raw.run.preview_rows,
        };
        Ok(Self { pipeline, mock: raw.mock, eval: raw.eval, synth: raw.synth, templates_dir: raw.templates })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut().filter(|x| x.is_relative()) {
                *x = base.join(&*x);
            }
        };
        rebase(&mut cfg.pipeline.artifact_dir);
        rebase(&mut cfg.mock.scenario);
        rebase(&mut cfg.templates_dir);
        Ok(cfg)
    }

    pub fn scenario(&self) -> Result<MockScenario, ConfigError> {
        let mut s = match &self.mock.scenario {
            Some(p) => MockScenario::from_path(p)?,
            None => MockScenario::builtin(),
        };
        if let Some(seed) = self.mock.seed {
            s = s.with_seed(seed);
        }
        if let Some(rate) = self.mock.extract_corruption_rate {
            s = s.with_corruption_rate(rate)?;
        }
        Ok(s)
    }

    pub fn templates(&self) -> Result<Templates, ConfigError> {
        Ok(match &self.templates_dir {
            Some(dir) => Templates::with_overrides(dir)?,
            None => Templates::builtin(),
        })
    }

    pub fn build_pipeline(&self) -> Result<Pipeline, ConfigError> {
        Ok(Pipeline::new(self.pipeline.clone(), Arc::new(self.scenario()?), self.templates()?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Money;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(AppConfig::from_toml("").unwrap(), AppConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let c = AppConfig::from_toml(
            r#"
            templates = "prompts"
            [chunking]
            filter_chunk_tokens = 500
            [run]
            workers = 2
            resume = false
            [sandbox]
            interpreter = "python3"
            timeout_ms = 1000
            [retries]
            script_retry = false
            [models.main]
            model_name = "other"
            price_in = "2.50"
            context_window_tokens = 128000
            [models.extractor]
            price_out = 0.4
            [mock]
            seed = 9
            extract_corruption_rate = 0.1
            [eval]
            max_concurrent_samples = 1
            method = "cot"
            [synth]
            seed = 4
            question_kinds = ["max", "average"]
            "#,
        )
        .unwrap();
        let p = &c.pipeline;
        assert_eq!(p.chunking.filter_chunk_tokens, 500);
        assert_eq!(p.chunking.extract_chunk_tokens, 8000);
        assert_eq!((p.workers, p.resume), (2, false));
        assert_eq!(p.sandbox.interpreter.as_deref(), Some("python3"));
        assert_eq!(p.sandbox.limits().timeout_ms, 1000);
        assert!(!p.retries.script_retry && p.retries.table_repair);
        let main = &p.models[&ModelRole::Main];
        assert_eq!(main.model_name, "other");
        assert_eq!(main.price_in, "2.50".parse::<Money>().unwrap());
        assert_eq!(main.price_out, ModelConfig::default_for(ModelRole::Main).price_out);
        assert_eq!(main.context_window_tokens, Some(128_000));
        assert_eq!(p.models[&ModelRole::Extractor].price_out, "0.40".parse::<Money>().unwrap());
        assert_eq!(c.mock.seed, Some(9));
        assert_eq!(c.eval.max_concurrent_samples, 1);
        assert_eq!(c.eval.method, Method::CotPrompt);
        assert_eq!(c.synth.seed, 4);
        assert_eq!(c.synth.question_kinds, Some(vec![SynthKind::Max, SynthKind::Average]));
        assert_eq!(c.templates_dir, Some(PathBuf::from("prompts")));
        assert_eq!(c.scenario().unwrap().corruption_rate(), 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["[chunking]\nsize = 3", "[models.main]\nmodle_name = \"x\"", "[models.boss]\nmodel_name = \"x\"", "[nope]", "[models.main]\nrole = \"judge\""] {
            assert!(AppConfig::from_toml(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[run]\nartifact_dir = \"runs\"\n").unwrap();
        let c = AppConfig::load(&path).unwrap();
        assert_eq!(c.pipeline.artifact_dir, Some(dir.path().join("runs")));
        assert!(matches!(AppConfig::load(&dir.path().join("missing.toml")), Err(ConfigError::Io { .. })));
    }
}
