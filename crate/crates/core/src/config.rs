//! Pipeline configuration and its flat `key = value` file format.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. The same keys are accepted as command-line overrides.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::evaluate::EvalOptions;
use crate::frequency::FrequencyConfig;
use crate::metrics::{CostModel, Money};
use crate::reference::{CopyScope, ReferenceConfig};
use crate::span::Module;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: bad value {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub index_in: Option<PathBuf>,
    pub index_out: Option<PathBuf>,
    pub modules: Vec<Module>,
    pub workers: usize,
    pub seed: u64,
    pub reference: ReferenceConfig,
    pub frequency: FrequencyConfig,
    /// Shards for the chunk index build; 0 means one per worker.
    pub frequency_shards: usize,
    pub marker: Option<String>,
    pub eval: EvalOptions,
    pub cost: CostModel,
    pub exact_tokens: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: None,
            output_dir: None,
            index_in: None,
            index_out: None,
            modules: vec![Module::Reference, Module::Frequency],
            workers: std::thread::available_parallelism().map_or(1, usize::from),
            seed: 0,
            reference: ReferenceConfig::default(),
            frequency: FrequencyConfig::default(),
            frequency_shards: 0,
            marker: None,
            eval: EvalOptions::default(),
            cost: CostModel::default(),
            exact_tokens: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "input",
    "output_dir",
    "index_in",
    "index_out",
    "modules",
    "workers",
    "seed",
    "reference.min_span_chars",
    "reference.copy_scope",
    "frequency.patient_threshold",
    "frequency.per_patient_threshold",
    "frequency.min_nonspace_chars",
    "frequency.shards",
    "condense.marker",
    "eval.min_gold_span",
    "eval.module",
    "eval.bootstrap_resamples",
    "eval.confidence",
    "cost.chars_per_token",
    "cost.price_per_mtok",
    "cost.encounters",
    "cost.queries_per_encounter",
    "cost.exact_tokens",
];

/// Splits config text into ordered `(key, value)` pairs.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_owned(),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_owned(),
            });
        }
        out.push((key.to_owned(), value.trim().to_owned()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_owned(),
        value: value.to_owned(),
        reason: e.to_string(),
    })
}

fn optional(value: &str) -> Option<&str> {
    match value {
        "" | "none" => None,
        v => Some(v),
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        config.apply_file(path)?;
        Ok(config)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for (k, v) in parse_config_text(&text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let path = |v: &str| optional(v).map(PathBuf::from);
        match key {
            "input" => self.input = path(value),
            "output_dir" => self.output_dir = path(value),
            "index_in" => self.index_in = path(value),
            "index_out" => self.index_out = path(value),
            "modules" => {
                let mut modules = value
                    .split(',')
                    .filter(|m| !m.trim().is_empty())
                    .map(|m| parse::<Module>(key, m))
                    .collect::<Result<Vec<_>, _>>()?;
                modules.sort();
                modules.dedup();
                self.modules = modules;
            }
            "workers" => self.workers = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "reference.min_span_chars" => self.reference.min_span_chars = parse(key, value)?,
            "reference.copy_scope" => self.reference.copy_scope = parse::<CopyScope>(key, value)?,
            "frequency.patient_threshold" => self.frequency.patient_threshold = parse(key, value)?,
            "frequency.per_patient_threshold" => self.frequency.per_patient_threshold = parse(key, value)?,
            "frequency.min_nonspace_chars" => self.frequency.min_nonspace_chars = parse(key, value)?,
            "frequency.shards" => self.frequency_shards = parse(key, value)?,
            "condense.marker" => self.marker = optional(value).map(str::to_owned),
            "eval.min_gold_span" => self.eval.min_gold_span = parse(key, value)?,
            "eval.module" => self.eval.module = optional(value).map(|m| parse::<Module>(key, m)).transpose()?,
            "eval.bootstrap_resamples" => self.eval.bootstrap_resamples = parse(key, value)?,
            "eval.confidence" => self.eval.confidence = parse(key, value)?,
            "cost.chars_per_token" => self.cost.chars_per_token = parse(key, value)?,
            "cost.price_per_mtok" => {
                self.cost.price_per_million_tokens = Money::from_dollars(parse(key, value.trim_start_matches('$'))?)
            }
            "cost.encounters" => self.cost.encounters_per_year = parse(key, value)?,
            "cost.queries_per_encounter" => self.cost.queries_per_encounter = parse(key, value)?,
            "cost.exact_tokens" => self.exact_tokens = optional(value).map(|v| parse(key, v)).transpose()?,
            other => return Err(ConfigError::UnknownKey(other.to_owned())),
        }
        if key == "seed" {
            self.eval.seed = self.seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError::Invalid(msg.to_owned()));
        if self.reference.min_span_chars == 0 {
            return fail("reference.min_span_chars must be positive");
        }
        if self.frequency.min_nonspace_chars == 0 {
            return fail("frequency.min_nonspace_chars must be positive");
        }
        if self.frequency.patient_threshold == 0 || self.frequency.per_patient_threshold == 0 {
            return fail("frequency thresholds must be positive");
        }
        if self.workers == 0 {
            return fail("workers must be positive");
        }
        if self.modules.is_empty() {
            return fail("at least one module must be enabled");
        }
        if !(self.eval.confidence > 0.0 && self.eval.confidence < 1.0) {
            return fail("eval.confidence must lie in (0, 1)");
        }
        self.cost.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let (Some(input), Some(out)) = (&self.input, &self.output_dir) {
            if input == out {
                return fail("input and output paths must differ");
            }
        }
        Ok(())
    }

    pub fn uses(&self, module: Module) -> bool {
        self.modules.contains(&module)
    }

    pub fn shards(&self) -> usize {
        if self.frequency_shards == 0 {
            self.workers
        } else {
            self.frequency_shards
        }
    }
}
