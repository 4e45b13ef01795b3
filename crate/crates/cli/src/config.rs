//! Experiment configuration files.
//!
//! A config is a JSON object with a `schema_version`, the pipeline settings,
//! and an optional section per experiment kind. Unknown keys are rejected.
//! Relative paths resolve against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tso_core::learner::LearnerSpec;
use tso_core::pipeline::PipelineConfig;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    /// dataset directory; required by tiny-neural learners
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub ablation: Option<AblationConfig>,
    #[serde(default)]
    pub transfer: Option<TransferConfig>,
    #[serde(default)]
    pub sensitivity: Option<SensitivityConfig>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthPair {
    pub length: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub pairs: Vec<LengthPair>,
    /// item count for oracle learners; dataset runs take it from the manifest
    #[serde(default)]
    pub n_items: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// the second learner; the first is `pipeline.learner`
    pub other: LearnerSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SensitivityConfig {
    /// oracle sensitivity coefficients
    Alphas(Vec<f64>),
    /// hidden-layer widths of tiny-neural learners
    Widths(Vec<Vec<usize>>),
}

/// A parsed config together with its source text, for error anchoring.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub text: String,
    pub config: ExperimentConfig,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(path, None, e.to_string()))?;
        let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            let at = (e.line() > 0).then(|| (e.line(), e.column()));
            CliError::config(path, at, e.to_string())
        })?;
        let loaded = Self {
            path: path.to_path_buf(),
            text,
            config,
        };
        loaded.validate()?;
        Ok(loaded)
    }

    /// Error anchored at the first line mentioning `"key"`.
    pub fn error_at(&self, key: &str, message: impl Into<String>) -> CliError {
        let needle = format!("\"{key}\"");
        let at = self
            .text
            .lines()
            .position(|l| l.contains(&needle))
            .map(|i| (i + 1, self.text.lines().nth(i).unwrap().find(&needle).unwrap() + 1));
        CliError::config(&self.path, at, message.into())
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        if c.schema_version != SCHEMA_VERSION {
            return Err(self.error_at(
                "schema_version",
                format!(
                    "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                    c.schema_version
                ),
            ));
        }
        if c.seeds.is_empty() {
            return Err(self.error_at("seeds", "`seeds` must not be empty"));
        }
        if c.pipeline.learner.needs_dataset() && c.dataset.is_none() {
            return Err(self.error_at(
                "learner",
                "missing field `dataset`: the tiny-neural learner needs a dataset directory",
            ));
        }
        c.pipeline
            .validate()
            .map_err(|e| self.error_at("pipeline", format!("invalid `pipeline`: {e}")))?;
        if let Some(t) = &c.transfer {
            t.other
                .validate()
                .map_err(|e| self.error_at("other", format!("invalid `transfer.other`: {e}")))?;
            if t.other.needs_dataset() && c.dataset.is_none() {
                return Err(self.error_at(
                    "other",
                    "missing field `dataset`: the tiny-neural learner needs a dataset directory",
                ));
            }
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> Option<PathBuf> {
        self.config.dataset.as_ref().map(|d| self.resolve(d))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    /// Section `key`, or a config error naming it.
    pub fn section<'a, T>(&self, value: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
        value.as_ref().ok_or_else(|| {
            CliError::config(
                &self.path,
                None,
                format!("missing field `{key}` required by this command"),
            )
        })
    }
}
