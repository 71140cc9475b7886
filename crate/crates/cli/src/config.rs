//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use amskv_core::{
    derive_budgets, BudgetRule, BudgetSpec, MemoryModel, PolicyKind, ScaleSchedule, ThetaMode,
    ToyModelConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    JsonLines,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<ReportFormat>,
    /// Width of the local scale group seen by ablations.
    #[serde(default = "default_n_local")]
    pub n_local: usize,
    /// Run the full-cache oracle alongside every policy.
    #[serde(default = "default_true")]
    pub compare_oracle: bool,
    pub model: ModelSection,
    #[serde(default)]
    pub budget: BudgetSection,
    #[serde(default)]
    pub memory: MemorySection,
    pub policies: Vec<PolicyEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "ScaleSchedule::var_default")]
    pub schedule: ScaleSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleName {
    #[default]
    Default,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    #[serde(default)]
    pub rule: RuleName,
    pub c_min: Option<usize>,
    pub c_max: Option<usize>,
    /// Pinned leading scales; with the default rule the budgets stay as
    /// derived and only the pinned count changes.
    pub condensed_count: Option<usize>,
    #[serde(default)]
    pub theta: ThetaMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySection {
    #[serde(default = "default_bpe")]
    pub bytes_per_element: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            bytes_per_element: default_bpe(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_min: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condensed_count: Option<usize>,
    #[serde(flatten)]
    pub policy: PolicyKind,
}

impl PolicyEntry {
    pub fn new(policy: PolicyKind) -> Self {
        Self {
            label: None,
            c_min: None,
            c_max: None,
            condensed_count: None,
            policy,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.policy.label())
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Csv]
}
fn default_n_local() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_bpe() -> usize {
    2
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("field `{name}`: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| CliError::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(field(
                "schema_version",
                format!(
                    "unsupported version {} (expected {CONFIG_SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        if self.seeds.is_empty() {
            return Err(field("seeds", "at least one seed is required"));
        }
        if self.policies.is_empty() {
            return Err(field("policies", "at least one policy is required"));
        }
        if self.memory.bytes_per_element == 0 {
            return Err(field("memory.bytes_per_element", "must be positive"));
        }
        self.model_config(self.seeds[0])
            .validate()
            .map_err(|e| field("model", e))?;
        let mut labels = std::collections::BTreeSet::new();
        for (i, p) in self.policies.iter().enumerate() {
            p.policy
                .validate()
                .map_err(|e| field(&format!("policies[{i}]"), e))?;
            self.spec_for(i)?;
            if !labels.insert(p.label()) {
                return Err(field(
                    &format!("policies[{i}].label"),
                    format!("duplicate label `{}`", p.label()),
                ));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, seed: u64) -> ToyModelConfig {
        ToyModelConfig {
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            head_dim: self.model.head_dim,
            vocab_size: self.model.vocab_size,
            schedule: self.model.schedule.clone(),
            seed,
        }
    }

    pub fn memory_model(&self) -> MemoryModel {
        MemoryModel {
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            head_dim: self.model.head_dim,
            bytes_per_element: self.memory.bytes_per_element,
        }
    }

    /// Budget of the experiment before per-policy overrides.
    pub fn base_spec(&self) -> Result<BudgetSpec, CliError> {
        let schedule = &self.model.schedule;
        let b = &self.budget;
        let mut spec = match b.rule {
            RuleName::Default => {
                if b.c_min.is_some() || b.c_max.is_some() {
                    return Err(field(
                        "budget.c_min",
                        "explicit budgets need rule = \"explicit\"",
                    ));
                }
                let mut s = derive_budgets(schedule, &BudgetRule::Default)
                    .map_err(|e| field("budget.rule", e))?;
                if let Some(c) = b.condensed_count {
                    s.condensed_count = c;
                }
                s
            }
            RuleName::Explicit => BudgetSpec {
                c_min: b
                    .c_min
                    .ok_or_else(|| field("budget.c_min", "required by the explicit rule"))?,
                c_max: b
                    .c_max
                    .ok_or_else(|| field("budget.c_max", "required by the explicit rule"))?,
                condensed_count: b.condensed_count.unwrap_or(2),
                theta: b.theta,
            },
        };
        spec.theta = b.theta;
        spec.validate(schedule).map_err(|e| field("budget", e))?;
        Ok(spec)
    }

    /// Budget of the `i`-th policy with its overrides applied.
    pub fn spec_for(&self, i: usize) -> Result<BudgetSpec, CliError> {
        let mut spec = self.base_spec()?;
        let p = &self.policies[i];
        if let Some(v) = p.c_min {
            spec.c_min = v;
        }
        if let Some(v) = p.c_max {
            spec.c_max = v;
        }
        if let Some(v) = p.condensed_count {
            spec.condensed_count = v;
        }
        spec.validate(&self.model.schedule)
            .map_err(|e| field(&format!("policies[{i}]"), e))?;
        Ok(spec)
    }

    /// SHA-256 of the canonical JSON form (sorted keys), output directory
    /// excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let value = serde_json::to_value(&c).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
