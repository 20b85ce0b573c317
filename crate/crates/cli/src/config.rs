//! Run configuration: one TOML file with a section per subcommand.
//!
//! ```toml
//! seed = 7
//! out = "runs/demo"
//!
//! [train]
//! train_frac = 0.9
//! [train.data]
//! kind = "csv"
//! path = "data/concrete.csv"
//! target = "strength"
//! [train.fit]
//! objective = "rber"
//! lambda = 0.05
//! ```
//!
//! Every section is optional and falls back to its defaults. Unknown keys
//! anywhere are rejected. The global `seed` (or `--seed`) is authoritative:
//! it overwrites the seed fields inside the sections.

use std::path::{Path, PathBuf};

use berlab_core::bandit::AgentConfig;
use berlab_core::nn::Activation;
use berlab_core::objectives::{ObjectiveKind, TrainConfig};
use berlab_core::scan::ScanConfig;
use berlab_core::study::StudyConfig;
use berlab_core::verify::VerifyConfig;
use berlab_core::IntervalMethod;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub toy: StudyConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub lambda_scan: ScanConfig,
    #[serde(default)]
    pub bandit: BanditSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text)
    }

    /// Keys missing from the file take the value of the corresponding
    /// default section, so a partial `[train.fit]` keeps e.g. the train
    /// command's 300 epochs rather than the library default.
    pub fn parse(text: &str) -> Result<Self, String> {
        let user: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| e.to_string())?;
        merge(&mut base, user);
        toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| e.to_string())
    }

    /// Fix the global seed and push it into every section.
    pub fn resolve_seed(&mut self, cli_seed: Option<u64>) -> u64 {
        let seed = cli_seed.or(self.seed).unwrap_or(0);
        self.seed = Some(seed);
        self.toy.seed = seed;
        self.verify.seed = seed;
        self.train.fit.seed = seed;
        self.lambda_scan.seed = seed;
        self.bandit.agent.train.seed = seed;
        seed
    }

    pub fn to_toml(&self) -> Result<String, String> {
        toml::to_string(self).map_err(|e| e.to_string())
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => {
                // a different variant of a tagged enum replaces the default wholesale
                if u.get("kind").is_some_and(|kind| b.get("kind") != Some(kind)) {
                    *b = u;
                } else {
                    merge(b, u);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TrainData {
    Cubic {
        n: usize,
    },
    Teacher {
        n: usize,
        layer_widths: Vec<usize>,
        activation: Activation,
        noise_var: f64,
        teacher_seed: u64,
    },
    /// Path is taken relative to the working directory.
    Csv {
        path: PathBuf,
        target: String,
    },
}

fn default_train_data() -> TrainData {
    TrainData::Teacher {
        n: 1000,
        layer_widths: vec![4, 16, 1],
        activation: Activation::Tanh,
        noise_var: 0.05,
        teacher_seed: 7,
    }
}
fn default_train_frac() -> f64 {
    0.9
}
fn default_level() -> f64 {
    0.95
}
fn default_fit() -> TrainConfig {
    TrainConfig {
        objective: ObjectiveKind::Rber,
        lambda: 0.05,
        m_particles: 10,
        hidden_widths: vec![50],
        epochs: 300,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_train_data")]
    pub data: TrainData,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub interval_method: IntervalMethod,
    #[serde(default = "default_fit")]
    pub fit: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            data: default_train_data(),
            train_frac: default_train_frac(),
            level: default_level(),
            interval_method: IntervalMethod::default(),
            fit: default_fit(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum EnvSpec {
    SyntheticLinear {
        dim: usize,
        k_arms: usize,
        noise_sd: f64,
    },
    /// Integer class ids `0..K` in `label_column`; other columns are features.
    ClassificationCsv {
        path: PathBuf,
        label_column: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Thompson,
    Uniform,
    Oracle,
}

fn default_env() -> EnvSpec {
    EnvSpec::SyntheticLinear {
        dim: 8,
        k_arms: 4,
        noise_sd: 0.1,
    }
}
fn default_steps() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditSection {
    #[serde(default = "default_env")]
    pub env: EnvSpec,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub policy: PolicyKind,
    #[serde(default)]
    pub agent: AgentConfig,
}

impl Default for BanditSection {
    fn default() -> Self {
        Self {
            env: default_env(),
            steps: default_steps(),
            policy: PolicyKind::default(),
            agent: AgentConfig::default(),
        }
    }
}
