//! Run configuration: the TOML file format tying dataset, model, objective,
//! training and evaluation choices into one reproducible unit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphdata::{self, Dataset, DataError, GenConfig, GraphFamily};
use crate::metrics::MetricParams;
use crate::model::{LatentGroup, ModelConfig};
use crate::objective::{ObjectiveError, ObjectiveSpec, Variant};
use crate::trainer::TrainConfig;

#[derive(Error, Debug)]
pub enum RunConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config error: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_n() -> usize {
    20
}
fn default_samples() -> usize {
    1000
}

/// Either a dataset file to load or generator settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSection {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub family: Option<GraphFamily>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Generation seed; falls back to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: None,
            family: Some(GraphFamily::Er),
            n: default_n(),
            samples: default_samples(),
            seed: None,
        }
    }
}

fn default_latent() -> usize {
    3
}

/// Latent sizes and channel widths; graph dimensions come from the dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default = "default_latent")]
    pub l1: usize,
    #[serde(default = "default_latent")]
    pub l2: usize,
    #[serde(default = "default_latent")]
    pub l3: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            l1: default_latent(),
            l2: default_latent(),
            l3: default_latent(),
        }
    }
}

fn default_variant() -> String {
    "NED-VAE".to_string()
}
fn default_weight() -> f64 {
    10.0
}
fn default_anchor() -> String {
    "e".to_string()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectiveSection {
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "default_weight")]
    pub beta: f64,
    #[serde(default = "default_weight")]
    pub lambda: f64,
    #[serde(default = "default_weight")]
    pub gamma: f64,
    #[serde(default = "default_weight")]
    pub gamma1: f64,
    #[serde(default = "default_weight")]
    pub gamma2: f64,
    #[serde(default = "default_weight")]
    pub gamma3: f64,
    #[serde(default = "default_anchor")]
    pub anchor: String,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        ObjectiveSection {
            variant: default_variant(),
            beta: default_weight(),
            lambda: default_weight(),
            gamma: default_weight(),
            gamma1: default_weight(),
            gamma2: default_weight(),
            gamma3: default_weight(),
            anchor: default_anchor(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: MetricParams,
}

pub fn parse_anchor(s: &str) -> Result<LatentGroup, RunConfigError> {
    match s.to_ascii_lowercase().as_str() {
        "e" => Ok(LatentGroup::E),
        "f" => Ok(LatentGroup::F),
        "g" => Ok(LatentGroup::G),
        other => Err(RunConfigError::Invalid(format!(
            "anchor group must be one of e, f, g; got {other:?}"
        ))),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, RunConfigError> {
        toml::from_str(text).map_err(|e| RunConfigError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Load or generate the dataset this run trains on.
    pub fn resolve_dataset(&self) -> Result<Dataset, RunConfigError> {
        if let Some(path) = &self.dataset.path {
            return Ok(graphdata::read_dataset(path)?);
        }
        let family = self.dataset.family.ok_or_else(|| {
            RunConfigError::Invalid("dataset needs either a path or a family".into())
        })?;
        let config = match family {
            GraphFamily::Er => GenConfig::er_default(self.dataset.n, self.dataset.samples),
            GraphFamily::Ws => GenConfig::ws_default(self.dataset.n, self.dataset.samples),
        };
        let seed = self.dataset.seed.unwrap_or(self.seed);
        Ok(graphdata::generate(&config, seed)?)
    }

    pub fn resolve_objective(&self) -> Result<ObjectiveSpec, RunConfigError> {
        let variant = Variant::parse(&self.objective.variant)?;
        let mut spec = ObjectiveSpec::new(variant);
        spec.beta = self.objective.beta;
        spec.lambda = self.objective.lambda;
        spec.gamma = self.objective.gamma;
        spec.gamma1 = self.objective.gamma1;
        spec.gamma2 = self.objective.gamma2;
        spec.gamma3 = self.objective.gamma3;
        spec.anchor = parse_anchor(&self.objective.anchor)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Model configuration for a dataset with the given graph dimensions.
    pub fn resolve_model(&self, n: usize, k: usize, d: usize) -> Result<ModelConfig, RunConfigError> {
        let variant = Variant::parse(&self.objective.variant)?;
        let mut mc = ModelConfig::new(n, k, d, variant.model_kind());
        mc.l1 = self.model.l1;
        mc.l2 = self.model.l2;
        mc.l3 = self.model.l3;
        Ok(mc)
    }
}
