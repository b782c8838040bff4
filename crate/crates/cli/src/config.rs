use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hvector::data::DatasetSpec;
use hvector::models::{ModelConfig, ModelKind, WindowMode};
use hvector::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a command needs. Unknown keys are rejected; missing sections
/// and fields take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives data generation and weight initialization.
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out: PathBuf::from("runs/default"),
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: Option<ModelKind>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        if let Some(kind) = overrides.model {
            cfg.model.kind = kind;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.num_speakers != self.dataset.num_speakers {
            bail!(
                "model.num_speakers is {} but the dataset has {} speakers",
                self.model.num_speakers,
                self.dataset.num_speakers
            );
        }
        if self.model.feature_dim != self.dataset.feature_dim {
            bail!(
                "model.feature_dim is {} but the dataset has {} features per frame",
                self.model.feature_dim,
                self.dataset.feature_dim
            );
        }
        if self.model.kind == ModelKind::HVector && self.model.window.length > self.dataset.frames() {
            bail!(
                "window of {} frames is longer than the {}-frame utterances",
                self.model.window.length,
                self.dataset.frames()
            );
        }
        Ok(())
    }

    /// Directory holding the generated dataset for this configuration.
    pub fn data_dir(&self) -> PathBuf {
        self.out
            .join("data")
            .join(format!("{}-{}", self.dataset.name, self.dataset.scenario))
    }

    /// Directory holding training outputs for this model.
    pub fn model_dir(&self) -> PathBuf {
        self.out.join(model_label(&self.model))
    }
}

/// Short name such as `h_vector_sliding` or `x_vector`.
pub fn model_label(cfg: &ModelConfig) -> String {
    match cfg.kind {
        ModelKind::HVector => match cfg.window.mode {
            WindowMode::Sliding => "h_vector_sliding".into(),
            WindowMode::Static => "h_vector_static".into(),
        },
        kind => kind.as_str().into(),
    }
}
