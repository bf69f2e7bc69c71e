use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use uidm::data::{make_blobs_shift, make_two_moons_shift, Dataset};
use uidm::mixup::MixupConfig;
use uidm::training::{Method, TrainConfig};
use uidm::uncertainty::UncertaintyConfig;
use uidm::{Error, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs {
        num_classes: usize,
        n_per_class: usize,
        dim: usize,
        shift_scale: f64,
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
    TwoMoons {
        n_per_domain: usize,
        rotation_deg: f64,
        noise_sd: f64,
        #[serde(default)]
        translate: [f64; 2],
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Blobs { num_classes, .. } => *num_classes,
            DatasetSpec::TwoMoons { .. } => 2,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Blobs { dim, .. } => *dim,
            DatasetSpec::TwoMoons { .. } => 2,
        }
    }

    pub fn generate(&self) -> uidm::Result<(Dataset, Dataset)> {
        match *self {
            DatasetSpec::Blobs {
                num_classes,
                n_per_class,
                dim,
                shift_scale,
                spread,
                seed,
            } => make_blobs_shift(num_classes, n_per_class, dim, shift_scale, spread, seed),
            DatasetSpec::TwoMoons {
                n_per_domain,
                rotation_deg,
                noise_sd,
                translate,
                seed,
            } => make_two_moons_shift(n_per_domain, rotation_deg, noise_sd, translate, seed),
        }
    }
}

/// Architecture fields; input and output sizes come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_bottleneck")]
    pub bottleneck_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_temperature")]
    pub classifier_temperature: f64,
}

fn library_defaults() -> ModelConfig {
    ModelConfig::new(1, 1)
}
fn default_hidden() -> Vec<usize> {
    library_defaults().hidden_dims
}
fn default_bottleneck() -> usize {
    library_defaults().bottleneck_dim
}
fn default_dropout() -> f64 {
    library_defaults().dropout_rate
}
fn default_temperature() -> f64 {
    library_defaults().classifier_temperature
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = library_defaults();
        ModelSection {
            hidden_dims: d.hidden_dims,
            bottleneck_dim: d.bottleneck_dim,
            dropout_rate: d.dropout_rate,
            classifier_temperature: d.classifier_temperature,
        }
    }
}

fn default_method() -> Method {
    Method::Uidm
}
fn default_shots() -> usize {
    1
}
fn default_val_per_class() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub seeds: Vec<u64>,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_val_per_class")]
    pub val_per_class: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub uncertainty: UncertaintyConfig,
    #[serde(default)]
    pub mixup: MixupConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> uidm::Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> uidm::Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if !matches!(self.shots, 1 | 3) {
            return Err(Error::Config(format!("shots must be 1 or 3, got {}", self.shots)));
        }
        self.model_config().validate()?;
        self.train.validate()?;
        self.uncertainty.validate()?;
        self.mixup.validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.dataset.dim(),
            hidden_dims: self.model.hidden_dims.clone(),
            bottleneck_dim: self.model.bottleneck_dim,
            num_classes: self.dataset.num_classes(),
            dropout_rate: self.model.dropout_rate,
            classifier_temperature: self.model.classifier_temperature,
        }
    }

    pub fn train_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Short content hash of the resolved config and seed.
    pub fn run_id(&self, seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).expect("config serializes"));
        h.update(seed.to_le_bytes());
        hex::encode(&h.finalize()[..6])
    }
}
