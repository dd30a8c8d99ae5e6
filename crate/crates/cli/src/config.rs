use std::path::{Path, PathBuf};

use laplab_core::attacks::AttackConfig;
use laplab_core::data::{self, Dataset, SyntheticKind};
use laplab_core::perturb::{PerturbMode, PerturbSchedule};
use laplab_core::trainer::TrainConfig;
use laplab_core::NetSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: NetSpec,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub perturb: PerturbConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        generator: SyntheticKind,
        train_size: usize,
        test_size: usize,
        size: usize,
        noise_std: f64,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        shape: Option<[usize; 3]>,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

/// `beta`, `gamma` have no defaults on purpose.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    pub mode: PerturbMode,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub run_name: String,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses and validates. serde_json reports the line, column and key of
    /// the first problem.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let layers = self.model.validate().map_err(|e| CliError::Config(format!("model: {e}")))?.len();
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        self.attack.validate().map_err(|e| CliError::Config(format!("attack: {e}")))?;
        self.schedule_for(layers)?;
        if self.output.run_name.is_empty() || self.output.run_name.contains(['/', '\\']) {
            return Err(CliError::Config("output.run_name must be a plain, non-empty file name".into()));
        }
        if let DatasetConfig::Synthetic { generator, size, .. } = &self.dataset {
            let [c, h, w] = self.model.input_shape;
            if (c, h, w) != (1, *size, *size) || self.model.num_classes != generator.num_classes() {
                return Err(CliError::Config(format!(
                    "model expects {:?} with {} classes, synthetic data is [1, {size}, {size}] with {}",
                    self.model.input_shape,
                    self.model.num_classes,
                    generator.num_classes()
                )));
            }
        }
        Ok(())
    }

    pub fn schedule_for(&self, layers: usize) -> Result<PerturbSchedule, CliError> {
        let p = &self.perturb;
        PerturbSchedule::new(p.mode, p.beta, p.gamma, layers).map_err(|e| CliError::Config(format!("perturb: {e}")))
    }

    /// Overrides every seed with `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.train.seed = seed;
        if let DatasetConfig::Synthetic { seed: s, .. } = &mut self.dataset {
            *s = seed;
        }
    }

    pub fn run_dir(&self, out: Option<&Path>) -> PathBuf {
        out.unwrap_or(&self.output.dir).join(&self.output.run_name)
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset), CliError> {
        let pair = match &self.dataset {
            DatasetConfig::Synthetic { generator, train_size, test_size, size, noise_std, seed } => (
                data::gen_synthetic(*generator, *train_size, *size, *noise_std, *seed)?,
                data::gen_synthetic(*generator, *test_size, *size, *noise_std, seed.wrapping_add(TEST_SEED_OFFSET))?,
            ),
            DatasetConfig::Idx { train_images, train_labels, test_images, test_labels, num_classes } => {
                (data::load_idx(train_images, train_labels, *num_classes)?, data::load_idx(test_images, test_labels, *num_classes)?)
            }
            DatasetConfig::Csv { train, test, shape, num_classes } => {
                (data::load_csv(train, *shape, *num_classes)?, data::load_csv(test, *shape, *num_classes)?)
            }
        };
        if pair.0.image_shape() != self.model.input_shape || pair.1.image_shape() != self.model.input_shape {
            return Err(CliError::Config(format!("dataset images are {:?}, model expects {:?}", pair.0.image_shape(), self.model.input_shape)));
        }
        Ok(pair)
    }
}

/// Test split seed relative to the training split seed.
pub const TEST_SEED_OFFSET: u64 = laplab_core::repro::TEST_SEED_OFFSET;
