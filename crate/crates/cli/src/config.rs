//! The run configuration file: one TOML document holding every module's
//! settings, a global seed and the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use meda_core::baselines::SamplerConfig;
use meda_core::datasets::{GlyphConfig, ImbalanceSpec};
use meda_core::evolution::{EvolutionConfig, MedaConfig};
use meda_core::lgm_loss::LgmConfig;
use meda_core::metrics::GMeanKind;
use meda_core::networks::ArchitectureConfig;
use meda_core::training::{ClassifierConfig, PhaseWeights, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    #[default]
    Glyphs,
    Idx,
}

/// IDX image/label file pairs. The test pair is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: SourceKind,
    pub glyphs: GlyphConfig,
    pub idx: IdxPaths,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub g_mean: GMeanKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Replaces every section's own `seed`.
    pub seed: u64,
    pub run_dir: PathBuf,
    /// Standard deviation of the random initial class means.
    pub init_mean_spread: f64,
    pub data: DataConfig,
    pub imbalance: ImbalanceSpec,
    pub architecture: ArchitectureConfig,
    pub weights: PhaseWeights,
    pub lgm: LgmConfig,
    pub train: TrainConfig,
    pub evolution: EvolutionConfig,
    pub sampler: SamplerConfig,
    pub classifier: ClassifierConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("run"),
            init_mean_spread: 1.0,
            data: DataConfig::default(),
            imbalance: ImbalanceSpec::default(),
            architecture: ArchitectureConfig::default(),
            weights: PhaseWeights::default(),
            lgm: LgmConfig::default(),
            train: TrainConfig::default(),
            evolution: EvolutionConfig::default(),
            sampler: SamplerConfig::default(),
            classifier: ClassifierConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

const DEFAULT_HEADER: &str = "\
# Run configuration. Every key is optional; missing keys take the values
# shown here and unknown keys are rejected.
# The top-level `seed` overrides the `seed` of every section.
# Balance coefficients (weights.xi_*) accept \"auto\" or a number.
";

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    /// Sets the global seed and copies it into every section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.glyphs.seed = seed;
        self.imbalance.seed = seed;
        self.train.seed = seed;
        self.sampler.seed = seed;
        self.classifier.seed = seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration always serializes")
    }

    pub fn default_document() -> String {
        format!("{DEFAULT_HEADER}\n{}", Self::default().to_toml())
    }

    pub fn validate(&self) -> CliResult<()> {
        let class_count = match self.data.source {
            SourceKind::Glyphs => self.data.glyphs.num_classes,
            SourceKind::Idx => {
                if self.data.idx.train_images.as_os_str().is_empty()
                    || self.data.idx.train_labels.as_os_str().is_empty()
                {
                    return Err(CliError::Config("idx source needs train_images and train_labels".into()));
                }
                if self.data.idx.test_images.is_some() != self.data.idx.test_labels.is_some() {
                    return Err(CliError::Config("test_images and test_labels go together".into()));
                }
                // only known once the files are read
                usize::MAX
            }
        };
        if class_count != usize::MAX {
            self.imbalance.validate(class_count)?;
        }
        if !(self.init_mean_spread.is_finite() && self.init_mean_spread >= 0.0) {
            return Err(CliError::Config("init_mean_spread must be finite and >= 0".into()));
        }
        self.meda().validate()?;
        self.classifier.validate()?;
        if self.sampler.k_neighbors == 0 {
            return Err(CliError::Config("sampler.k_neighbors must be >= 1".into()));
        }
        Ok(())
    }

    pub fn meda(&self) -> MedaConfig {
        MedaConfig {
            architecture: self.architecture.clone(),
            weights: self.weights.clone(),
            lgm: self.lgm,
            train: self.train.clone(),
            evolution: self.evolution.clone(),
            init_mean_spread: self.init_mean_spread,
        }
    }

    /// SHA-256 of the serialized configuration, without the run directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    /// SHA-256 of the settings that determine the prepared data.
    pub fn data_hash(&self) -> String {
        #[derive(Serialize)]
        struct DataPart<'a> {
            seed: u64,
            data: &'a DataConfig,
            imbalance: &'a ImbalanceSpec,
        }
        let part = DataPart {
            seed: self.seed,
            data: &self.data,
            imbalance: &self.imbalance,
        };
        let text = toml::to_string(&part).expect("data settings always serialize");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
