//! Experiment configuration as read from TOML. Every section has defaults,
//! so an empty file (or no file) is a valid configuration.

use std::path::{Path, PathBuf};

use kmc_core::experiments::{IdentityMapConfig, Mixture1d, SingularGridConfig, SweepConfig};
use kmc_core::mdn::{DatasetKind, DatasetParams, ToyDatasetSpec, TrainConfig};
use kmc_core::patchnet::{ClassifierTrainConfig, PatchNetConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Sweep,
    FitMdn,
    IdentityMap,
    SingularGrid,
    Classify,
    CheckSuite,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::FitMdn => "fit_mdn",
            ExperimentKind::IdentityMap => "identity_map",
            ExperimentKind::SingularGrid => "singular_grid",
            ExperimentKind::Classify => "classify",
            ExperimentKind::CheckSuite => "check_suite",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must match the subcommand when given.
    pub experiment: Option<ExperimentKind>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub sweep: SweepConfig,
    pub fit_mdn: FitMdnConfig,
    pub identity_map: IdentityMapRun,
    pub singular_grid: SingularGridConfig,
    pub classify: ClassifyConfig,
    pub check_suite: CheckSuiteConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: 0,
            output_dir: PathBuf::from("out"),
            sweep: SweepConfig::default(),
            fit_mdn: FitMdnConfig::default(),
            identity_map: IdentityMapRun::default(),
            singular_grid: SingularGridConfig::default(),
            classify: ClassifyConfig::default(),
            check_suite: CheckSuiteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitMdnConfig {
    pub dataset: ToyDatasetSpec,
    pub train: TrainConfig,
}

impl Default for FitMdnConfig {
    fn default() -> Self {
        Self {
            dataset: ToyDatasetSpec { kind: DatasetKind::GaussMixture10, params: DatasetParams::default(), seed: 0 },
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentityMapRun {
    pub mixture: Mixture1d,
    pub samples: usize,
    pub bandwidth: f64,
    /// One output matrix per shift.
    pub shifts: Vec<f64>,
    pub grid_points: usize,
}

impl Default for IdentityMapRun {
    fn default() -> Self {
        let base = IdentityMapConfig::default();
        Self {
            mixture: base.mixture,
            samples: base.samples,
            bandwidth: base.bandwidth,
            shifts: vec![0.0, 0.5, 1.0],
            grid_points: base.grid_points,
        }
    }
}

impl IdentityMapRun {
    pub fn at(&self, shift: f64, seed: u64) -> IdentityMapConfig {
        IdentityMapConfig {
            mixture: self.mixture.clone(),
            samples: self.samples,
            bandwidth: self.bandwidth,
            shift,
            grid_points: self.grid_points,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    /// Separate image and label files.
    Idx,
    /// Label byte plus three colour planes per record; label paths unused.
    Cifar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyConfig {
    pub format: ImageFormat,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Trained one after another; `net.patch_size` is ignored.
    pub patch_sizes: Vec<usize>,
    pub net: PatchNetConfig,
    pub training: ClassifierTrainConfig,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        let dir = Path::new("data/mnist-subset");
        Self {
            format: ImageFormat::Idx,
            train_images: dir.join("train-images-idx3-ubyte.gz"),
            train_labels: dir.join("train-labels-idx1-ubyte.gz"),
            test_images: dir.join("t10k-images-idx3-ubyte.gz"),
            test_labels: dir.join("t10k-labels-idx1-ubyte.gz"),
            train_limit: None,
            test_limit: None,
            patch_sizes: vec![1],
            net: PatchNetConfig::default(),
            training: ClassifierTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckSuiteConfig {
    /// Jitter for the regularized checks; 0 disables it entirely.
    pub jitter_rel: f64,
    /// Random instances per randomized check.
    pub instances: usize,
}

impl Default for CheckSuiteConfig {
    fn default() -> Self {
        Self { jitter_rel: 1e-6, instances: 20 }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig { experiment: Some(ExperimentKind::FitMdn), ..Default::default() };
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = ExperimentConfig::from_toml("seed = 1\n\n[sweep]\nsamples = \"many\"\n").unwrap_err();
        assert!(err.contains("line 4"), "{err}");
        assert!(ExperimentConfig::from_toml("sed = 3").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = ExperimentConfig::from_toml("[sweep]\nbandwidth = 0.02\n").unwrap();
        assert_eq!(cfg.sweep.bandwidth, 0.02);
        assert_eq!(cfg.sweep.samples, SweepConfig::default().samples);
    }
}
