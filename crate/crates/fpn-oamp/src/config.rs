//! TOML experiment configuration.
//!
//! One file describes a complete experiment: array geometry, pilot scheme,
//! channel statistics, dataset sizes, training hyperparameters, and the
//! evaluation grids. Every section has defaults (the desk-scale setup), so a
//! config file only needs to override what differs.

use crate::channel::{ChannelConfig, ChannelError};
use crate::geometry::{ArrayGeometry, GeometryError};
use crate::measurement::{CombinerResolution, PilotConfig};
use crate::training::TrainConfig;
use crate::wideband::WidebandConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

/// Errors produced when loading or validating a configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Array layout parameters; see [`ArrayGeometry::new`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometrySection {
    /// Subarray count (a perfect square).
    pub subarrays: usize,
    /// Antenna elements per subarray (a perfect square).
    pub elements_per_subarray: usize,
    /// Element pitch within a subarray in meters.
    pub element_spacing: f64,
    /// Pitch between neighbouring subarray centres in meters.
    pub subarray_spacing: f64,
    /// Carrier frequency in Hz.
    pub carrier_hz: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            subarrays: 4,
            elements_per_subarray: 16,
            element_spacing: 5e-4,
            subarray_spacing: 8e-3,
            carrier_hz: 3e11,
        }
    }
}

impl GeometrySection {
    /// Builds the validated geometry.
    pub fn build(&self) -> Result<ArrayGeometry, GeometryError> {
        ArrayGeometry::new(
            self.subarrays,
            self.elements_per_subarray,
            self.element_spacing,
            self.subarray_spacing,
            self.carrier_hz,
        )
    }
}

/// Dataset sizes for the three splits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            train_count: 8000,
            val_count: 500,
            test_count: 500,
        }
    }
}

/// Evaluation grids and baseline settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// SNR grid in dB.
    pub snr_grid_db: Vec<f64>,
    /// Fixed-point tolerance at evaluation time.
    pub tolerance: f64,
    /// Fixed-point iteration cap at evaluation time.
    pub max_iterations: usize,
    /// Samples evaluated per SNR point.
    pub samples_per_snr: usize,
    /// Candidate soft-threshold weights; the best one per SNR is reported.
    pub fista_lambdas: Vec<f64>,
    pub fista_max_iterations: usize,
    /// Greedy atom budget.
    pub omp_atoms: usize,
    /// Bernoulli-Gaussian prior weight.
    pub oamp_sparsity: f64,
    pub oamp_iterations: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            snr_grid_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            tolerance: 1e-2,
            max_iterations: 50,
            samples_per_snr: 200,
            fista_lambdas: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2],
            fista_max_iterations: 500,
            omp_atoms: 10,
            oamp_sparsity: 0.1,
            oamp_iterations: 30,
        }
    }
}

/// Self-adaptation (measurement-consistency fine-tuning) settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptSection {
    pub steps: usize,
    pub learning_rate: f64,
    /// Unlabeled measurements used for adaptation.
    pub samples: usize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            steps: 5,
            learning_rate: 1e-4,
            samples: 128,
        }
    }
}

/// Distance sweep for the field-model mismatch curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceSweepSection {
    /// Distances as multiples of the Rayleigh distance.
    pub distance_factors: Vec<f64>,
    /// Random angles averaged per distance.
    pub angle_samples: usize,
}

impl Default for DistanceSweepSection {
    fn default() -> Self {
        Self {
            distance_factors: vec![0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0],
            angle_samples: 64,
        }
    }
}

/// A full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Label used in output files.
    pub label: String,
    /// Master seed; the CLI `--seed` flag overrides it.
    pub seed: u64,
    pub geometry: GeometrySection,
    pub pilot: PilotConfig,
    pub channel: ChannelConfig,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub adapt: AdaptSection,
    pub wideband: WidebandConfig,
    pub distance_sweep: DistanceSweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            label: "desk".to_string(),
            seed: 17,
            geometry: GeometrySection::default(),
            pilot: PilotConfig {
                num_slots: 8,
                resolution: CombinerResolution::OneBit,
            },
            channel: ChannelConfig::default_desk(),
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            adapt: AdaptSection::default(),
            wideband: WidebandConfig {
                k_subcarriers: 32,
                bandwidth: 0.05 * 3e11,
            },
            distance_sweep: DistanceSweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML string and validates it.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and validates a TOML file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Cross-field validation beyond what each section checks on its own.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.geometry.build()?;
        self.channel.validate()?;
        if self.pilot.num_slots == 0 {
            return Err(ConfigError::Invalid("pilot.num_slots must be >= 1".into()));
        }
        if self.dataset.train_count == 0 || self.dataset.val_count == 0 {
            return Err(ConfigError::Invalid(
                "dataset.train_count and dataset.val_count must be >= 1".into(),
            ));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(ConfigError::Invalid(
                "train.batch_size and train.epochs must be >= 1".into(),
            ));
        }
        if self.eval.snr_grid_db.is_empty() {
            return Err(ConfigError::Invalid("eval.snr_grid_db is empty".into()));
        }
        if self.wideband.k_subcarriers == 0 {
            return Err(ConfigError::Invalid(
                "wideband.k_subcarriers must be >= 1".into(),
            ));
        }
        if self
            .distance_sweep
            .distance_factors
            .iter()
            .any(|f| !(f.is_finite() && *f > 0.0))
        {
            return Err(ConfigError::Invalid(
                "distance_sweep.distance_factors must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Hex SHA-256 of arbitrary bytes, for run manifests.
pub fn digest_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}
