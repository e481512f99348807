//! Experiment harness library behind the `fpn` binary: run context,
//! output-file plumbing, estimation methods, and the experiment runners.

pub mod experiments;
pub mod methods;

use anyhow::{Context, Result};
use fpn_oamp::config::{digest_hex, ExperimentConfig};
use fpn_oamp::geometry::ArrayGeometry;
use fpn_oamp::measurement::MeasurementOperator;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

/// Everything a subcommand needs: the validated configuration, digests,
/// the effective seed, and the output directory.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: ExperimentConfig,
    /// SHA-256 of the configuration file bytes.
    pub config_digest: String,
    /// Seed from the config, unless overridden on the command line.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Zero wall-time columns and omit timestamps for byte-identical reruns.
    pub deterministic: bool,
}

impl RunContext {
    /// Loads and validates a configuration file and prepares the output
    /// directory.
    pub fn load(
        config_path: &Path,
        seed_override: Option<u64>,
        out_dir: PathBuf,
        deterministic: bool,
    ) -> Result<Self> {
        let bytes = fs::read(config_path)
            .with_context(|| format!("reading config {}", config_path.display()))?;
        let config = ExperimentConfig::from_toml(
            std::str::from_utf8(&bytes).context("config is not UTF-8")?,
        )
        .with_context(|| format!("parsing config {}", config_path.display()))?;
        let seed = seed_override.unwrap_or(config.seed);
        fs::create_dir_all(&out_dir)
            .with_context(|| format!("creating output directory {}", out_dir.display()))?;
        Ok(Self {
            config_digest: digest_hex(&bytes),
            config,
            seed,
            out_dir,
            deterministic,
        })
    }

    /// The validated array geometry.
    pub fn geometry(&self) -> Result<ArrayGeometry> {
        Ok(self.config.geometry.build()?)
    }

    /// The run's measurement operator (deterministic in the seed).
    pub fn operator(&self) -> Result<MeasurementOperator> {
        experiments::operator_for(self.seed, &self.geometry()?, &self.config.pilot)
    }

    /// Path of an output file.
    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Writes the JSON run manifest for a subcommand. `extra` carries
    /// command-specific annotations.
    pub fn write_manifest(&self, command: &str, extra: serde_json::Value) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            command: &'a str,
            label: &'a str,
            seed: u64,
            config_digest: &'a str,
            package_version: &'a str,
            deterministic: bool,
            #[serde(skip_serializing_if = "Option::is_none")]
            unix_time_s: Option<u64>,
            extra: serde_json::Value,
        }
        let manifest = Manifest {
            command,
            label: &self.config.label,
            seed: self.seed,
            config_digest: &self.config_digest,
            package_version: env!("CARGO_PKG_VERSION"),
            deterministic: self.deterministic,
            unix_time_s: if self.deterministic {
                None
            } else {
                Some(
                    std::time::SystemTime::now()
                        .duration_since(std::time::UNIX_EPOCH)
                        .map(|d| d.as_secs())
                        .unwrap_or(0),
                )
            },
            extra,
        };
        let path = self.path(&format!("{command}_manifest.json"));
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(path)
    }
}

/// Writes a CSV file with the given header and pre-formatted rows.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(header.len() + 1 + rows.iter().map(|r| r.len() + 1).sum::<usize>());
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Fixed-precision float formatting so reruns are byte-identical.
pub fn fmt_f(value: f64) -> String {
    format!("{value:.6}")
}

/// Wall-time formatting (nanosecond resolution).
pub fn fmt_t(value: f64) -> String {
    format!("{value:.9}")
}
