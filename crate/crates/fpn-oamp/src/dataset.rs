//! Binary dataset files for generated channel samples.
//!
//! Layout: an 8-byte magic string, a little-endian `u32` format version, a
//! little-endian `u64` manifest length followed by that many bytes of JSON,
//! then three raw blocks of little-endian `f32` values: all ground-truth
//! columns, all observation columns, and the per-sample SNRs. The manifest
//! records the geometry, pilot, channel configuration, generation seed, and
//! a digest of the measurement operator the observations were taken with, so
//! a loader can refuse data produced under a different operator.

use crate::channel::ChannelConfig;
use crate::geometry::ArrayGeometry;
use crate::measurement::{MeasurementOperator, PilotConfig};
use crate::training::GeneratedSet;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"FPNDATA\n";
const FORMAT_VERSION: u32 = 1;

/// Errors produced when reading or writing dataset files.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated")]
    Truncated,
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("dataset does not match: {0}")]
    Mismatch(String),
}

/// Provenance and shape information stored alongside the samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub geometry: ArrayGeometry,
    pub pilot: PilotConfig,
    pub channel: ChannelConfig,
    /// Digest of the operator used to produce the observations.
    pub operator_digest: String,
    pub master_seed: u64,
    pub snr_range_db: (f64, f64),
    pub count: usize,
    /// Ground-truth dimension (estimation domain).
    pub gt_dim: usize,
    /// Observation dimension.
    pub y_dim: usize,
}

impl DatasetManifest {
    /// True when the observations were produced with this exact operator.
    pub fn matches_operator(&self, op: &MeasurementOperator) -> bool {
        self.operator_digest == op.digest()
    }
}

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub set: GeneratedSet,
}

fn push_f32_block(out: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Writes a generated set with its provenance to `path`.
pub fn save_dataset(
    path: &Path,
    op: &MeasurementOperator,
    channel: &ChannelConfig,
    master_seed: u64,
    snr_range_db: (f64, f64),
    set: &GeneratedSet,
) -> Result<(), DatasetError> {
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        geometry: *op.geometry(),
        pilot: *op.pilot(),
        channel: channel.clone(),
        operator_digest: op.digest(),
        master_seed,
        snr_range_db,
        count: set.len(),
        gt_dim: set.gt.nrows(),
        y_dim: set.y.nrows(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(
        8 + 4 + 8 + manifest_bytes.len() + 4 * (set.gt.len() + set.y.len() + set.len()),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    push_f32_block(&mut out, set.gt.as_slice().iter().copied());
    push_f32_block(&mut out, set.y.as_slice().iter().copied());
    push_f32_block(&mut out, set.snr_db.iter().copied());
    fs::write(path, out)?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], len: usize) -> Result<&'a [u8], DatasetError> {
    if bytes.len() < len {
        return Err(DatasetError::Truncated);
    }
    let (head, tail) = bytes.split_at(len);
    *bytes = tail;
    Ok(head)
}

fn read_f32_block(bytes: &mut &[u8], len: usize) -> Result<Vec<f64>, DatasetError> {
    let raw = take(bytes, 4 * len)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Reads a dataset file back. Values round-trip through `f32`.
pub fn load_dataset(path: &Path) -> Result<LoadedDataset, DatasetError> {
    let data = fs::read(path)?;
    let mut bytes = data.as_slice();
    if take(&mut bytes, 8)? != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let manifest_len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().unwrap()) as usize;
    let manifest: DatasetManifest = serde_json::from_slice(take(&mut bytes, manifest_len)?)?;
    let gt = read_f32_block(&mut bytes, manifest.gt_dim * manifest.count)?;
    let y = read_f32_block(&mut bytes, manifest.y_dim * manifest.count)?;
    let snr_db = read_f32_block(&mut bytes, manifest.count)?;
    if !bytes.is_empty() {
        return Err(DatasetError::Mismatch(format!(
            "{} trailing bytes",
            bytes.len()
        )));
    }
    let set = GeneratedSet {
        gt: DMatrix::from_vec(manifest.gt_dim, manifest.count, gt),
        y: DMatrix::from_vec(manifest.y_dim, manifest.count, y),
        snr_db,
    };
    Ok(LoadedDataset { manifest, set })
}

/// Reads a dataset and refuses it unless it was generated with `op`.
pub fn load_dataset_for(
    path: &Path,
    op: &MeasurementOperator,
) -> Result<LoadedDataset, DatasetError> {
    let loaded = load_dataset(path)?;
    if !loaded.manifest.matches_operator(op) {
        return Err(DatasetError::Mismatch(format!(
            "operator digest {} does not match expected {}",
            loaded.manifest.operator_digest,
            op.digest()
        )));
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{draw_operator, CombinerResolution};
    use crate::sample_rng;
    use crate::training::generate_dataset;

    fn setup() -> (MeasurementOperator, ChannelConfig, GeneratedSet) {
        let geometry = ArrayGeometry::new(4, 16, 5e-4, 8e-3, 3e11).unwrap();
        let pilot = PilotConfig {
            num_slots: 8,
            resolution: CombinerResolution::OneBit,
        };
        let op = draw_operator(&mut sample_rng(1, 0), &geometry, &pilot).unwrap();
        let channel = ChannelConfig::default_desk();
        let set = generate_dataset(2, 12, &op, &channel, (0.0, 20.0)).unwrap();
        (op, channel, set)
    }

    #[test]
    fn round_trip_preserves_values_to_f32() {
        let (op, channel, set) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.bin");
        save_dataset(&path, &op, &channel, 2, (0.0, 20.0), &set).unwrap();
        let loaded = load_dataset_for(&path, &op).unwrap();
        assert_eq!(loaded.manifest.count, 12);
        assert_eq!(loaded.manifest.master_seed, 2);
        assert_eq!(loaded.set.len(), set.len());
        for (a, b) in loaded.set.gt.iter().zip(set.gt.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        for (a, b) in loaded.set.y.iter().zip(set.y.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn same_seed_writes_identical_bytes() {
        let (op, channel, set) = setup();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_dataset(&p1, &op, &channel, 2, (0.0, 20.0), &set).unwrap();
        let again = generate_dataset(2, 12, &op, &channel, (0.0, 20.0)).unwrap();
        save_dataset(&p2, &op, &channel, 2, (0.0, 20.0), &again).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn refuses_foreign_operator_and_corrupt_files() {
        let (op, channel, set) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.bin");
        save_dataset(&path, &op, &channel, 2, (0.0, 20.0), &set).unwrap();

        let other = draw_operator(&mut sample_rng(99, 0), op.geometry(), op.pilot()).unwrap();
        assert!(matches!(
            load_dataset_for(&path, &other),
            Err(DatasetError::Mismatch(_))
        ));

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        let bad_magic = dir.path().join("magic.bin");
        fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(
            load_dataset(&bad_magic),
            Err(DatasetError::BadMagic)
        ));

        let good = fs::read(&path).unwrap();
        let truncated = dir.path().join("short.bin");
        fs::write(&truncated, &good[..good.len() - 5]).unwrap();
        assert!(matches!(
            load_dataset(&truncated),
            Err(DatasetError::Truncated)
        ));
    }
}
