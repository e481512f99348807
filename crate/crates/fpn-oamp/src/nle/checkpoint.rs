//! Binary checkpoint format for estimator parameters.
//!
//! Layout: an 8-byte magic string, a little-endian `u32` format version, a
//! little-endian `u64` manifest length followed by that many bytes of JSON,
//! then one raw blob of little-endian `f32` values per parameter group in
//! storage order. The manifest records the architecture, the group names and
//! shapes, and a caller-supplied metadata value (training configuration,
//! operator digest, and the like). Weights are stored in `f32`; loading a
//! checkpoint and saving it again reproduces the file byte for byte.

use super::{NleArch, NleError, NleParameters};
use std::fs;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"NLECKPT\n";
const FORMAT_VERSION: u32 = 1;

/// Errors produced when reading or writing checkpoints.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated")]
    Truncated,
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("manifest does not match the architecture: {0}")]
    GroupMismatch(String),
    #[error(transparent)]
    Param(#[from] NleError),
}

#[derive(serde::Serialize, serde::Deserialize)]
struct GroupEntry {
    name: String,
    shape: Vec<usize>,
    len: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    format_version: u32,
    arch: NleArch,
    groups: Vec<GroupEntry>,
    metadata: serde_json::Value,
}

/// Serialises parameters plus caller metadata to `path`.
pub fn save_checkpoint(
    path: &Path,
    params: &NleParameters,
    metadata: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let arch = *params.arch();
    let groups = arch.named_groups();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arch,
        groups: groups
            .iter()
            .map(|(name, shape, range)| GroupEntry {
                name: name.clone(),
                shape: shape.clone(),
                len: range.len(),
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(
        8 + 4 + 8 + manifest_bytes.len() + 4 * arch.param_count(),
    );
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_bytes);
    for (_, _, range) in &groups {
        for &v in &params.data()[range.clone()] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Loads parameters and the stored metadata from `path`.
pub fn load_checkpoint(path: &Path) -> Result<(NleParameters, serde_json::Value), CheckpointError> {
    let bytes = fs::read(path)?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, len: usize| -> Result<&[u8], CheckpointError> {
        if *cursor + len > bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let slice = &bytes[*cursor..*cursor + len];
        *cursor += len;
        Ok(slice)
    };
    if take(&mut cursor, 8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let manifest_len = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
    let manifest: Manifest = serde_json::from_slice(take(&mut cursor, manifest_len)?)?;
    // Re-validate the architecture and re-derive the expected layout.
    let arch = NleArch::new(
        manifest.arch.s(),
        manifest.arch.s_bar(),
        manifest.arch.channels(),
        manifest.arch.blocks(),
    )?;
    let groups = arch.named_groups();
    if groups.len() != manifest.groups.len() {
        return Err(CheckpointError::GroupMismatch(format!(
            "expected {} groups, manifest lists {}",
            groups.len(),
            manifest.groups.len()
        )));
    }
    for ((name, shape, range), entry) in groups.iter().zip(&manifest.groups) {
        if *name != entry.name || *shape != entry.shape || range.len() != entry.len {
            return Err(CheckpointError::GroupMismatch(format!(
                "group {name} does not match manifest entry {}",
                entry.name
            )));
        }
    }
    let mut data = vec![0.0f64; arch.param_count()];
    for (_, _, range) in &groups {
        for slot in &mut data[range.clone()] {
            let raw = take(&mut cursor, 4)?;
            *slot = f32::from_le_bytes(raw.try_into().unwrap()) as f64;
        }
    }
    if cursor != bytes.len() {
        return Err(CheckpointError::GroupMismatch(
            "trailing bytes after parameter blobs".to_string(),
        ));
    }
    let params = NleParameters::from_raw(arch, data)?;
    Ok((params, manifest.metadata))
}
