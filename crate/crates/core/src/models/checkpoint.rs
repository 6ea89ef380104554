//! Checkpoint directories: one little-endian `f32` file per named parameter
//! array plus a `manifest.json` with shapes, architecture tag, training
//! config hash and seed.

use crate::nn::Parameters;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use super::ModelError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub arch: String,
    pub config_hash: String,
    pub seed: u64,
    /// Architecture-specific settings needed to rebuild the model.
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save<P: Parameters + ?Sized>(
    dir: &Path,
    params: &P,
    arch: &str,
    config_hash: &str,
    seed: u64,
    extra: serde_json::Value,
) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut io_err = None;
    params.visit(&mut |name, shape, data| {
        if io_err.is_some() {
            return;
        }
        let file = format!("{name}.f32");
        let bytes: Vec<u8> = data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        if let Err(e) = std::fs::write(dir.join(&file), bytes) {
            io_err = Some(e);
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            file,
        });
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arch: arch.to_string(),
        config_hash: config_hash.to_string(),
        seed,
        extra,
        tensors,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, ModelError> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Fills `params` from the tensors listed in `manifest`; every parameter must
/// be present with a matching shape.
pub fn load_into<P: Parameters + ?Sized>(
    dir: &Path,
    manifest: &Manifest,
    params: &mut P,
) -> Result<(), ModelError> {
    let entries: BTreeMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    let mut shapes = BTreeMap::new();
    params.visit(&mut |name, shape, _| {
        shapes.insert(name.to_string(), shape.to_vec());
    });
    if shapes.len() != entries.len() {
        return Err(ModelError::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            entries.len(),
            shapes.len()
        )));
    }
    let mut result = Ok(());
    params.visit_mut(&mut |name, data| {
        if result.is_err() {
            return;
        }
        result = (|| {
            let entry = entries
                .get(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            if entry.shape != shapes[name] {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    entry.shape, shapes[name]
                )));
            }
            let bytes = std::fs::read(dir.join(&entry.file))?;
            if bytes.len() != data.len() * 4 {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name}: {} bytes, expected {}",
                    bytes.len(),
                    data.len() * 4
                )));
            }
            for (d, c) in data.iter_mut().zip(bytes.chunks_exact(4)) {
                *d = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            }
            Ok(())
        })();
    });
    result
}
