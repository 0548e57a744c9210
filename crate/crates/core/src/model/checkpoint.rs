//! Checkpoint directory: `manifest.json` (config and parameter layout) plus
//! `params.bin` (little-endian `f32`, concatenated in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tensors::Array;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(model.params.num_scalars() * 4);
    let mut entries = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (name, a) in model.params.entries() {
        for v in a.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ParamEntry {
            name: name.clone(),
            shape: a.shape().to_vec(),
            offset,
            len: a.len(),
        });
        offset += a.len();
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model.cfg.clone(),
        params: entries,
    };
    let bin = dir.join("params.bin");
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let man = dir.join("manifest.json");
    fs::write(&man, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&man, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let man = dir.join("manifest.json");
    let text = fs::read(&man).map_err(|e| Error::io(&man, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|e| Error::format(&man, e.to_string()))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(
            &man,
            format!(
                "unsupported format_version {} (expected {})",
                manifest.format_version, CHECKPOINT_FORMAT_VERSION
            ),
        ));
    }
    manifest.config.validate()?;
    let bin = dir.join("params.bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(&bin, "length is not a multiple of 4"));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut params = Params::default();
    for e in manifest.params {
        if e.shape.iter().product::<usize>() != e.len || e.offset + e.len > values.len() {
            return Err(Error::format(&bin, format!("entry {} out of range", e.name)));
        }
        let a = Array::new(&e.shape, values[e.offset..e.offset + e.len].to_vec())?;
        params.insert(e.name, a)?;
    }
    // layout must match what this config builds
    let mut expected = manifest.config.init_params(0)?;
    expected.load_from(&params)?;
    Ok(Model {
        cfg: manifest.config,
        params: expected,
    })
}
