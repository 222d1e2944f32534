//! Checkpoint directory format.
//!
//! ```text
//! <dir>/manifest.json   {"format": "hst-checkpoint-v1",
//!                        "config": <HstModelConfig>,
//!                        "params": [{"name", "shape", "file", "dtype": "f64-le"}, ...]}
//! <dir>/<name>.bin      row-major values, 8-byte little-endian IEEE-754 each
//! ```
//!
//! Shared (aliased) tensors appear once. Loading rebuilds the architecture
//! from `config` and fills every parameter by name.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HstError, Result};
use crate::hst::{HstModel, HstModelConfig};

pub const FORMAT: &str = "hst-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: HstModelConfig,
    pub params: Vec<ParamEntry>,
}

pub fn save(model: &HstModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(model.params.len());
    for id in model.params.ids() {
        let name = model.params.name(id).to_string();
        let t = model.params.get(id);
        let file = format!("{name}.bin");
        let bytes: Vec<u8> = t.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(dir.join(&file), bytes)?;
        params.push(ParamEntry {
            name,
            shape: t.shape.clone(),
            file,
            dtype: "f64-le".into(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: model.config.clone(),
        params,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<HstModel> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(HstError::Parse(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    let mut model = HstModel::new(manifest.config.clone(), 0)?;
    if manifest.params.len() != model.params.len() {
        return Err(HstError::Parse(format!(
            "manifest lists {} parameters, architecture has {}",
            manifest.params.len(),
            model.params.len()
        )));
    }
    for entry in &manifest.params {
        if entry.dtype != "f64-le" {
            return Err(HstError::Parse(format!("parameter {}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| HstError::Parse(format!("unknown parameter {}", entry.name)))?;
        if model.params.get(id).shape != entry.shape {
            return Err(HstError::Dimension {
                op: "checkpoint_load",
                lhs: model.params.get(id).shape.clone(),
                rhs: entry.shape.clone(),
            });
        }
        let bytes = fs::read(dir.join(&entry.file))?;
        if bytes.len() != 8 * model.params.get(id).numel() {
            return Err(HstError::Parse(format!(
                "parameter {}: expected {} bytes, found {}",
                entry.name,
                8 * model.params.get(id).numel(),
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        model.params.set(id, data)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_predictions() {
        let cfg = HstModelConfig {
            n_base: 9,
            g: 1,
            w: 4,
            d: 4,
            heads: 2,
            ffn_dim: 8,
            vocab_size: 8,
            weight_sharing: true,
            ..Default::default()
        };
        let model = HstModel::new(cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&model, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        let x = [3, 4, 5, 6, 7, 3];
        assert_eq!(model.predict(&x, None).unwrap(), back.predict(&x, None).unwrap());
        let bytes = std::fs::read(dir.path().join("head.w_o.bin")).unwrap();
        assert_eq!(bytes.len(), 8 * 4 * 2);
        assert_eq!(
            f64::from_le_bytes(bytes[..8].try_into().unwrap()),
            model.params.get(model.ids.w_o).data[0]
        );
    }

    #[test]
    fn corrupt_file_is_rejected() {
        let model = HstModel::new(HstModelConfig { vocab_size: 8, n_base: 9, ..Default::default() }, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&model, dir.path()).unwrap();
        std::fs::write(dir.path().join("head.w_o.bin"), [0u8; 3]).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
