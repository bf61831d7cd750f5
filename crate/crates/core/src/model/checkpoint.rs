//! Checkpoint directory: `weights.bin` (little-endian reals, parameters then EMA
//! shadow) and `manifest.json` describing every tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::ParamLayout;
use super::{ModelConfig, ModelError, ModelState, Precision};

const FORMAT_VERSION: u32 = 1;
const WEIGHTS: &str = "weights.bin";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    shape: [usize; 2],
    /// Element offset of the parameter tensor in the blob.
    offset: usize,
    /// Element offset of the EMA tensor, if stored.
    ema_offset: Option<usize>,
    frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    config: ModelConfig,
    total_elements: usize,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

fn dtype(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32_le",
        Precision::F64 => "f64_le",
    }
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<(), ModelError> {
    save_checkpoint_meta(state, &BTreeMap::new(), path)
}

/// Saves with free-form metadata (stage, gate results). The directory is written
/// under a temporary name and renamed into place.
pub fn save_checkpoint_meta(
    state: &ModelState,
    meta: &BTreeMap<String, serde_json::Value>,
    path: &Path,
) -> Result<(), ModelError> {
    let wide = state.cfg.precision == Precision::F64;
    let mut blob = Vec::new();
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(state.params.len());
    let push = |t: &Array2<f64>, blob: &mut Vec<u8>| {
        for &v in t.iter() {
            if wide {
                blob.extend_from_slice(&v.to_le_bytes());
            } else {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    };
    for (i, info) in state.layout.tensors.iter().enumerate() {
        push(&state.params[i], &mut blob);
        let n = info.shape.0 * info.shape.1;
        tensors.push(TensorEntry {
            name: info.name.clone(),
            group: state.layout.groups[info.group].name.clone(),
            shape: [info.shape.0, info.shape.1],
            offset,
            ema_offset: None,
            frozen: state.frozen[info.group],
        });
        offset += n;
    }
    for (i, info) in state.layout.tensors.iter().enumerate() {
        push(&state.ema[i], &mut blob);
        tensors[i].ema_offset = Some(offset);
        offset += info.shape.0 * info.shape.1;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: dtype(state.cfg.precision).into(),
        config: state.cfg.clone(),
        total_elements: offset,
        tensors,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| ModelError::Corrupt(e.to_string()))?;

    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let name = path.file_name().ok_or_else(|| ModelError::Config("checkpoint path has no name".into()))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fs::write(tmp.join(WEIGHTS), &blob)?;
    fs::write(tmp.join(MANIFEST), &json)?;
    if path.exists() {
        fs::remove_dir_all(path)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, ModelError> {
    load_checkpoint_meta(path).map(|(s, _)| s)
}

/// Loads and checks every tensor shape against `expected`; a mismatch names the group.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ModelState, ModelError> {
    let (state, _) = load_checkpoint_meta(path)?;
    check_compatible(&state, expected)?;
    Ok(state)
}

pub fn check_compatible(state: &ModelState, expected: &ModelConfig) -> Result<(), ModelError> {
    expected.validate()?;
    let want = ParamLayout::new(expected);
    for info in &want.tensors {
        let gname = &want.groups[info.group].name;
        let found = state.layout.tensors.iter().find(|t| t.name == info.name);
        match found {
            None => return Err(ModelError::MissingGroup { group: gname.clone() }),
            Some(t) if t.shape != info.shape => {
                return Err(ModelError::Shape(format!(
                    "group `{gname}`: tensor {} has shape {:?} in the checkpoint but the config needs {:?}",
                    info.name, t.shape, info.shape
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn load_checkpoint_meta(path: &Path) -> Result<(ModelState, BTreeMap<String, serde_json::Value>), ModelError> {
    let json = fs::read(path.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_slice(&json).map_err(|e| ModelError::Corrupt(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ModelError::Corrupt(format!("unsupported format version {}", manifest.format_version)));
    }
    let cfg = manifest.config.clone();
    cfg.validate()?;
    let width = match manifest.dtype.as_str() {
        "f32_le" => 4,
        "f64_le" => 8,
        other => return Err(ModelError::Corrupt(format!("unknown dtype {other}"))),
    };
    let blob = fs::read(path.join(WEIGHTS))?;
    if blob.len() != manifest.total_elements * width {
        return Err(ModelError::Corrupt(format!(
            "weights blob holds {} bytes, manifest expects {}",
            blob.len(),
            manifest.total_elements * width
        )));
    }
    let read = |offset: usize, shape: [usize; 2]| -> Result<Array2<f64>, ModelError> {
        let n = shape[0] * shape[1];
        if offset + n > manifest.total_elements {
            return Err(ModelError::Corrupt("tensor extends past the end of the blob".into()));
        }
        let bytes = &blob[offset * width..(offset + n) * width];
        let vals: Vec<f64> = if width == 4 {
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        } else {
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        };
        Ok(Array2::from_shape_vec((shape[0], shape[1]), vals).expect("length checked"))
    };

    let layout = Arc::new(ParamLayout::new(&cfg));
    if manifest.tensors.len() != layout.tensors.len() {
        return Err(ModelError::Corrupt(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            layout.tensors.len()
        )));
    }
    let mut params = Vec::with_capacity(layout.tensors.len());
    let mut ema = Vec::with_capacity(layout.tensors.len());
    let mut frozen = vec![false; layout.groups.len()];
    for (info, entry) in layout.tensors.iter().zip(&manifest.tensors) {
        let gname = &layout.groups[info.group].name;
        if entry.name != info.name {
            return Err(ModelError::MissingGroup { group: gname.clone() });
        }
        if entry.shape != [info.shape.0, info.shape.1] {
            return Err(ModelError::Shape(format!(
                "group `{gname}`: tensor {} stored as {:?}, expected {:?}",
                info.name, entry.shape, info.shape
            )));
        }
        let p = read(entry.offset, entry.shape)?;
        let e = match entry.ema_offset {
            Some(o) => read(o, entry.shape)?,
            None => p.clone(),
        };
        params.push(p);
        ema.push(e);
        frozen[info.group] = entry.frozen;
    }
    Ok((ModelState { cfg, layout, params, ema, frozen }, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::default();
        let mut s = init_model(&cfg, 11).unwrap();
        s.jitter(2, 0.01);
        s.frozen[3] = true;
        let path = dir.path().join("ckpt-1");
        save_checkpoint(&s, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn wide_precision_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.precision = Precision::F64;
        let mut s = init_model(&cfg, 4).unwrap();
        s.jitter(9, 0.1);
        let path = dir.path().join("c");
        save_checkpoint(&s, &path).unwrap();
        save_checkpoint(&s, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), s);
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let s = init_model(&ModelConfig::tiny(), 1).unwrap();
        let path = dir.path().join("c");
        save_checkpoint(&s, &path).unwrap();
        let w = path.join(WEIGHTS);
        let bytes = fs::read(&w).unwrap();
        fs::write(&w, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Corrupt(_))));
    }

    #[test]
    fn metaquery_mismatch_names_the_table() {
        let dir = tempfile::tempdir().unwrap();
        let s = init_model(&ModelConfig::default(), 1).unwrap();
        let path = dir.path().join("c");
        save_checkpoint(&s, &path).unwrap();
        let cfg = ModelConfig { num_metaqueries: 8, ..ModelConfig::default() };
        let err = load_checkpoint_for(&path, &cfg).unwrap_err();
        assert!(err.to_string().contains("metaquery"), "{err}");
    }
}
