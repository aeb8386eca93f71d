//! Self-describing checkpoint files.
//!
//! A checkpoint is a safetensors container whose tensors are written in
//! registry (construction) order under their registry names, plus a single
//! `coad` metadata key holding a JSON document with the format version,
//! variant tag, architecture echo and training progress. One metadata key
//! and a fixed tensor order keep serialization byte-deterministic, so a
//! save → load → save round trip reproduces the file exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, Variant};
use crate::error::{Error, Result};

/// Bumped on any incompatible layout change.
pub const FORMAT_VERSION: u32 = 1;

const META_KEY: &str = "coad";

#[derive(Debug, Serialize, Deserialize)]
struct MetaDoc {
    version: u32,
    variant: String,
    step: u64,
    epoch: u64,
    config: ModelConfig,
}

/// Writes the model to `path` (safetensors, deterministic bytes).
pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let doc = MetaDoc {
        version: FORMAT_VERSION,
        variant: model.variant().as_str().to_string(),
        step: model.step(),
        epoch: model.epoch(),
        config: *model.config(),
    };
    let mut metadata = HashMap::new();
    metadata.insert(META_KEY.to_string(), serde_json::to_string(&doc)?);

    let mut buffers: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, var) in model.named_parameters() {
        let t = var.as_tensor();
        let dims = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let (dtype, bytes) = match t.dtype() {
            DType::F32 => {
                let v = flat.to_vec1::<f32>()?;
                (Dtype::F32, v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>())
            }
            DType::F64 => {
                let v = flat.to_vec1::<f64>()?;
                (Dtype::F64, v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>())
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has unsupported dtype {other:?}"
                )))
            }
        };
        buffers.push((name.clone(), dtype, dims, bytes));
    }
    let views: Vec<(&str, TensorView)> = buffers
        .iter()
        .map(|(name, dtype, dims, bytes)| {
            TensorView::new(*dtype, dims.clone(), bytes)
                .map(|view| (name.as_str(), view))
                .map_err(|e| Error::Checkpoint(format!("cannot view {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;

    safetensors::serialize_to_file(views, Some(metadata), path)
        .map_err(|e| Error::Checkpoint(format!("cannot write {}: {e}", path.display())))
}

/// Reads a checkpoint back into a model on the given device. The dtype is
/// taken from the stored tensors; step and epoch counters are restored.
pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, st_meta) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{} is not a checkpoint: {e}", path.display())))?;
    let meta_map = st_meta
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no metadata", path.display())))?;
    let doc: MetaDoc = serde_json::from_str(
        meta_map
            .get(META_KEY)
            .ok_or_else(|| Error::Checkpoint(format!("{} has no {META_KEY} metadata", path.display())))?,
    )?;
    if doc.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (this build reads {FORMAT_VERSION})",
            doc.version
        )));
    }
    let variant = Variant::from_str(&doc.variant)?;
    if variant != doc.config.variant {
        return Err(Error::Checkpoint(format!(
            "variant tag {} disagrees with config variant {}",
            doc.variant, doc.config.variant
        )));
    }

    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    let dtype = tensors
        .get("patch_proj.weight")
        .ok_or_else(|| Error::Checkpoint("checkpoint is missing patch_proj.weight".into()))?
        .dtype();
    let mut model = Model::new(doc.config, 0, device, dtype)?;
    let named: Vec<(String, candle_core::Var)> = model.named_parameters().to_vec();
    for (name, var) in &named {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing tensor {name}")))?;
        if !t
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Checkpoint(format!("tensor {name} contains non-finite values")));
        }
        var.set(t)?;
    }
    if tensors.len() != named.len() {
        let known: Vec<&String> = named.iter().map(|(n, _)| n).collect();
        let extra: Vec<String> = tensors
            .keys()
            .filter(|k| !known.iter().any(|n| n == k))
            .cloned()
            .collect();
        return Err(Error::Checkpoint(format!(
            "checkpoint holds unexpected tensors: {}",
            extra.join(", ")
        )));
    }
    model.set_progress(doc.step, doc.epoch);
    Ok(model)
}

/// SHA-256 of the checkpoint file, hex-encoded (cache key material).
pub fn sha256_hex(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    fn tiny_model(variant: Variant, dtype: DType) -> Model {
        Model::new(tiny_config(variant), 21, &Device::Cpu, dtype).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for variant in Variant::ALL {
            let mut model = tiny_model(variant, DType::F32);
            model.set_progress(17, 3);
            let p1 = dir.path().join(format!("{variant}.safetensors"));
            let p2 = dir.path().join(format!("{variant}-again.safetensors"));
            save(&model, &p1).unwrap();
            let loaded = load(&p1, &Device::Cpu).unwrap();
            assert_eq!(loaded.step(), 17);
            assert_eq!(loaded.epoch(), 3);
            assert_eq!(loaded.config(), model.config());
            save(&loaded, &p2).unwrap();
            let b1 = fs::read(&p1).unwrap();
            let b2 = fs::read(&p2).unwrap();
            assert_eq!(b1, b2, "round trip must be byte-identical for {variant}");
        }
    }

    #[test]
    fn parameters_survive_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(Variant::VitCmDwt, DType::F64);
        let path = dir.path().join("m.safetensors");
        save(&model, &path).unwrap();
        let loaded = load(&path, &Device::Cpu).unwrap();
        assert_eq!(loaded.dtype(), DType::F64);
        for ((na, va), (nb, vb)) in model.named_parameters().iter().zip(loaded.named_parameters())
        {
            assert_eq!(na, nb);
            let a = va.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = vb.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(a, b, "{na} must round trip exactly");
        }
    }

    #[test]
    fn missing_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(Variant::VitCm, DType::F32);
        let path = dir.path().join("m.safetensors");
        save(&model, &path).unwrap();

        // Re-serialize without the last tensor but with the same metadata.
        let bytes = fs::read(&path).unwrap();
        let (_, st_meta) = SafeTensors::read_metadata(&bytes).unwrap();
        let metadata = st_meta.metadata().clone().unwrap();
        let st = SafeTensors::deserialize(&bytes).unwrap();
        let mut names: Vec<String> = model
            .named_parameters()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        names.pop();
        let views: Vec<(String, TensorView)> =
            names.iter().map(|n| (n.clone(), st.tensor(n).unwrap())).collect();
        let truncated = dir.path().join("truncated.safetensors");
        safetensors::serialize_to_file(views, Some(metadata), &truncated).unwrap();

        let err = load(&truncated, &Device::Cpu).err().expect("truncated checkpoint must fail");
        assert!(err.to_string().contains("missing tensor"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(Variant::VitCm, DType::F32);
        let path = dir.path().join("m.safetensors");
        save(&model, &path).unwrap();

        let bytes = fs::read(&path).unwrap();
        let (_, st_meta) = SafeTensors::read_metadata(&bytes).unwrap();
        let mut metadata = st_meta.metadata().clone().unwrap();
        let doc = metadata.get(META_KEY).unwrap().replace("\"version\":1", "\"version\":999");
        metadata.insert(META_KEY.to_string(), doc);
        let st = SafeTensors::deserialize(&bytes).unwrap();
        let views: Vec<(String, TensorView)> = model
            .named_parameters()
            .iter()
            .map(|(n, _)| (n.clone(), st.tensor(n).unwrap()))
            .collect();
        let bumped = dir.path().join("bumped.safetensors");
        safetensors::serialize_to_file(views, Some(metadata), &bumped).unwrap();

        let err = load(&bumped, &Device::Cpu).err().expect("bumped version must fail");
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn hash_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(Variant::VitCm, DType::F32);
        let path = dir.path().join("m.safetensors");
        save(&model, &path).unwrap();
        let h1 = sha256_hex(&path).unwrap();
        let h2 = sha256_hex(&path).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);
    }
}
