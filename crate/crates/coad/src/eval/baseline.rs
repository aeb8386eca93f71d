//! Generic pretrained-backbone baseline.
//!
//! Loads a small convolutional feature extractor from a `safetensors` asset
//! and embeds crops by global average pooling of the final feature map.
//! This stands in for an off-the-shelf ImageNet backbone in the evaluation
//! grid: no knowledge of the row, no color/content disentanglement.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::embed::ObjectFeature;
use crate::error::{Error, Result};
use crate::object_image::ObjectImage;

/// Convolutional backbone read from a `safetensors` file.
///
/// Expected tensors: `conv.0.weight` `[c_out, c_in, 3, 3]` and
/// `conv.0.bias` `[c_out]`, then `conv.1.*`, … with consecutive indices.
/// The first layer must take 3 input channels. Each layer runs with
/// stride 2, padding 1 and a ReLU; features are the spatial mean of the
/// last activation, L2-normalized.
pub struct PretrainedBackbone {
    layers: Vec<(Tensor, Tensor)>,
    input_size: usize,
    device: Device,
}

impl PretrainedBackbone {
    /// Loads the backbone weights. A missing file is a configuration error
    /// with remediation advice rather than a bare I/O failure.
    pub fn load(path: impl AsRef<Path>, input_size: usize) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::config(format!(
                "pretrained backbone asset not found at {}; provide a safetensors \
                 file with conv.N.weight/conv.N.bias tensors or generate a fixture \
                 with write_synthetic_backbone",
                path.display()
            )));
        }
        if input_size < 8 {
            return Err(Error::config("backbone input_size must be at least 8"));
        }
        let device = Device::Cpu;
        let tensors: HashMap<String, Tensor> =
            candle_core::safetensors::load(path, &device)?;
        let mut layers = Vec::new();
        for idx in 0.. {
            let (w, b) = (format!("conv.{idx}.weight"), format!("conv.{idx}.bias"));
            match (tensors.get(&w), tensors.get(&b)) {
                (Some(w), Some(b)) => {
                    layers.push((w.to_dtype(DType::F32)?, b.to_dtype(DType::F32)?))
                }
                (None, None) => break,
                _ => {
                    return Err(Error::checkpoint(format!(
                        "backbone layer {idx} has a weight/bias mismatch in {}",
                        path.display()
                    )))
                }
            }
        }
        if layers.is_empty() {
            return Err(Error::checkpoint(format!(
                "no conv.N.weight tensors found in {}",
                path.display()
            )));
        }
        for (idx, (w, _)) in layers.iter().enumerate() {
            let dims = w.dims();
            if dims.len() != 4 {
                return Err(Error::checkpoint(format!(
                    "conv.{idx}.weight must be 4-D, got {dims:?}"
                )));
            }
            let expect_in = if idx == 0 { 3 } else { layers[idx - 1].0.dims()[0] };
            if dims[1] != expect_in {
                return Err(Error::checkpoint(format!(
                    "conv.{idx}.weight expects {expect_in} input channels, got {}",
                    dims[1]
                )));
            }
        }
        Ok(Self { layers, input_size, device })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// Embedding dimension (channel count of the last layer).
    pub fn feature_dim(&self) -> usize {
        self.layers.last().map(|(w, _)| w.dims()[0]).unwrap_or(0)
    }

    fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut x = batch.clone();
        for (w, b) in &self.layers {
            x = x.conv2d(w, 1, 2, 1, 1)?;
            x = x.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?;
            x = x.relu()?;
        }
        // (batch, channels, h, w) → spatial mean → (batch, channels).
        Ok(x.mean(3)?.mean(2)?)
    }

    /// Embeds the given crops; ids are `crop-{index}`.
    pub fn features(&self, crops: &[ObjectImage]) -> Result<Vec<ObjectFeature>> {
        if crops.len() < 2 {
            return Err(Error::data("a row needs at least 2 object crops"));
        }
        let resized: Vec<ObjectImage> = crops
            .iter()
            .enumerate()
            .map(|(i, c)| c.resize(self.input_size).map_err(|e| e.at_crop(i)))
            .collect::<Result<_>>()?;
        let tensors: Vec<Tensor> = resized
            .iter()
            .map(|c| c.to_tensor(DType::F32, &self.device))
            .collect::<Result<_>>()?;
        let batch = Tensor::stack(&tensors, 0)?;
        let pooled = self.forward(&batch)?.to_dtype(DType::F64)?;
        let rows: Vec<Vec<f64>> = pooled.to_vec2()?;
        rows.into_iter()
            .enumerate()
            .map(|(i, mut v)| {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for x in &mut v {
                        *x /= norm;
                    }
                }
                ObjectFeature::new(format!("crop-{i}"), v).map_err(|e| e.at_crop(i))
            })
            .collect()
    }
}

/// Writes a deterministic random-weights backbone asset — a stand-in for a
/// real pretrained checkpoint in tests, examples, and offline runs. Random
/// conv features are a classic weak-but-nontrivial baseline.
pub fn write_synthetic_backbone(path: impl AsRef<Path>, seed: u64) -> Result<()> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dims: [(usize, usize); 3] = [(16, 3), (32, 16), (64, 32)];
    let mut views = Vec::new();
    for (idx, (c_out, c_in)) in dims.iter().enumerate() {
        let fan_in = (c_in * 9) as f32;
        let bound = (2.0 / fan_in).sqrt();
        let w: Vec<f32> =
            (0..c_out * c_in * 9).map(|_| rng.gen_range(-bound..bound)).collect();
        let b = vec![0.0f32; *c_out];
        views.push((format!("conv.{idx}.weight"), vec![*c_out, *c_in, 3, 3], w));
        views.push((format!("conv.{idx}.bias"), vec![*c_out], b));
    }
    let data: Vec<(String, safetensors::tensor::TensorView)> = views
        .iter()
        .map(|(name, shape, vals)| {
            let bytes: &[u8] = bytemuck_cast(vals);
            safetensors::tensor::TensorView::new(
                safetensors::Dtype::F32,
                shape.clone(),
                bytes,
            )
            .map(|v| (name.clone(), v))
            .map_err(|e| Error::checkpoint(format!("building backbone tensor: {e}")))
        })
        .collect::<Result<_>>()?;
    safetensors::serialize_to_file(data, None, path)
        .map_err(|e| Error::checkpoint(format!("writing backbone asset: {e}")))?;
    Ok(())
}

fn bytemuck_cast(vals: &[f32]) -> &[u8] {
    // f32 slices are always validly viewable as bytes (little-endian hosts;
    // safetensors stores little-endian and this workspace targets LE).
    unsafe { std::slice::from_raw_parts(vals.as_ptr().cast::<u8>(), vals.len() * 4) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn toy_crop(seed: u64) -> ObjectImage {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((3, 24, 24), |_| rng.gen_range(0.0..1.0));
        ObjectImage::new(data).unwrap()
    }

    #[test]
    fn missing_asset_is_config_error() {
        let err = PretrainedBackbone::load("/nonexistent/backbone.safetensors", 64)
            .err()
            .expect("should fail");
        let msg = err.to_string();
        assert!(msg.contains("not found"), "unhelpful message: {msg}");
    }

    #[test]
    fn synthetic_backbone_roundtrip_and_features() {
        let dir = tempfile::tempdir().unwrap();
        let asset = dir.path().join("backbone.safetensors");
        write_synthetic_backbone(&asset, 11).unwrap();
        let backbone = PretrainedBackbone::load(&asset, 32).unwrap();
        assert_eq!(backbone.feature_dim(), 64);
        let crops = vec![toy_crop(0), toy_crop(1), toy_crop(2)];
        let feats = backbone.features(&crops).unwrap();
        assert_eq!(feats.len(), 3);
        for f in &feats {
            assert_eq!(f.len(), 64);
            let norm: f64 = f.vector().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "norm {norm}");
        }
        // Deterministic across loads.
        let again = PretrainedBackbone::load(&asset, 32).unwrap();
        let feats2 = again.features(&crops).unwrap();
        assert_eq!(feats[0].vector(), feats2[0].vector());
    }

    #[test]
    fn asset_bytes_are_seeded() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.safetensors");
        let b = dir.path().join("b.safetensors");
        write_synthetic_backbone(&a, 5).unwrap();
        write_synthetic_backbone(&b, 5).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
