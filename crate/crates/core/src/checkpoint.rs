//! Backbone checkpoint adapter.
//!
//! Checkpoints are safetensors files. Tensor names are the guided-diffusion
//! `UNetModel` state-dict keys (for example `input_blocks.1.0.in_layers.2.weight`
//! or `middle_block.1.qkv.weight`) with their PyTorch shapes, stored as F32 or
//! F64. The safetensors header metadata must carry:
//!
//! * `format` = `diffprobe-unet`
//! * `unet_config`: JSON object matching [`UnetConfig`]
//! * `betas`: JSON array of the model's β table (this overrides the default schedule)
//!
//! `scripts/convert_adm_checkpoint.py` produces such a file from an original
//! `.pt` state dict.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::backbone::{Backbone, BackboneKind};
use crate::error::{Error, LoadError, Result};
use crate::nn::Params;
use crate::schedule::NoiseSchedule;
use crate::unet::{Unet, UnetConfig};

pub const FORMAT_TAG: &str = "diffprobe-unet";

/// Geometry the caller expects a checkpoint to have.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpectedGeometry {
    pub input_resolution: Option<usize>,
    pub decoder_block_count: usize,
}

impl ExpectedGeometry {
    pub fn adm_256() -> Self {
        Self {
            input_resolution: Some(256),
            decoder_block_count: 18,
        }
    }
}

pub fn save_backbone(backbone: &Backbone, path: &Path) -> Result<()> {
    let net = backbone.net();
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = net
        .named_params()
        .into_iter()
        .map(|(name, p)| {
            let data = p.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name, p.shape().to_vec(), data)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Param(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT_TAG.to_string());
    meta.insert("unet_config".to_string(), serde_json::to_string(net.config())?);
    meta.insert(
        "betas".to_string(),
        serde_json::to_string(backbone.descriptor().schedule.betas())?,
    );
    let buf = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Param(e.to_string()))?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, buf)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Loads a frozen backbone. The result is immutable: it cannot be passed to
/// denoise training.
pub fn load_pretrained_backbone(path: &Path, expected: &ExpectedGeometry) -> Result<Backbone> {
    let net_schedule = read_checkpoint(path)?;
    let (net, schedule) = net_schedule;
    let cfg = net.config();
    if let Some(res) = expected.input_resolution {
        if cfg.image_size != res {
            return Err(LoadError::GeometryMismatch {
                field: "input_resolution",
                expected: res,
                found: cfg.image_size,
            }
            .into());
        }
    }
    if cfg.decoder_block_count() != expected.decoder_block_count {
        return Err(LoadError::GeometryMismatch {
            field: "decoder_block_count",
            expected: expected.decoder_block_count,
            found: cfg.decoder_block_count(),
        }
        .into());
    }
    Ok(Backbone::from_parts(net, schedule, BackboneKind::Pretrained))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    LoadError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
    .into()
}

fn read_checkpoint(path: &Path) -> Result<(Unet, NoiseSchedule)> {
    if !path.exists() {
        return Err(LoadError::Missing(path.to_path_buf()).into());
    }
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(path, e.to_string()))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(path, e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| corrupt(path, "no header metadata"))?;
    if meta.get("format").map(String::as_str) != Some(FORMAT_TAG) {
        return Err(corrupt(path, format!("format tag is not {FORMAT_TAG}")));
    }
    let cfg: UnetConfig = serde_json::from_str(
        meta.get("unet_config")
            .ok_or_else(|| corrupt(path, "missing unet_config"))?,
    )
    .map_err(|e| corrupt(path, format!("unet_config: {e}")))?;
    let betas: Vec<f64> = serde_json::from_str(
        meta.get("betas")
            .ok_or_else(|| corrupt(path, "missing betas"))?,
    )
    .map_err(|e| corrupt(path, format!("betas: {e}")))?;
    let schedule = NoiseSchedule::from_betas(betas).map_err(|e| corrupt(path, e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Unet::new(cfg, &mut rng).map_err(|e| corrupt(path, e.to_string()))?;
    let mut seen = 0usize;
    for (name, mut p) in net.named_params_mut() {
        let view = st
            .tensor(&name)
            .map_err(|_| corrupt(path, format!("missing tensor {name}")))?;
        if view.shape() != p.shape() {
            return Err(corrupt(
                path,
                format!("tensor {name} has shape {:?}, expected {:?}", view.shape(), p.shape()),
            ));
        }
        let data = view.data();
        match view.dtype() {
            Dtype::F32 => {
                for (dst, chunk) in p.iter_mut().zip(data.chunks_exact(4)) {
                    *dst = f32::from_le_bytes(chunk.try_into().unwrap());
                }
            }
            Dtype::F64 => {
                for (dst, chunk) in p.iter_mut().zip(data.chunks_exact(8)) {
                    *dst = f64::from_le_bytes(chunk.try_into().unwrap()) as f32;
                }
            }
            other => return Err(corrupt(path, format!("tensor {name}: unsupported dtype {other:?}"))),
        }
        seen += 1;
    }
    let total = st.names().len();
    if total > seen {
        warn!("{}: ignoring {} tensors not used by the UNet", path.display(), total - seen);
    }
    Ok((net, schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::DenoiseTraining;

    #[test]
    fn roundtrip_preserves_fingerprint_and_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.safetensors");
        let toy = Backbone::toy(32, 8, 3).unwrap();
        save_backbone(&toy, &path).unwrap();
        let exp = ExpectedGeometry {
            input_resolution: Some(32),
            decoder_block_count: 18,
        };
        let loaded = load_pretrained_backbone(&path, &exp).unwrap();
        assert_eq!(loaded.descriptor(), toy.descriptor());
        assert_eq!(loaded.kind(), BackboneKind::Pretrained);
        let err = loaded.train_toy(&[], &DenoiseTraining { steps: 1, ..Default::default() });
        assert!(matches!(err, Err(Error::Immutable(_))));
    }

    #[test]
    fn adm_layout_at_256_loads_with_adm_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adm.safetensors");
        let cfg = UnetConfig {
            model_channels: 32,
            num_head_channels: 32,
            ..UnetConfig::adm_256_uncond()
        };
        let net = Unet::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let adm = Backbone::from_parts(net, NoiseSchedule::default(), BackboneKind::Pretrained);
        save_backbone(&adm, &path).unwrap();
        let loaded = load_pretrained_backbone(&path, &ExpectedGeometry::adm_256()).unwrap();
        assert_eq!(loaded.current_fingerprint(), adm.current_fingerprint());
        assert_eq!(loaded.descriptor().geometry.len(), 18);
        assert_eq!(loaded.descriptor().block(6).unwrap().height, 32);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.safetensors");
        save_backbone(&Backbone::toy(32, 8, 3).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let exp = ExpectedGeometry { input_resolution: None, decoder_block_count: 18 };
        assert!(matches!(
            load_pretrained_backbone(&path, &exp),
            Err(Error::Load(LoadError::Corrupt { .. }))
        ));
    }

    #[test]
    fn missing_and_mismatched() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.safetensors");
        let exp = ExpectedGeometry::adm_256();
        assert!(matches!(
            load_pretrained_backbone(&missing, &exp),
            Err(Error::Load(LoadError::Missing(_)))
        ));
        let path = dir.path().join("toy.safetensors");
        save_backbone(&Backbone::toy(32, 8, 3).unwrap(), &path).unwrap();
        let exp = ExpectedGeometry { input_resolution: None, decoder_block_count: 12 };
        let err = load_pretrained_backbone(&path, &exp).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("12") && msg.contains("18"), "{msg}");
    }
}
