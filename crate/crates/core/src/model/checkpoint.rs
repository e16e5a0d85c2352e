//! Checkpoints are safetensors archives: one tensor per parameter or buffer
//! (named like `heads.cls.tower.0.conv.weight`) plus string metadata holding
//! the model config as JSON, the training epoch and the scalar dtype.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::layers::Module;
use super::{ModelConfig, Network};
use crate::error::{FearError, Result};
use crate::float::Float;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    /// Last completed training epoch (0 for untrained weights).
    pub epoch: usize,
    pub dtype: String,
}

fn ck_err(e: impl std::fmt::Display) -> FearError {
    FearError::Checkpoint(e.to_string())
}

pub fn save_checkpoint<T: Float>(net: &Network<T>, epoch: usize, path: &Path) -> Result<()> {
    let mut copy = net.clone();
    let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    copy.visit("", &mut |slot| {
        named.push((slot.name, slot.shape, T::to_le_bytes_vec(slot.value)));
    });
    let views = named
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(T::DTYPE, shape.clone(), bytes).map(|v| (name.clone(), v))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(ck_err)?;
    let mut meta = HashMap::new();
    meta.insert("config".to_string(), serde_json::to_string(net.config())?);
    meta.insert("epoch".to_string(), epoch.to_string());
    meta.insert("dtype".to_string(), format!("{:?}", T::DTYPE));
    let bytes = safetensors::serialize(views, Some(meta)).map_err(ck_err)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads a checkpoint into a network of precision `T`, converting if the
/// stored dtype differs.
pub fn load_checkpoint<T: Float>(path: &Path) -> Result<(Network<T>, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    let (_, metadata) = SafeTensors::read_metadata(&bytes).map_err(ck_err)?;
    let info = metadata
        .metadata()
        .as_ref()
        .ok_or_else(|| ck_err("missing metadata"))?;
    let config: ModelConfig = serde_json::from_str(
        info.get("config")
            .ok_or_else(|| ck_err("missing config metadata"))?,
    )?;
    let epoch = info
        .get("epoch")
        .and_then(|e| e.parse().ok())
        .unwrap_or(0);
    let dtype = info.get("dtype").cloned().unwrap_or_default();
    let tensors = SafeTensors::deserialize(&bytes).map_err(ck_err)?;
    let mut net = Network::<T>::new(config.clone())?;
    let mut failure: Option<FearError> = None;
    net.visit("", &mut |slot| {
        if failure.is_some() {
            return;
        }
        let view = match tensors.tensor(&slot.name) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(ck_err(format!("{}: {e}", slot.name)));
                return;
            }
        };
        if view.shape() != slot.shape.as_slice() {
            failure = Some(FearError::ShapeMismatch {
                expected: slot.shape.clone(),
                actual: view.shape().to_vec(),
            });
            return;
        }
        let values: Vec<f64> = match view.dtype() {
            safetensors::Dtype::F64 => f64::from_le_bytes_slice(view.data()),
            safetensors::Dtype::F32 => f32::from_le_bytes_slice(view.data())
                .into_iter()
                .map(f64::from)
                .collect(),
            other => {
                failure = Some(ck_err(format!("unsupported dtype {other:?}")));
                return;
            }
        };
        for (d, v) in slot.value.iter_mut().zip(values) {
            *d = T::c(v);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((
        net,
        CheckpointMeta {
            config,
            epoch,
            dtype,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_inference_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.safetensors");
        let mut net = Network::<f64>::new(ModelConfig::miniature()).unwrap();
        net.set_raw_mix(0.3);
        net.adjust.bn.running_mean.fill(0.25);
        save_checkpoint(&net, 7, &path).unwrap();
        let (loaded, meta) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(meta.epoch, 7);
        assert_eq!(meta.config, *net.config());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Array3::from_shape_simple_fn((64, 64, 3), || rng.random::<f32>());
        let a = net.extract_features(&img).unwrap();
        let b = loaded.extract_features(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(loaded.raw_mix(), Some(0.3));
    }
}
