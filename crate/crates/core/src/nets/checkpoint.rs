//! Checkpoint directories: `config.json` with the network configuration,
//! seed and epoch, plus `params/<name>.bin` per tensor. Each tensor file is
//! the magic `MMT1`, a little-endian `u32` rank, `u32` dims and
//! little-endian `f32` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_model, Model, NetworkConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MMT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub network: NetworkConfig,
    pub seed: u64,
    pub epoch: usize,
    /// Variant label used in reports.
    pub model_name: String,
    /// Dataset modality names feeding the model inputs, in channel order.
    pub input_modalities: Vec<String>,
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("params").join(format!("{name}.bin"))
}

pub fn encode_tensor(shape: &[usize], values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * shape.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let err = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(err("bad tensor magic"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(err("truncated tensor header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(err("tensor payload does not match its shape"));
    }
    let values = bytes[header..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((shape, values))
}

pub fn save_checkpoint(dir: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let cfg = dir.join("config.json");
    fs::write(&cfg, serde_json::to_vec_pretty(meta)?).map_err(|e| Error::io(&cfg, e))?;
    for (name, p) in model.params() {
        let path = tensor_path(dir, &name);
        fs::write(&path, encode_tensor(&p.shape, &p.value)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let cfg = dir.join("config.json");
    Ok(serde_json::from_slice(&fs::read(&cfg).map_err(|e| Error::io(&cfg, e))?)?)
}

/// Rebuilds the model from `config.json` and fills every tensor from disk.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let mut model = build_model(&meta.network, meta.seed)?;
    for (name, p) in model.params_mut() {
        let path = tensor_path(dir, &name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (shape, values) = decode_tensor(&bytes)?;
        if shape != p.shape {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?} on disk, model expects {:?}", p.shape)));
        }
        p.value = values;
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_unet, param_count};
    use proptest::prelude::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = NetworkConfig::unet(2, 2, 2);
        let model = build_unet(&config, 5).unwrap();
        let meta = CheckpointMeta {
            network: config,
            seed: 5,
            epoch: 3,
            model_name: "UNet".into(),
            input_modalities: vec!["A".into(), "B".into()],
        };
        save_checkpoint(dir.path(), &model, &meta).unwrap();
        let (loaded, m2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(param_count(&loaded), param_count(&model));
        for ((n1, p1), (n2, p2)) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.value, p2.value);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let config = NetworkConfig::unet(2, 2, 2);
        let model = build_unet(&config, 5).unwrap();
        let mut meta = CheckpointMeta {
            network: config.clone(),
            seed: 5,
            epoch: 0,
            model_name: "UNet".into(),
            input_modalities: vec![],
        };
        save_checkpoint(dir.path(), &model, &meta).unwrap();
        meta.network.base_width = 3;
        fs::write(dir.path().join("config.json"), serde_json::to_vec(&meta).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn tensor_encoding_round_trips(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let values: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let (s, v) = decode_tensor(&encode_tensor(&shape, &values)).unwrap();
            prop_assert_eq!(s, shape);
            prop_assert_eq!(v, values);
        }
    }
}
