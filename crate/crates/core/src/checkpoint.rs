//! Byte-stable checkpoint format: a flat list of (name, shape, little-endian
//! f64 values) entries covering parameters and buffers, plus a JSON manifest
//! with content hashes for reproducibility checks.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::trainkit::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"TMCK0001";

/// Serialize every parameter and buffer, in insertion order.
pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.value.shape.len() as u32).to_le_bytes());
        for &d in &p.value.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.value.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(store))?;
    Ok(())
}

/// Load values into an already-constructed model's store. Every entry must
/// match an existing parameter in name and shape.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if count != store.len() {
        return Err(Error::Data(format!(
            "checkpoint has {count} entries, model has {}",
            store.len()
        )));
    }
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| Error::Data("invalid parameter name encoding".into()))?;
        let _trainable = take(1)?[0];
        let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        let id = store.lookup(&name)?;
        let p = store.get_mut(id);
        if p.value.shape != shape {
            return Err(Error::Data(format!(
                "shape mismatch for {name}: checkpoint {shape:?}, model {:?}",
                p.value.shape
            )));
        }
        p.value.data = data;
    }
    if pos != bytes.len() {
        return Err(Error::Data("trailing bytes after checkpoint entries".into()));
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Run manifest written next to every CLI artifact. mAP convention: ranks
/// are not interpolated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint_hash: Option<String>,
    pub map_convention: String,
}

impl Manifest {
    pub fn new(
        config: &ModelConfig,
        train: Option<&TrainConfig>,
        seed: u64,
        checkpoint: Option<&[u8]>,
    ) -> Result<Self> {
        let config_json = serde_json::to_string(config)?;
        Ok(Manifest {
            config: config.clone(),
            train: train.cloned(),
            seed,
            config_hash: sha256_hex(config_json.as_bytes()),
            checkpoint_hash: checkpoint.map(sha256_hex),
            map_convention: "non-interpolated".into(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use tempfile::tempdir;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("backbone.w", Tensor::from_vec(vec![2, 2], vec![1.5, -2.0, 0.25, 1e-300]).unwrap())
            .unwrap();
        s.add_buffer("bn.running_mean", Tensor::from_vec(vec![2], vec![0.1, -0.9]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        let store = sample_store();
        save_checkpoint(&store, &path).unwrap();
        let mut restored = sample_store();
        for (_, p) in restored.iter_mut() {
            p.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        load_checkpoint(&mut restored, &path).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(restored.iter()) {
            assert_eq!(a.value.data, b.value.data);
        }
    }

    #[test]
    fn serialization_is_byte_stable() {
        let store = sample_store();
        assert_eq!(checkpoint_bytes(&store), checkpoint_bytes(&store));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        save_checkpoint(&sample_store(), &path).unwrap();
        let mut other = ParamStore::new();
        other.add("backbone.w", Tensor::zeros(vec![4])).unwrap();
        other.add_buffer("bn.running_mean", Tensor::zeros(vec![2])).unwrap();
        let err = load_checkpoint(&mut other, &path).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        save_checkpoint(&sample_store(), &path).unwrap();
        let mut other = ParamStore::new();
        other.add("different.name", Tensor::zeros(vec![2, 2])).unwrap();
        other.add_buffer("bn.running_mean", Tensor::zeros(vec![2])).unwrap();
        assert!(load_checkpoint(&mut other, &path).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        let mut store = sample_store();
        let err = load_checkpoint(&mut store, &path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn manifest_roundtrips_and_hashes_are_stable() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let cfg = ModelConfig::desk_default();
        let bytes = checkpoint_bytes(&sample_store());
        let m1 = Manifest::new(&cfg, Some(&TrainConfig::desk_default()), 7, Some(&bytes)).unwrap();
        m1.save(&path).unwrap();
        let m2 = Manifest::load(&path).unwrap();
        assert_eq!(m1.config_hash, m2.config_hash);
        assert_eq!(m1.checkpoint_hash, m2.checkpoint_hash);
        assert_eq!(m2.seed, 7);
        assert_eq!(m1.config_hash.len(), 64);
    }
}
