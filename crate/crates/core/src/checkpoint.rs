//! Checkpoint directories: one raw little-endian `f32` file per tensor plus a
//! `manifest.json` describing shapes, dtype, config hash and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Module, Param};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// What the checkpoint holds, e.g. `vae-rgb` or `ldm`.
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    /// Kind-specific metadata such as latent statistics or final losses.
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Hex SHA-256 of the compact JSON encoding of `config`.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).unwrap_or_default();
    hex::encode(Sha256::digest(&bytes))
}

/// In-memory checkpoint: manifest metadata plus named tensors.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub step: u64,
    pub extra: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, config: serde_json::Value) -> Self {
        Checkpoint { kind: kind.to_string(), seed, config, ..Default::default() }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.insert(name.to_string(), (shape, data));
    }

    /// Stores every parameter of `module` under `prefix`.
    pub fn insert_module<M: Module + ?Sized>(&mut self, prefix: &str, module: &M) {
        for p in module.params() {
            self.insert(&format!("{prefix}{}", p.name), p.shape.clone(), p.value.clone());
        }
    }

    /// Restores every parameter of `module` from tensors under `prefix`.
    pub fn load_module<M: Module + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        for p in module.params_mut() {
            let key = format!("{prefix}{}", p.name);
            let (shape, data) = self.get(&key)?;
            if *shape != p.shape {
                return Err(Error::InvalidState(format!("tensor {key}: shape {shape:?}, expected {:?}", p.shape)));
            }
            p.value.copy_from_slice(data);
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<(&Vec<usize>, &Vec<f32>)> {
        self.tensors
            .get(name)
            .map(|(s, d)| (s, d))
            .ok_or_else(|| Error::InvalidState(format!("checkpoint {} is missing tensor {name}", self.kind)))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, (shape, data)) in &self.tensors {
            let file = format!("{}.f32", name.replace('/', "_"));
            let mut bytes = Vec::with_capacity(4 * data.len());
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(dir.join(&file), bytes)?;
            entries.push(TensorEntry { name: name.clone(), file, shape: shape.clone(), dtype: "f32".into() });
        }
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            seed: self.seed,
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            step: self.step,
            tensors: entries,
            extra: self.extra.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint format {}", manifest.format_version)));
        }
        let mut tensors = BTreeMap::new();
        for entry in manifest.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Parse(format!("tensor {}: unsupported dtype {}", entry.name, entry.dtype)));
            }
            let bytes = fs::read(dir.join(&entry.file))?;
            let expected: usize = entry.shape.iter().product();
            if bytes.len() != 4 * expected {
                return Err(Error::Parse(format!("tensor {}: {} bytes for shape {:?}", entry.name, bytes.len(), entry.shape)));
            }
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.insert(entry.name, (entry.shape, data));
        }
        Ok(Checkpoint {
            kind: manifest.kind,
            seed: manifest.seed,
            config: manifest.config,
            step: manifest.step,
            extra: manifest.extra,
            tensors,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Saves optimizer moments next to the parameters they belong to.
pub fn insert_adam(ckpt: &mut Checkpoint, prefix: &str, params: &[&Param], adam: &crate::nn::Adam) {
    for (i, p) in params.iter().enumerate() {
        ckpt.insert(&format!("adam.m.{prefix}{}", p.name), p.shape.clone(), adam.m[i].clone());
        ckpt.insert(&format!("adam.v.{prefix}{}", p.name), p.shape.clone(), adam.v[i].clone());
    }
}

pub fn load_adam(ckpt: &Checkpoint, prefix: &str, params: &[&Param], adam: &mut crate::nn::Adam) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        adam.m[i].clone_from(ckpt.get(&format!("adam.m.{prefix}{}", p.name))?.1);
        adam.v[i].clone_from(ckpt.get(&format!("adam.v.{prefix}{}", p.name))?.1);
    }
    adam.step = ckpt.step;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::new("test", 9, serde_json::json!({"a": 1}));
        ck.step = 12;
        ck.insert("w", vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.25]);
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.step, 12);
        let (shape, data) = back.get("w").unwrap();
        assert_eq!(shape, &vec![2, 2]);
        assert_eq!(data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), ck.get("w").unwrap().1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.config_hash, config_hash(&serde_json::json!({"a": 1})));
    }

    #[test]
    fn missing_dir_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::load(&dir.path().join("nope")), Err(Error::NotFound(_))));
    }
}
