//! On-disk parameter snapshots: `manifest.json` plus `params.bin`, a flat
//! little-endian f64 blob holding value, Adam first moment and Adam second
//! moment of every entry in manifest order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamEntry, ParameterStore};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "bonekin-ckpt-1";
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "params.bin";
const BLOBS: [&str; 3] = ["value", "adam_m", "adam_v"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub step_count: u64,
    pub config_hash: String,
    pub entries: Vec<ManifestEntry>,
    pub blobs: Vec<String>,
    /// Caller-defined state (training progress, effective config).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, store: &ParameterStore, config_hash: &str, extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        version: CHECKPOINT_VERSION.into(),
        step_count: store.step_count(),
        config_hash: config_hash.into(),
        entries: store
            .entries()
            .iter()
            .map(|e| ManifestEntry { name: e.name.clone(), shape: e.shape.clone(), trainable: e.trainable })
            .collect(),
        blobs: BLOBS.iter().map(|s| s.to_string()).collect(),
        extra,
    };
    let mut w = BufWriter::new(fs::File::create(dir.join(BLOB_FILE))?);
    for e in store.entries() {
        for blob in [&e.value, &e.adam_m, &e.adam_v] {
            for v in blob {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParameterStore, Manifest)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format { line: 1, message: format!("unsupported checkpoint version `{}`", manifest.version) });
    }
    if manifest.blobs != BLOBS {
        return Err(Error::Format { line: 1, message: format!("unexpected blob list {:?}", manifest.blobs) });
    }
    let bytes = fs::read(dir.join(BLOB_FILE))?;
    let total: usize = manifest.entries.iter().map(|e| 3 * e.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 8 {
        return Err(Error::Format {
            line: 0,
            message: format!("parameter blob has {} bytes, manifest needs {}", bytes.len(), total * 8),
        });
    }
    let mut floats = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut store = ParameterStore::new();
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let value: Vec<f64> = floats.by_ref().take(n).collect();
        let adam_m: Vec<f64> = floats.by_ref().take(n).collect();
        let adam_v: Vec<f64> = floats.by_ref().take(n).collect();
        store.push_loaded(ParamEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            value,
            grad: vec![0.0; n],
            adam_m,
            adam_v,
            trainable: e.trainable,
        })?;
    }
    store.set_step_count(manifest.step_count);
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Adam, Init};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParameterStore::new();
        let w = s.add("w", &[3, 4], Init::HeUniform, &mut rng).unwrap();
        s.add_buffer("bn.mean", &[4], 0.5).unwrap();
        s.entry_mut(w).grad.iter_mut().for_each(|g| *g = 0.1);
        Adam::default().step(&mut s, 1e-3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &s, "abc", serde_json::json!({"epoch": 3})).unwrap();
        let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, s);
        assert_eq!(manifest.config_hash, "abc");
        assert_eq!(manifest.extra["epoch"], 3);
    }

    #[test]
    fn truncated_blob_rejected() {
        let mut s = ParameterStore::new();
        s.add_buffer("b", &[2], 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &s, "", serde_json::Value::Null).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
    }
}
