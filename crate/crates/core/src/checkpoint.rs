//! Model checkpoints: architecture config (JSON) plus a parameter blob.
//!
//! `<stem>.json` carries the architecture tag, its config, the config hash
//! and the tensor table; `<stem>.bin` carries the tensors back to back in
//! visiting order. Restoring checks the config hash before touching any
//! parameter.

use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{Float, Module};
use crate::volume::{stem_of, with_suffix, write_atomic};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint metadata {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint config hash {found} does not match model config hash {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint tensor layout mismatch: {0}")]
    Layout(String),
}

/// Hex SHA-256 (first 16 hex digits) of a value's JSON serialization.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes to JSON");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Hash of the pipeline configuration that produced this checkpoint.
    #[serde(default)]
    pub pipeline_config_hash: Option<String>,
    pub dtype: String,
    /// Free-form provenance (epoch, selection criterion, ...).
    #[serde(default)]
    pub info: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub payload: Vec<u8>,
}

fn elem_size(dtype: &str) -> Result<usize, CheckpointError> {
    match dtype {
        "f32le" => Ok(4),
        "f64le" => Ok(8),
        other => Err(CheckpointError::Layout(format!("unknown dtype {other}"))),
    }
}

impl Checkpoint {
    /// Snapshots every parameter and buffer of `model`.
    pub fn capture<F: Float, M: Module<F> + ?Sized, C: Serialize>(arch: &str, config: &C, model: &mut M) -> Self {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        model.visit_params("", &mut |name, p| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                kind: TensorKind::Param,
                shape: p.value.shape().to_vec(),
            });
            p.value.iter().for_each(|v| v.write_le(&mut payload));
        });
        model.visit_buffers("", &mut |name, b| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                kind: TensorKind::Buffer,
                shape: b.shape().to_vec(),
            });
            b.iter().for_each(|v| v.write_le(&mut payload));
        });
        Self {
            meta: CheckpointMeta {
                arch: arch.to_string(),
                config: serde_json::to_value(config).expect("config serializes"),
                config_hash: content_hash(config),
                pipeline_config_hash: None,
                dtype: F::DTYPE.to_string(),
                info: Default::default(),
                tensors,
            },
            payload,
        }
    }

    /// Loads parameters into `model` after validating the config hash
    /// against `config` and the tensor table against the model layout.
    pub fn restore<F: Float, M: Module<F> + ?Sized, C: Serialize>(
        &self,
        config: &C,
        model: &mut M,
    ) -> Result<(), CheckpointError> {
        let expected = content_hash(config);
        if expected != self.meta.config_hash {
            return Err(CheckpointError::ConfigMismatch {
                expected,
                found: self.meta.config_hash.clone(),
            });
        }
        let size = elem_size(&self.meta.dtype)?;
        let total: usize = self
            .meta
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if total * size != self.payload.len() {
            return Err(CheckpointError::Layout(format!(
                "payload has {} bytes, tensor table needs {}",
                self.payload.len(),
                total * size
            )));
        }
        let read = |bytes: &[u8]| -> F {
            match size {
                4 => F::cast(f32::from_le_bytes(bytes.try_into().expect("4 bytes")) as f64),
                _ => F::cast(f64::from_le_bytes(bytes.try_into().expect("8 bytes"))),
            }
        };
        let mut offset = 0;
        let mut index = 0;
        let mut error = None;
        let mut load = |name: &str, kind: TensorKind, target: &mut ArrayD<F>| {
            if error.is_some() {
                return;
            }
            let Some(entry) = self.meta.tensors.get(index) else {
                error = Some(format!("model has extra tensor {name}"));
                return;
            };
            index += 1;
            if entry.name != name || entry.kind != kind || entry.shape != target.shape() {
                error = Some(format!(
                    "expected {name} {:?}, checkpoint has {} {:?}",
                    target.shape(),
                    entry.name,
                    entry.shape
                ));
                return;
            }
            let n = target.len();
            let values: Vec<F> = self.payload[offset..offset + n * size]
                .chunks_exact(size)
                .map(read)
                .collect();
            offset += n * size;
            *target = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("shape checked");
        };
        model.visit_params("", &mut |name, p| load(name, TensorKind::Param, &mut p.value));
        model.visit_buffers("", &mut |name, b| load(name, TensorKind::Buffer, b));
        if let Some(e) = error {
            return Err(CheckpointError::Layout(e));
        }
        if index != self.meta.tensors.len() {
            return Err(CheckpointError::Layout(format!(
                "checkpoint has {} tensors, model consumed {index}",
                self.meta.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let stem = stem_of(path);
        let bin = with_suffix(&stem, ".bin");
        write_atomic(&bin, &self.payload).map_err(|source| CheckpointError::Io { path: bin, source })?;
        let json = with_suffix(&stem, ".json");
        let text = serde_json::to_vec_pretty(&self.meta).map_err(|source| CheckpointError::Json {
            path: json.clone(),
            source,
        })?;
        write_atomic(&json, &text).map_err(|source| CheckpointError::Io { path: json, source })
    }

    pub fn read_meta(path: &Path) -> Result<CheckpointMeta, CheckpointError> {
        let json = with_suffix(&stem_of(path), ".json");
        let text = std::fs::read(&json).map_err(|source| CheckpointError::Io {
            path: json.clone(),
            source,
        })?;
        serde_json::from_slice(&text).map_err(|source| CheckpointError::Json { path: json, source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let meta = Self::read_meta(path)?;
        let bin = with_suffix(&stem_of(path), ".bin");
        let payload = std::fs::read(&bin).map_err(|source| CheckpointError::Io { path: bin, source })?;
        Ok(Self { meta, payload })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BatchNorm3d, Linear, Param};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Tiny {
        fc: Linear<f32>,
        bn: BatchNorm3d<f32>,
    }

    impl Module<f32> for Tiny {
        fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
            self.fc.visit_params(&crate::nn::join(prefix, "fc"), f);
            self.bn.visit_params(&crate::nn::join(prefix, "bn"), f);
        }
        fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f32>)) {
            self.bn.visit_buffers(&crate::nn::join(prefix, "bn"), f);
        }
    }

    fn tiny(seed: u64) -> Tiny {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tiny {
            fc: Linear::new(3, 2, &mut rng),
            bn: BatchNorm3d::new(2),
        }
    }

    #[test]
    fn save_load_restores_bit_exact_values() {
        let tmp = tempfile::tempdir().unwrap();
        let mut a = tiny(1);
        a.bn.running_mean[0] = 0.25;
        let cfg = serde_json::json!({"width": 3});
        let ck = Checkpoint::capture("tiny", &cfg, &mut a);
        ck.save(&tmp.path().join("m.json")).unwrap();
        let loaded = Checkpoint::load(&tmp.path().join("m")).unwrap();
        assert_eq!(loaded, ck);
        let mut b = tiny(2);
        loaded.restore(&cfg, &mut b).unwrap();
        assert_eq!(a.fc.weight.value, b.fc.weight.value);
        assert_eq!(b.bn.running_mean[0], 0.25);
    }

    #[test]
    fn config_hash_mismatch_is_rejected() {
        let mut a = tiny(1);
        let ck = Checkpoint::capture("tiny", &serde_json::json!({"width": 3}), &mut a);
        let err = ck.restore(&serde_json::json!({"width": 4}), &mut a).unwrap_err();
        assert!(matches!(err, CheckpointError::ConfigMismatch { .. }));
    }

    #[test]
    fn content_hash_is_stable() {
        assert_eq!(content_hash(&[1, 2, 3]), content_hash(&vec![1, 2, 3]));
        assert_ne!(content_hash(&[1, 2, 3]), content_hash(&[1, 2, 4]));
        assert_eq!(content_hash(&0).len(), 16);
    }
}
