//! On-disk volume container: raw little-endian `f32` payload in row-major
//! `(C, D, H, W)` order plus a JSON sidecar describing it.
//!
//! `<stem>.bin` holds the payload and `<stem>.json` the metadata. Both are
//! written to a temporary file first and renamed into place; the sidecar is
//! renamed last so its presence marks a complete entry.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LAYOUT: &str = "CDHW";
pub const DTYPE: &str = "f32le";

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sidecar {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("corrupt volume {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub scan_id: String,
    pub shape: [usize; 4],
    pub layout: String,
    pub dtype: String,
    pub pipeline_config_hash: String,
}

impl VolumeMeta {
    pub fn new(scan_id: impl Into<String>, shape: [usize; 4], pipeline_config_hash: impl Into<String>) -> Self {
        Self {
            scan_id: scan_id.into(),
            shape,
            layout: LAYOUT.into(),
            dtype: DTYPE.into(),
            pipeline_config_hash: pipeline_config_hash.into(),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Strips a `.json` / `.bin` extension, if any.
pub fn stem_of(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

pub(crate) fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), std::io::Error> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = with_suffix(path, &format!(".tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

pub fn write_volume(stem: &Path, meta: &VolumeMeta, data: &Array4<f32>) -> Result<(), VolumeError> {
    let stem = stem_of(stem);
    let shape: [usize; 4] = data.shape().try_into().expect("4D array");
    if shape != meta.shape {
        return Err(VolumeError::Corrupt {
            path: stem,
            message: format!("metadata shape {:?} does not match data {:?}", meta.shape, shape),
        });
    }
    let mut payload = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let bin = with_suffix(&stem, ".bin");
    write_atomic(&bin, &payload).map_err(io(&bin))?;
    let json = with_suffix(&stem, ".json");
    let text = serde_json::to_vec_pretty(meta).map_err(|source| VolumeError::Json {
        path: json.clone(),
        source,
    })?;
    write_atomic(&json, &text).map_err(io(&json))
}

pub fn read_meta(stem: &Path) -> Result<VolumeMeta, VolumeError> {
    let json = with_suffix(&stem_of(stem), ".json");
    let text = std::fs::read(&json).map_err(io(&json))?;
    serde_json::from_slice(&text).map_err(|source| VolumeError::Json { path: json, source })
}

/// Reads a volume, accepting the stem or either of its two files.
pub fn read_volume(path: &Path) -> Result<(Array4<f32>, VolumeMeta), VolumeError> {
    let stem = stem_of(path);
    let meta = read_meta(&stem)?;
    let corrupt = |message: String| VolumeError::Corrupt {
        path: stem.clone(),
        message,
    };
    if meta.layout != LAYOUT || meta.dtype != DTYPE {
        return Err(corrupt(format!(
            "unsupported layout/dtype {}/{}",
            meta.layout, meta.dtype
        )));
    }
    let bin = with_suffix(&stem, ".bin");
    let bytes = std::fs::read(&bin).map_err(io(&bin))?;
    let n: usize = meta.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(corrupt(format!(
            "payload is {} bytes, shape {:?} needs {}",
            bytes.len(),
            meta.shape,
            n * 4
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    let [c, d, h, w] = meta.shape;
    let data = Array4::from_shape_vec((c, d, h, w), values).map_err(|e| corrupt(e.to_string()))?;
    Ok((data, meta))
}

/// Outcome of a cache probe.
#[derive(Debug)]
pub enum CacheLookup {
    Hit(Array4<f32>),
    Missing,
    /// Present but unusable (hash mismatch or damaged); the reason is kept
    /// for the caller's warning.
    Stale(String),
}

/// Looks up a cached volume produced under `config_hash`.
pub fn lookup(stem: &Path, config_hash: &str) -> CacheLookup {
    let stem = stem_of(stem);
    if !with_suffix(&stem, ".json").exists() {
        return CacheLookup::Missing;
    }
    match read_volume(&stem) {
        Ok((data, meta)) if meta.pipeline_config_hash == config_hash => CacheLookup::Hit(data),
        Ok((_, meta)) => CacheLookup::Stale(format!(
            "config hash {} does not match {}",
            meta.pipeline_config_hash, config_hash
        )),
        Err(e) => CacheLookup::Stale(e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let data = Array4::from_shape_fn((2, 3, 4, 5), |(c, d, h, w)| {
            ((c * 60 + d * 20 + h * 5 + w) as f32).sin() * 1e-3 + f32::EPSILON
        });
        let stem = tmp.path().join("scan");
        write_volume(&stem, &VolumeMeta::new("scan", [2, 3, 4, 5], "abc"), &data).unwrap();
        let (back, meta) = read_volume(&stem.with_extension("json")).unwrap();
        assert_eq!(meta.layout, "CDHW");
        assert!(back.iter().zip(data.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        // payload is raw row-major little-endian
        let raw = std::fs::read(tmp.path().join("scan.bin")).unwrap();
        assert_eq!(&raw[4..8], &data[[0, 0, 0, 1]].to_le_bytes());
    }

    #[test]
    fn lookup_reports_hash_mismatch_and_truncation() {
        let tmp = tempfile::tempdir().unwrap();
        let stem = tmp.path().join("v");
        assert!(matches!(lookup(&stem, "h1"), CacheLookup::Missing));
        let data = Array4::<f32>::ones((1, 2, 2, 2));
        write_volume(&stem, &VolumeMeta::new("v", [1, 2, 2, 2], "h1"), &data).unwrap();
        assert!(matches!(lookup(&stem, "h1"), CacheLookup::Hit(_)));
        assert!(matches!(lookup(&stem, "h2"), CacheLookup::Stale(_)));
        std::fs::write(tmp.path().join("v.bin"), [0u8; 5]).unwrap();
        assert!(matches!(lookup(&stem, "h1"), CacheLookup::Stale(_)));
    }
}
