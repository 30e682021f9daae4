//! Scan records, manifest I/O, class distributions and the synthetic CT
//! generator used in place of the competition data.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume;

pub const NUM_CLASSES: usize = 4;

/// One axial slice, intensities in `[0, 1]`.
pub type Slice = Array2<f32>;
/// Binary per-slice mask.
pub type Mask = Array2<bool>;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("manifest {path}: row {row}: {message}")]
    Parse { path: PathBuf, row: usize, message: String },
    #[error("duplicate scan_id '{0}' in manifest")]
    DuplicateId(String),
    #[error("scan '{0}' has no severity label")]
    Unlabeled(String),
    #[error("invalid severity value {0}; expected 1..=4")]
    InvalidLabel(i64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("scan '{scan_id}': {message}")]
    Inconsistent { scan_id: String, message: String },
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// COVID-19 severity grade as assigned by radiologists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum SeverityLabel {
    Mild = 1,
    Moderate = 2,
    Severe = 3,
    Critical = 4,
}

impl SeverityLabel {
    pub const ALL: [SeverityLabel; NUM_CLASSES] = [
        SeverityLabel::Mild,
        SeverityLabel::Moderate,
        SeverityLabel::Severe,
        SeverityLabel::Critical,
    ];

    pub fn from_value(value: i64) -> Result<Self> {
        match value {
            1 => Ok(Self::Mild),
            2 => Ok(Self::Moderate),
            3 => Ok(Self::Severe),
            4 => Ok(Self::Critical),
            other => Err(DatasetError::InvalidLabel(other)),
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Value on the 1..=4 scale.
    pub fn value(self) -> u8 {
        self as u8
    }

    /// Zero-based class index used by the networks.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mild => "mild",
            Self::Moderate => "moderate",
            Self::Severe => "severe",
            Self::Critical => "critical",
        }
    }
}

impl TryFrom<u8> for SeverityLabel {
    type Error = DatasetError;

    fn try_from(v: u8) -> Result<Self> {
        Self::from_value(v as i64)
    }
}

impl From<SeverityLabel> for u8 {
    fn from(l: SeverityLabel) -> u8 {
        l.value()
    }
}

impl fmt::Display for SeverityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which partition a scan belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Fold(usize),
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Val => f.write_str("val"),
            Split::Fold(k) => write!(f, "fold-{k}"),
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            other => other
                .strip_prefix("fold-")
                .and_then(|k| k.parse().ok())
                .map(Split::Fold)
                .ok_or_else(|| format!("unknown split '{other}'")),
        }
    }
}

/// Ground-truth (or predicted) masks of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub lung: Mask,
    pub infection: Mask,
}

/// Where a scan's slices live. Disk-backed sources are read on every access,
/// so loading is idempotent and records stay cheap to clone.
#[derive(Debug, Clone)]
pub enum SliceSource {
    InMemory(Arc<Vec<Slice>>),
    /// Directory of lexicographically ordered 2D images.
    Directory(PathBuf),
    /// Single-file volume container (`.json` sidecar + raw payload), one
    /// channel, depth = slices.
    Volume(PathBuf),
}

#[derive(Debug, Clone)]
pub enum MaskSource {
    None,
    InMemory(Arc<Vec<MaskPair>>),
    /// `<dir>/{lung,infection}_####.png`
    Directory(PathBuf),
}

/// One CT scan.
#[derive(Debug, Clone)]
pub struct ScanRecord {
    pub scan_id: String,
    /// Path as written in the manifest (empty for in-memory scans).
    pub path: String,
    pub source: SliceSource,
    pub label: Option<SeverityLabel>,
    pub split: Option<Split>,
    pub ground_truth: MaskSource,
}

impl ScanRecord {
    pub fn in_memory(scan_id: impl Into<String>, slices: Vec<Slice>, label: Option<SeverityLabel>) -> Self {
        Self {
            scan_id: scan_id.into(),
            path: String::new(),
            source: SliceSource::InMemory(Arc::new(slices)),
            label,
            split: None,
            ground_truth: MaskSource::None,
        }
    }

    pub fn with_masks(mut self, masks: Vec<MaskPair>) -> Self {
        self.ground_truth = MaskSource::InMemory(Arc::new(masks));
        self
    }

    /// Loads (or borrows) the slice stack, checking the shared-shape invariant.
    pub fn slices(&self) -> Result<Arc<Vec<Slice>>> {
        let slices = match &self.source {
            SliceSource::InMemory(s) => s.clone(),
            SliceSource::Directory(dir) => Arc::new(load_slice_dir(dir)?),
            SliceSource::Volume(path) => {
                let (vol, _) = volume::read_volume(path).map_err(|e| DatasetError::Inconsistent {
                    scan_id: self.scan_id.clone(),
                    message: e.to_string(),
                })?;
                if vol.shape()[0] != 1 {
                    return Err(DatasetError::Inconsistent {
                        scan_id: self.scan_id.clone(),
                        message: format!("volume source must have one channel, got {}", vol.shape()[0]),
                    });
                }
                Arc::new(
                    vol.index_axis(ndarray::Axis(0), 0)
                        .outer_iter()
                        .map(|s| normalize_slice(s.to_owned()))
                        .collect(),
                )
            }
        };
        self.check_slices(&slices)?;
        Ok(slices)
    }

    fn check_slices(&self, slices: &[Slice]) -> Result<()> {
        let Some(first) = slices.first() else {
            return Err(DatasetError::Inconsistent {
                scan_id: self.scan_id.clone(),
                message: "scan has no slices".into(),
            });
        };
        if let Some((i, s)) = slices.iter().enumerate().find(|(_, s)| s.dim() != first.dim()) {
            return Err(DatasetError::Inconsistent {
                scan_id: self.scan_id.clone(),
                message: format!("slice {i} is {:?}, expected {:?}", s.dim(), first.dim()),
            });
        }
        Ok(())
    }

    pub fn ground_truth_masks(&self) -> Result<Option<Arc<Vec<MaskPair>>>> {
        match &self.ground_truth {
            MaskSource::None => Ok(None),
            MaskSource::InMemory(m) => Ok(Some(m.clone())),
            MaskSource::Directory(dir) => Ok(Some(Arc::new(load_mask_dir(dir)?))),
        }
    }

    pub fn require_label(&self) -> Result<SeverityLabel> {
        self.label.ok_or_else(|| DatasetError::Unlabeled(self.scan_id.clone()))
    }
}

/// A set of scans read from (or destined for) a manifest CSV.
#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub records: Vec<ScanRecord>,
    pub source_path: String,
}

impl DatasetManifest {
    pub fn new(records: Vec<ScanRecord>, source_path: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.scan_id.as_str()) {
                return Err(DatasetError::DuplicateId(r.scan_id.clone()));
            }
        }
        Ok(Self {
            records,
            source_path: source_path.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn with_split(&self, split: Split) -> Vec<&ScanRecord> {
        self.records.iter().filter(|r| r.split == Some(split)).collect()
    }

    pub fn get(&self, scan_id: &str) -> Option<&ScanRecord> {
        self.records.iter().find(|r| r.scan_id == scan_id)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    scan_id: String,
    path: String,
    severity: Option<String>,
    split: Option<String>,
}

/// Reads a `scan_id,path,severity,split` manifest. Relative paths resolve
/// against the manifest's directory; slices are not read here.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let csv_err = |source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let headers = reader.headers().map_err(csv_err)?.clone();
    for required in ["scan_id", "path", "severity", "split"] {
        if !headers.iter().any(|h| h == required) {
            return Err(DatasetError::Parse {
                path: path.to_path_buf(),
                row: 0,
                message: format!("missing column '{required}'"),
            });
        }
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row_no = i + 1;
        let parse_err = |message: String| DatasetError::Parse {
            path: path.to_path_buf(),
            row: row_no,
            message,
        };
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        if row.scan_id.is_empty() {
            return Err(parse_err("empty scan_id".into()));
        }
        if !seen.insert(row.scan_id.clone()) {
            return Err(DatasetError::DuplicateId(row.scan_id));
        }
        let label = match row.severity.as_deref().filter(|s| !s.is_empty()) {
            None => None,
            Some(s) => {
                let v: i64 = s
                    .parse()
                    .map_err(|_| parse_err(format!("severity '{s}' is not an integer")))?;
                Some(SeverityLabel::from_value(v).map_err(|e| parse_err(e.to_string()))?)
            }
        };
        let split = match row.split.as_deref().filter(|s| !s.is_empty()) {
            None => None,
            Some(s) => Some(s.parse::<Split>().map_err(parse_err)?),
        };
        let full = base.join(&row.path);
        let source = if full.extension().is_some_and(|e| e == "json" || e == "bin") {
            SliceSource::Volume(full.clone())
        } else {
            SliceSource::Directory(full.clone())
        };
        let mask_dir = full.join("masks");
        let ground_truth = if mask_dir.is_dir() {
            MaskSource::Directory(mask_dir)
        } else {
            MaskSource::None
        };
        records.push(ScanRecord {
            scan_id: row.scan_id,
            path: row.path,
            source,
            label,
            split,
            ground_truth,
        });
    }
    DatasetManifest::new(records, path.to_string_lossy())
}

/// Writes the manifest rows back out in `scan_id,path,severity,split` order.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    for r in &manifest.records {
        writer
            .serialize(ManifestRow {
                scan_id: r.scan_id.clone(),
                path: r.path.clone(),
                severity: r.label.map(|l| l.value().to_string()),
                split: r.split.map(|s| s.to_string()),
            })
            .map_err(|source| DatasetError::Csv {
                path: path.to_path_buf(),
                source,
            })?;
    }
    writer.flush().map_err(|e| DatasetError::io(path, e))
}

/// Per-class counts in mild → critical order.
pub fn class_distribution<'a, I>(records: I) -> Result<[usize; NUM_CLASSES]>
where
    I: IntoIterator<Item = &'a ScanRecord>,
{
    let mut counts = [0; NUM_CLASSES];
    for r in records {
        counts[r.require_label()?.index()] += 1;
    }
    Ok(counts)
}

/// Per-slice min-max normalization to `[0, 1]`; constant slices become zeros.
pub fn normalize_slice(mut slice: Slice) -> Slice {
    let (min, max) = slice.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if !(max > min) {
        slice.fill(0.0);
    } else {
        let range = max - min;
        slice.mapv_inplace(|v| (v - min) / range);
    }
    slice
}

fn sorted_pngs(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| DatasetError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| DatasetError::io(dir, e))?;
        let p = entry.path();
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let is_image = p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
            matches!(
                e.to_ascii_lowercase().as_str(),
                "png" | "jpg" | "jpeg" | "tif" | "tiff" | "bmp"
            )
        });
        if p.is_file() && is_image && name.starts_with(prefix) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn read_gray(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path).map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma32f();
    let (w, h) = gray.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), gray.into_raw()).map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads every image in `dir` (file-name order) as a normalized slice.
pub fn load_slice_dir(dir: &Path) -> Result<Vec<Slice>> {
    sorted_pngs(dir, "")?
        .iter()
        .map(|p| read_gray(p).map(normalize_slice))
        .collect()
}

fn load_mask_dir(dir: &Path) -> Result<Vec<MaskPair>> {
    let lungs = sorted_pngs(dir, "lung_")?;
    let infections = sorted_pngs(dir, "infection_")?;
    if lungs.len() != infections.len() {
        return Err(DatasetError::Image {
            path: dir.to_path_buf(),
            message: format!("{} lung masks but {} infection masks", lungs.len(), infections.len()),
        });
    }
    lungs
        .iter()
        .zip(&infections)
        .map(|(l, i)| {
            Ok(MaskPair {
                lung: read_gray(l)?.mapv(|v| v >= 0.5),
                infection: read_gray(i)?.mapv(|v| v >= 0.5),
            })
        })
        .collect()
}

fn write_gray(path: &Path, data: &Array2<f32>) -> Result<()> {
    let (h, w) = data.dim();
    let bytes: Vec<u8> = data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dims");
    img.save(path).map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes scans as `<root>/<scan_id>/slice_####.png` (+ `masks/`) and a
/// `manifest.csv`; returns the disk-backed manifest.
pub fn write_scan_tree(manifest: &DatasetManifest, root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    std::fs::create_dir_all(root).map_err(|e| DatasetError::io(root, e))?;
    let mut records = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        let dir = root.join(&r.scan_id);
        std::fs::create_dir_all(&dir).map_err(|e| DatasetError::io(&dir, e))?;
        for (i, s) in r.slices()?.iter().enumerate() {
            write_gray(&dir.join(format!("slice_{i:04}.png")), s)?;
        }
        let mut ground_truth = MaskSource::None;
        if let Some(masks) = r.ground_truth_masks()? {
            let mdir = dir.join("masks");
            std::fs::create_dir_all(&mdir).map_err(|e| DatasetError::io(&mdir, e))?;
            for (i, m) in masks.iter().enumerate() {
                write_gray(&mdir.join(format!("lung_{i:04}.png")), &m.lung.mapv(|b| b as u8 as f32))?;
                write_gray(
                    &mdir.join(format!("infection_{i:04}.png")),
                    &m.infection.mapv(|b| b as u8 as f32),
                )?;
            }
            ground_truth = MaskSource::Directory(mdir);
        }
        records.push(ScanRecord {
            scan_id: r.scan_id.clone(),
            path: r.scan_id.clone(),
            source: SliceSource::Directory(dir),
            label: r.label,
            split: r.split,
            ground_truth,
        });
    }
    let manifest_path = root.join("manifest.csv");
    let out = DatasetManifest::new(records, manifest_path.to_string_lossy())?;
    write_manifest(&out, &manifest_path)?;
    Ok(out)
}

/// Shape of a synthetic scan: `(slices, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanDims {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
}

impl ScanDims {
    pub fn new(slices: usize, height: usize, width: usize) -> Self {
        Self { slices, height, width }
    }
}

/// Allowed infection-to-lung volume fraction per class (mild → critical);
/// the critical band is closed on the right.
pub const INFECTION_BANDS: [(f64, f64); NUM_CLASSES] = [(0.01, 0.10), (0.10, 0.25), (0.25, 0.50), (0.50, 0.85)];

/// Fraction of each band's width trimmed from both ends when drawing a
/// target fraction, keeping classes apart after voxel rounding.
const BAND_MARGIN: f64 = 0.2;

pub fn in_band(label: SeverityLabel, fraction: f64) -> bool {
    let (lo, hi) = INFECTION_BANDS[label.index()];
    if label == SeverityLabel::Critical {
        (lo..=hi).contains(&fraction)
    } else {
        (lo..hi).contains(&fraction)
    }
}

/// Infection voxels / lung voxels over a whole scan.
pub fn infection_fraction(masks: &[MaskPair]) -> f64 {
    let (lung, inf) = masks.iter().fold((0usize, 0usize), |(l, i), m| {
        (
            l + m.lung.iter().filter(|v| **v).count(),
            i + m.infection.iter().filter(|v| **v).count(),
        )
    });
    if lung == 0 {
        0.0
    } else {
        inf as f64 / lung as f64
    }
}

fn scan_seed(seed: u64, class: usize, index: usize) -> u64 {
    // splitmix-style mixing so neighbouring (class, index) pairs decorrelate
    let mut z = seed ^ ((class as u64) << 48) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `4 * n_per_class` labeled scans with ground-truth masks.
///
/// Scan ids are `syn<seed>-<class>-<index>`. The output is a pure function
/// of the arguments.
pub fn generate_synthetic_dataset(n_per_class: usize, seed: u64, dims: ScanDims) -> Result<DatasetManifest> {
    if n_per_class == 0 {
        return Err(DatasetError::InvalidArgument("n_per_class must be at least 1".into()));
    }
    if dims.slices < 8 || dims.height < 8 || dims.width < 8 {
        return Err(DatasetError::InvalidArgument(format!(
            "synthetic dims must each be >= 8, got {}x{}x{}",
            dims.slices, dims.height, dims.width
        )));
    }
    let mut records = Vec::with_capacity(4 * n_per_class);
    for label in SeverityLabel::ALL {
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(scan_seed(seed, label.index(), i));
            let (slices, masks) = synthesize_scan(label, dims, &mut rng);
            records.push(
                ScanRecord::in_memory(format!("syn{seed}-{}-{i:03}", label.value()), slices, Some(label))
                    .with_masks(masks),
            );
        }
    }
    DatasetManifest::new(records, "")
}

fn ellipse(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> bool {
    let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
    dy * dy + dx * dx <= 1.0
}

fn synthesize_scan(label: SeverityLabel, dims: ScanDims, rng: &mut ChaCha8Rng) -> (Vec<Slice>, Vec<MaskPair>) {
    let ScanDims {
        slices: s,
        height: h,
        width: w,
    } = dims;
    let (hf, wf) = (h as f64, w as f64);

    // lungs occupy a central run of slices; the ends are lung-free
    let z0 = ((s as f64 * rng.random_range(0.12..0.2)).round() as usize).max(1);
    let z1 = (s - ((s as f64 * rng.random_range(0.12..0.2)).round() as usize).max(1)).max(z0 + 1);
    let scale = rng.random_range(0.92..1.08);
    let body = (
        0.5 * hf,
        0.5 * wf,
        0.42 * hf * rng.random_range(0.97..1.03),
        0.46 * wf * rng.random_range(0.97..1.03),
    );
    let lung_centres = [
        (0.5 * hf + rng.random_range(-0.02..0.02) * hf, 0.31 * wf),
        (0.5 * hf + rng.random_range(-0.02..0.02) * hf, 0.69 * wf),
    ];
    let spine = (0.82 * hf, 0.5 * wf, 0.05 * hf.min(wf).max(1.0));

    let mut lung = vec![Array2::<bool>::from_elem((h, w), false); s];
    for (z, mask) in lung.iter_mut().enumerate().take(z1).skip(z0) {
        let t = (z - z0) as f64 / (z1 - z0) as f64 + 0.5 / (z1 - z0) as f64;
        let profile = 0.75 + 0.25 * (std::f64::consts::PI * t).sin();
        let (ry, rx) = (0.27 * hf * profile * scale, 0.12 * wf * profile * scale);
        for ((y, x), v) in mask.indexed_iter_mut() {
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            *v = lung_centres.iter().any(|&(cy, cx)| ellipse(yc, xc, cy, cx, ry, rx));
        }
    }

    // smooth random field over lung voxels; the top-k voxels become infection
    let lung_voxels: Vec<(usize, usize, usize)> = lung
        .iter()
        .enumerate()
        .flat_map(|(z, m)| m.indexed_iter().filter(|(_, v)| **v).map(move |((y, x), _)| (z, y, x)))
        .collect();
    let (lo, hi) = INFECTION_BANDS[label.index()];
    let margin = BAND_MARGIN * (hi - lo);
    let target = rng.random_range(lo + margin..hi - margin);
    let k = ((target * lung_voxels.len() as f64).round() as usize).min(lung_voxels.len());
    let blobs: Vec<(f64, f64, f64, f64, f64)> = (0..rng.random_range(4..9))
        .map(|_| {
            let (z, y, x) = lung_voxels[rng.random_range(0..lung_voxels.len())];
            let sigma_xy = rng.random_range(0.04..0.10) * hf.min(wf);
            let sigma_z = rng.random_range(0.05..0.15) * s as f64;
            (z as f64, y as f64, x as f64, sigma_xy, sigma_z.max(0.5))
        })
        .collect();
    let field: Vec<f64> = lung_voxels
        .iter()
        .map(|&(z, y, x)| {
            blobs
                .iter()
                .map(|&(bz, by, bx, sxy, sz)| {
                    let d = ((y as f64 - by).powi(2) + (x as f64 - bx).powi(2)) / (2.0 * sxy * sxy)
                        + (z as f64 - bz).powi(2) / (2.0 * sz * sz);
                    (-d).exp()
                })
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..lung_voxels.len()).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut infection = vec![Array2::<bool>::from_elem((h, w), false); s];
    for &i in &order[..k] {
        let (z, y, x) = lung_voxels[i];
        infection[z][[y, x]] = true;
    }

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut slices = Vec::with_capacity(s);
    for z in 0..s {
        let mut img = Array2::<f32>::zeros((h, w));
        for ((y, x), v) in img.indexed_iter_mut() {
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            let n: f64 = noise.sample(rng);
            *v = if infection[z][[y, x]] {
                (0.5 + 0.03 * n).clamp(0.4, 0.58)
            } else if lung[z][[y, x]] {
                (0.22 + 0.025 * n).clamp(0.1, 0.35)
            } else if ellipse(yc, xc, spine.0, spine.1, spine.2, spine.2) {
                1.0
            } else if ellipse(yc, xc, body.0, body.1, body.2, body.3) {
                (0.78 + 0.02 * n).clamp(0.7, 0.86)
            } else {
                0.0
            } as f32;
        }
        slices.push(img);
    }
    let masks = lung
        .into_iter()
        .zip(infection)
        .map(|(lung, infection)| MaskPair { lung, infection })
        .collect();
    (slices, masks)
}

/// Stacks a scan's slices into a `(D, H, W)` array.
pub fn stack_slices(slices: &[Slice]) -> Array3<f32> {
    let (h, w) = slices.first().map_or((0, 0), |s| s.dim());
    let mut out = Array3::zeros((slices.len(), h, w));
    for (mut dst, s) in out.outer_iter_mut().zip(slices) {
        dst.assign(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("m.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn parses_small_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let p = write(
            tmp.path(),
            "scan_id,path,severity,split\na,scans/a,1,train\nb,scans/b,4,val\nc,scans/c,,\n",
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.records[0].label, Some(SeverityLabel::Mild));
        assert_eq!(m.records[1].label, Some(SeverityLabel::Critical));
        assert_eq!(m.records[1].split, Some(Split::Val));
        assert_eq!(m.records[2].label, None);
        assert_eq!(m.records[2].split, None);
    }

    #[test]
    fn out_of_range_severity_names_the_row() {
        let tmp = tempfile::tempdir().unwrap();
        let p = write(tmp.path(), "scan_id,path,severity,split\na,a,1,train\nb,b,5,train\n");
        match load_manifest(&p).unwrap_err() {
            DatasetError::Parse { row, message, .. } => {
                assert_eq!(row, 2);
                assert!(message.contains('5'), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let p = write(tmp.path(), "scan_id,path,severity,split\na,a,1,train\na,b,2,train\n");
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(&err, DatasetError::DuplicateId(id) if id == "a"), "{err}");
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let err = load_manifest("/definitely/not/here.csv").unwrap_err();
        assert!(matches!(err, DatasetError::Io { .. }));
    }

    #[test]
    fn class_distribution_edge_cases() {
        assert_eq!(class_distribution(&[]).unwrap(), [0, 0, 0, 0]);
        let unlabeled = ScanRecord::in_memory("u", vec![Slice::zeros((2, 2))], None);
        assert!(matches!(
            class_distribution([&unlabeled]),
            Err(DatasetError::Unlabeled(id)) if id == "u"
        ));
        let m = generate_synthetic_dataset(2, 1, ScanDims::new(8, 16, 16)).unwrap();
        assert_eq!(class_distribution(&m.records).unwrap(), [2, 2, 2, 2]);
    }

    #[test]
    fn normalization_handles_constant_slices() {
        let s = normalize_slice(Slice::from_elem((3, 3), 7.0));
        assert!(s.iter().all(|v| *v == 0.0));
        let s = normalize_slice(Slice::from_shape_vec((1, 3), vec![2.0, 4.0, 6.0]).unwrap());
        assert_eq!(s.as_slice().unwrap(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn synthetic_rejects_bad_arguments() {
        assert!(generate_synthetic_dataset(0, 1, ScanDims::new(8, 8, 8)).is_err());
        assert!(generate_synthetic_dataset(1, 1, ScanDims::new(7, 64, 64)).is_err());
    }

    #[test]
    fn split_parsing() {
        assert_eq!("fold-3".parse::<Split>().unwrap(), Split::Fold(3));
        assert_eq!(Split::Fold(2).to_string(), "fold-2");
        assert!("fold-x".parse::<Split>().is_err());
    }
}
