//! The pipeline configuration file.
//!
//! A TOML file is read as a partial override of [`PipelineConfig::default`]:
//! tables merge key by key, so a file only names what it changes. Seeds of
//! the individual sections are derived from the top-level `seed` unless a
//! section sets its own, and the 2D/3D input shapes follow the `preprocess`
//! section unless set explicitly.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use covsev_core::arch2d::TwoBranchConfig;
use covsev_core::arch3d::HybridDeCoVNetConfig;
use covsev_core::checkpoint::content_hash;
use covsev_core::dataset::ScanDims;
use covsev_core::evaluate::EnsembleRule;
use covsev_core::preprocess::{PreprocessConfig, SegmenterNetConfig, SliceFilterNetConfig, StageFitConfig};
use covsev_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    #[default]
    TrainVal,
    Cv5,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::TrainVal => "train-val",
            Scenario::Cv5 => "cv5",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    Model,
    Heuristic,
    #[default]
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SegmenterKind {
    Model,
    #[default]
    Oracle,
}

/// Where inputs are read and artifacts written. Not part of the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset manifest; defaults to `<out>/data/manifest.csv`.
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub cache: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: None,
            out: PathBuf::from("covsev-out"),
            cache: None,
            checkpoints: None,
            reports: None,
        }
    }
}

impl Paths {
    pub fn manifest(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.data_dir().join("manifest.csv"))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn cache(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.out.join("cache"))
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.checkpoints.clone().unwrap_or_else(|| self.out.join("checkpoints"))
    }

    pub fn reports(&self) -> PathBuf {
        self.reports.clone().unwrap_or_else(|| self.out.join("reports"))
    }
}

/// Synthetic dataset written by `synth` (and by `run` when the manifest is
/// missing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Training scans per class.
    pub n_per_class: usize,
    /// Validation scans per class, generated from `seed + 1`.
    pub val_per_class: usize,
    pub dims: ScanDims,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 10,
            val_per_class: 5,
            dims: ScanDims::new(40, 64, 64),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSection {
    #[serde(flatten)]
    pub config: PreprocessConfig,
    pub filter: FilterKind,
    pub segmenter: SegmenterKind,
    /// Training of the learned filter and segmenter (`model` choices only).
    pub stage_fit: StageFitConfig,
    pub filter_net: SliceFilterNetConfig,
    pub segmenter_net: SegmenterNetConfig,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            config: PreprocessConfig::default(),
            filter: FilterKind::default(),
            segmenter: SegmenterKind::default(),
            stage_fit: StageFitConfig::default(),
            filter_net: SliceFilterNetConfig::default(),
            segmenter_net: SegmenterNetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub rule: EnsembleRule,
    /// `[w_2d, w_3d]`; uniform when absent.
    pub weights: Option<Vec<f64>>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            rule: EnsembleRule::Mean,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub folds: usize,
    pub seed: u64,
}

impl Default for CvSection {
    fn default() -> Self {
        Self { folds: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub paths: Paths,
    pub synth: Option<SynthConfig>,
    pub preprocess: PreprocessSection,
    pub arch2d: TwoBranchConfig,
    pub arch3d: HybridDeCoVNetConfig,
    pub train2d: TrainConfig,
    pub train3d: TrainConfig,
    pub ensemble: EnsembleSection,
    pub cv: CvSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenario: Scenario::TrainVal,
            paths: Paths::default(),
            synth: None,
            preprocess: PreprocessSection::default(),
            arch2d: TwoBranchConfig::default(),
            arch3d: HybridDeCoVNetConfig::default(),
            train2d: TrainConfig::default_2d(),
            train3d: TrainConfig::default_3d(),
            ensemble: EnsembleSection::default(),
            cv: CvSection::default(),
        }
    }
}

/// Seeds filled in from the top-level seed unless the file sets them.
const SEED_KEYS: [&[&str]; 9] = [
    &["synth", "seed"],
    &["preprocess", "stage_fit", "seed"],
    &["preprocess", "filter_net", "seed"],
    &["preprocess", "segmenter_net", "seed"],
    &["arch2d", "seed"],
    &["arch3d", "seed"],
    &["train2d", "seed"],
    &["train3d", "seed"],
    &["cv", "seed"],
];

/// Deterministic per-section seed.
pub fn derive_seed(seed: u64, section: &str) -> u64 {
    let hex = content_hash(&(seed, section));
    u64::from_str_radix(&hex[..12], 16).expect("hash is hex")
}

/// Recursive merge: tables merge per key, anything else is replaced. A table
/// carrying a `name` key is a tagged choice and replaces the default whole.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() && v.get("name").is_none() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn lookup<'a>(value: &'a toml::Value, path: &[&str]) -> Option<&'a toml::Value> {
    path.iter().try_fold(value, |v, k| v.get(k))
}

/// Reads a config file as an override table (not yet merged).
pub fn read_overrides(path: &Path) -> Result<toml::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("config {} is not valid TOML", path.display()))
}

/// Sets `path` in an override table, creating intermediate tables.
pub fn set_override(table: &mut toml::Value, path: &[&str], value: impl Into<toml::Value>) {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut node = table;
    for key in parents {
        let t = node.as_table_mut().expect("override tables only");
        node = t
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .expect("override tables only")
        .insert(last.to_string(), value.into());
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).context("config is not valid TOML")?;
        Self::from_toml_value(user)
    }

    /// Builds the config from a (possibly empty) override table.
    pub fn from_toml_value(user: toml::Value) -> Result<Self> {
        let mut merged = toml::Value::try_from(Self::default()).context("default config does not serialize")?;
        merge(&mut merged, user.clone());
        let mut cfg: Self = merged.try_into().context("config does not match the expected layout")?;
        cfg.fill_derived(|path| lookup(&user, path).is_some());
        Ok(cfg)
    }

    /// Defaults with every derived value filled in.
    pub fn resolved_default() -> Self {
        Self::from_toml_value(toml::Value::Table(Default::default())).expect("defaults are valid")
    }

    fn fill_derived(&mut self, explicit: impl Fn(&[&str]) -> bool) {
        let s = self.seed;
        for path in SEED_KEYS {
            if explicit(path) {
                continue;
            }
            let derived = derive_seed(s, &path[..path.len() - 1].join("."));
            match path {
                ["synth", _] => {
                    if let Some(synth) = self.synth.as_mut() {
                        // small ids: the seed is part of every synthetic scan id
                        synth.seed = s;
                    }
                }
                ["preprocess", "stage_fit", _] => self.preprocess.stage_fit.seed = derived,
                ["preprocess", "filter_net", _] => self.preprocess.filter_net.seed = derived,
                ["preprocess", "segmenter_net", _] => self.preprocess.segmenter_net.seed = derived,
                ["arch2d", _] => self.arch2d.seed = derived,
                ["arch3d", _] => self.arch3d.seed = derived,
                ["train2d", _] => self.train2d.seed = derived,
                ["train3d", _] => self.train3d.seed = derived,
                ["cv", _] => self.cv.seed = derived,
                _ => unreachable!("unknown seed key"),
            }
        }
        let pre = &self.preprocess.config;
        if !explicit(&["arch2d", "lung_depth"]) {
            self.arch2d.lung_depth = pre.lung_depth();
        }
        if !explicit(&["arch2d", "infection_depth"]) {
            self.arch2d.infection_depth = pre.infection_depth();
        }
        if !explicit(&["arch2d", "image_size"]) {
            self.arch2d.image_size = Some(pre.image_size);
        }
        if !explicit(&["arch3d", "input_dims"]) {
            self.arch3d.input_dims = Some(pre.voxel_dims);
        }
    }

    /// Checks cross-section consistency.
    pub fn validate(&self) -> Result<()> {
        let pre = &self.preprocess.config;
        pre.validate().context("preprocess section")?;
        self.train2d.validate().context("train2d section")?;
        self.train3d.validate().context("train3d section")?;
        if self.arch2d.lung_depth != pre.lung_depth() || self.arch2d.infection_depth != pre.infection_depth() {
            bail!(
                "arch2d depths {}/{} do not match the preprocessed depths {}/{}",
                self.arch2d.lung_depth,
                self.arch2d.infection_depth,
                pre.lung_depth(),
                pre.infection_depth()
            );
        }
        if self.arch2d.image_size.is_some_and(|s| s != pre.image_size) {
            bail!(
                "arch2d image_size {:?} does not match preprocess image_size {}",
                self.arch2d.image_size,
                pre.image_size
            );
        }
        if self.arch3d.input_dims.is_some_and(|d| d != pre.voxel_dims) {
            bail!(
                "arch3d input_dims {:?} do not match preprocess voxel_dims {:?}",
                self.arch3d.input_dims,
                pre.voxel_dims
            );
        }
        if self.arch3d.stem.in_channels != 2 {
            bail!("arch3d stem must take the 2 voxel channels (lung, infection)");
        }
        if self.cv.folds < 2 {
            bail!("cv.folds must be at least 2");
        }
        if let Some(w) = &self.ensemble.weights {
            if w.len() != 2 {
                bail!("ensemble.weights needs exactly two entries [2d, 3d], got {}", w.len());
            }
        }
        Ok(())
    }

    /// Content hash of everything except `paths`.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().expect("config is an object").remove("paths");
        content_hash(&value)
    }

    /// Hash of what determines the preprocessed volumes; stamps the caches
    /// so that changing only training settings keeps them valid.
    pub fn preprocess_hash(&self) -> String {
        let p = &self.preprocess;
        let stages = (
            &p.config,
            p.filter,
            p.segmenter,
            (p.filter == FilterKind::Model).then_some(&p.filter_net),
            (p.segmenter == SegmenterKind::Model).then_some(&p.segmenter_net),
            (p.filter == FilterKind::Model || p.segmenter == SegmenterKind::Model).then_some(&p.stage_fit),
        );
        content_hash(&stages)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use covsev_core::arch2d::BackboneKind;

    #[test]
    fn partial_sections_keep_their_own_defaults() {
        let cfg = PipelineConfig::from_toml_str("[train3d]\nepochs = 7\nlr_decay_epochs = [3]\n").unwrap();
        assert_eq!(cfg.train3d.epochs, 7);
        assert_eq!(cfg.train3d.batch_size, TrainConfig::default_3d().batch_size);
        assert_eq!(cfg.train2d.epochs, 40);
        assert_eq!(cfg.arch2d.image_size, Some(299));
    }

    #[test]
    fn tagged_backbone_is_replaced_not_merged() {
        let cfg = PipelineConfig::from_toml_str("[arch2d.backbone]\nname = \"compact\"\nchannels = [4, 8]\n").unwrap();
        assert_eq!(cfg.arch2d.backbone.kind, BackboneKind::Compact { channels: vec![4, 8] });
    }

    #[test]
    fn shapes_follow_preprocess_and_seeds_follow_the_top_level_seed() {
        let cfg = PipelineConfig::from_toml_str(
            "seed = 3\n[preprocess]\nimage_size = 64\nlung_depths = [8]\nvoxel_dims = [16, 32, 32]\n[train2d]\nseed = 11\n",
        )
        .unwrap();
        assert_eq!(cfg.arch2d.image_size, Some(64));
        assert_eq!(cfg.arch2d.lung_depth, 8);
        assert_eq!(cfg.arch3d.input_dims, Some([16, 32, 32]));
        assert_eq!(cfg.train2d.seed, 11);
        assert_eq!(cfg.train3d.seed, derive_seed(3, "train3d"));
        assert_ne!(cfg.arch2d.seed, cfg.arch3d.seed);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(PipelineConfig::from_toml_str("sed = 1\n").is_err());
        assert!(PipelineConfig::from_toml_str("scenario = \"cv10\"\n").is_err());
        let cfg = PipelineConfig::from_toml_str("[arch2d]\nimage_size = 32\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = PipelineConfig::resolved_default();
        let mut b = a.clone();
        b.paths.out = PathBuf::from("elsewhere");
        assert_eq!(a.config_hash(), b.config_hash());
        b.train2d.epochs = 3;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.preprocess_hash(), b.preprocess_hash());
    }

    #[test]
    fn toml_round_trip() {
        let a = PipelineConfig::resolved_default();
        let back = PipelineConfig::from_toml_str(&a.to_toml()).unwrap();
        assert_eq!(a, back);
    }
}
