//! Dataset resolution, the preprocessing stage models and the volume caches.
//!
//! Every scan is preprocessed at most once per preprocessing configuration:
//! the 2D branch volumes go to `<cache>/2d/<scan>_lungs|_infection` and the
//! 3D volume to `<cache>/3d/<scan>`, each stamped with the preprocessing hash.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use covsev_core::dataset::{
    generate_synthetic_dataset, load_manifest, write_scan_tree, DatasetManifest, ScanRecord, Split,
};
use covsev_core::preprocess::{
    HeuristicFilter, LungSlicePredictor, OracleFilter, OracleSegmenter, Preprocessed, Preprocessor,
    SegmentationPredictor, SegmenterNet, SliceFilterNet, TwoBranchSample, VoxelSample3D,
};
use covsev_core::volume::{lookup, write_volume, CacheLookup, VolumeMeta};
use ndarray::{Array3, Array4, Axis};

use crate::config::{FilterKind, PipelineConfig, SegmenterKind, SynthConfig};

/// Writes the synthetic train/val dataset under `root`.
pub fn synthesize(synth: &SynthConfig, root: &Path) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for (n, seed, split) in [
        (synth.n_per_class, synth.seed, Split::Train),
        (synth.val_per_class, synth.seed + 1, Split::Val),
    ] {
        if n == 0 {
            continue;
        }
        let part = generate_synthetic_dataset(n, seed, synth.dims)?;
        records.extend(part.records.into_iter().map(|r| ScanRecord {
            split: Some(split),
            ..r
        }));
    }
    let manifest = DatasetManifest::new(records, "")?;
    let written =
        write_scan_tree(&manifest, root).with_context(|| format!("cannot write dataset to {}", root.display()))?;
    log::info!("wrote {} synthetic scans to {}", written.len(), root.display());
    Ok(written)
}

/// Loads the configured manifest, synthesizing it first when it is missing
/// and the config has a `[synth]` section.
pub fn resolve_manifest(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    let path = cfg.paths.manifest();
    if !path.exists() {
        match &cfg.synth {
            Some(synth) => {
                let root = path
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from("."));
                synthesize(synth, &root)?;
            }
            None => bail!(
                "manifest {} does not exist and the config has no [synth] section",
                path.display()
            ),
        }
    }
    load_manifest(&path).with_context(|| format!("cannot load manifest {}", path.display()))
}

fn stage_training_set(manifest: &DatasetManifest) -> Vec<&ScanRecord> {
    let train = manifest.with_split(Split::Train);
    if train.is_empty() {
        manifest.records.iter().collect()
    } else {
        train
    }
}

/// Builds the filter and segmenter, fitting learned ones on the training
/// split (ground-truth masks required) or loading them from `<cache>/stages`.
pub fn build_preprocessor(cfg: &PipelineConfig, manifest: &DatasetManifest) -> Result<Preprocessor> {
    let p = &cfg.preprocess;
    let stage_dir = cfg.paths.cache().join("stages");
    let hash = cfg.preprocess_hash();
    let filter: Arc<dyn LungSlicePredictor> = match p.filter {
        FilterKind::Oracle => Arc::new(OracleFilter),
        FilterKind::Heuristic => Arc::new(HeuristicFilter),
        FilterKind::Model => {
            let path = stage_dir.join(format!("filter-{hash}"));
            if path.with_extension("json").exists() {
                Arc::new(SliceFilterNet::load(&path).with_context(|| format!("cannot load {}", path.display()))?)
            } else {
                log::info!("fitting the slice filter");
                let net = SliceFilterNet::new(p.filter_net.clone());
                net.fit(&stage_training_set(manifest), &p.stage_fit)
                    .map_err(anyhow::Error::msg)
                    .context("fitting the slice filter")?;
                net.save(&path)?;
                Arc::new(net)
            }
        }
    };
    let segmenter: Arc<dyn SegmentationPredictor> = match p.segmenter {
        SegmenterKind::Oracle => Arc::new(OracleSegmenter),
        SegmenterKind::Model => {
            let path = stage_dir.join(format!("segmenter-{hash}"));
            if path.with_extension("json").exists() {
                Arc::new(SegmenterNet::load(&path).with_context(|| format!("cannot load {}", path.display()))?)
            } else {
                log::info!("fitting the segmenter");
                let net = SegmenterNet::new(p.segmenter_net.clone());
                net.fit(&stage_training_set(manifest), &p.stage_fit)
                    .map_err(anyhow::Error::msg)
                    .context("fitting the segmenter")?;
                net.save(&path)?;
                Arc::new(net)
            }
        }
    };
    Ok(Preprocessor::new(filter, segmenter, p.config.clone())?)
}

/// Cache hits and misses of one [`VolumeCache::prepare`] call.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub built: usize,
    pub stale: usize,
}

pub struct VolumeCache {
    root: PathBuf,
    hash: String,
}

fn as_4d(a: &Array3<f32>) -> Array4<f32> {
    a.clone().insert_axis(Axis(0))
}

impl VolumeCache {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            root: cfg.paths.cache(),
            hash: cfg.preprocess_hash(),
        }
    }

    fn stems(&self, scan_id: &str) -> [PathBuf; 3] {
        [
            self.root.join("2d").join(format!("{scan_id}_lungs")),
            self.root.join("2d").join(format!("{scan_id}_infection")),
            self.root.join("3d").join(scan_id),
        ]
    }

    fn store(&self, out: &Preprocessed) -> Result<()> {
        let id = &out.voxel.scan_id;
        let [lungs, infection, voxel] = self.stems(id);
        for (stem, data) in [
            (lungs, as_4d(&out.two_branch.lungs)),
            (infection, as_4d(&out.two_branch.infection)),
            (voxel, out.voxel.volume.clone()),
        ] {
            let shape: [usize; 4] = data.shape().try_into().expect("4D volume");
            write_volume(&stem, &VolumeMeta::new(id.as_str(), shape, self.hash.as_str()), &data)
                .with_context(|| format!("cannot write cache {}", stem.display()))?;
        }
        Ok(())
    }

    /// Makes sure every record has valid cache entries; the preprocessor is
    /// only built (and stage models only fitted) when something is missing.
    pub fn prepare(&self, records: &[&ScanRecord], make: impl FnOnce() -> Result<Preprocessor>) -> Result<CacheStats> {
        let mut stats = CacheStats::default();
        let mut todo = Vec::new();
        for r in records {
            let mut ok = true;
            for stem in self.stems(&r.scan_id) {
                match lookup(&stem, &self.hash) {
                    CacheLookup::Hit(_) => {}
                    CacheLookup::Missing => ok = false,
                    CacheLookup::Stale(reason) => {
                        log::warn!("cache {} is stale ({reason}); regenerating", stem.display());
                        stats.stale += 1;
                        ok = false;
                    }
                }
            }
            if ok {
                stats.hits += 1;
            } else {
                todo.push(*r);
            }
        }
        if !todo.is_empty() {
            let pre = make()?;
            for r in todo {
                let out = pre
                    .process(r)
                    .with_context(|| format!("preprocessing scan '{}'", r.scan_id))?;
                self.store(&out)?;
                stats.built += 1;
            }
        }
        Ok(stats)
    }

    fn read(&self, stem: &Path) -> Result<Array4<f32>> {
        match lookup(stem, &self.hash) {
            CacheLookup::Hit(v) => Ok(v),
            CacheLookup::Missing => bail!("cache entry {} is missing", stem.display()),
            CacheLookup::Stale(reason) => bail!("cache entry {} is unusable: {reason}", stem.display()),
        }
    }

    pub fn two_branch(&self, record: &ScanRecord) -> Result<TwoBranchSample> {
        let [lungs, infection, _] = self.stems(&record.scan_id);
        let squeeze = |a: Array4<f32>| a.index_axis_move(Axis(0), 0);
        Ok(TwoBranchSample {
            scan_id: record.scan_id.clone(),
            lungs: squeeze(self.read(&lungs)?),
            infection: squeeze(self.read(&infection)?),
            label: record.label,
        })
    }

    pub fn voxel(&self, record: &ScanRecord) -> Result<VoxelSample3D> {
        let [_, _, voxel] = self.stems(&record.scan_id);
        Ok(VoxelSample3D {
            scan_id: record.scan_id.clone(),
            volume: self.read(&voxel)?,
            label: record.label,
        })
    }
}
