//! Scenario driver: training units, checkpoints, predictions and reports.
//!
//! Layout under the configured directories (`<unit>` is `train-val` or
//! `fold-1` … `fold-k`):
//!
//! ```text
//! <checkpoints>/<unit>/{2d,3d}_best|_last(.json,.bin), {2d,3d}_history.csv
//! <checkpoints>/cv5/folds.csv
//! <reports>/<unit>/{2d,3d,ensemble}.json + *_predictions.csv
//! <reports>/cv5/…                      out-of-fold union of the fold predictions
//! <reports>/comparison-<scenario>.csv
//! ```
//!
//! Under `cv5` every labelled scan is scored once, by the fold model that
//! never trained on it, and the `cv5` reports are computed from the union of
//! those per-fold predictions.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use covsev_core::arch2d::TwoBranchModel;
use covsev_core::arch3d::HybridDeCoVNet;
use covsev_core::checkpoint::Checkpoint;
use covsev_core::dataset::{DatasetManifest, ScanRecord, Split};
use covsev_core::evaluate::{combine, comparison_table, make_report, MetricsReport};
use covsev_core::model::SeverityModel;
use covsev_core::training::{predict_probs, restore, stratified_kfold, train_model, FoldAssignment, TrainConfig};
use covsev_core::volume::write_atomic;

use crate::config::{PipelineConfig, Scenario};
use crate::data::{build_preprocessor, resolve_manifest, CacheStats, VolumeCache};
use crate::predictions::Predictions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Arch {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

impl Arch {
    pub const BOTH: [Arch; 2] = [Arch::TwoD, Arch::ThreeD];

    /// Short name used in file names and reports.
    pub fn name(self) -> &'static str {
        match self {
            Arch::TwoD => "2d",
            Arch::ThreeD => "3d",
        }
    }
}

pub const ENSEMBLE: &str = "ensemble";

/// One train/evaluate split; indices point into the manifest records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub name: String,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Writes only when the content differs, so a repeated run leaves files
/// (and their timestamps) alone.
fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<()> {
    if std::fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(());
    }
    write_atomic(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut text = report.to_json();
    text.push('\n');
    write_if_changed(path, text.as_bytes())
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub hash: String,
    pub manifest: DatasetManifest,
    cache: VolumeCache,
}

impl Pipeline {
    /// Validates the config and resolves (or synthesizes) the manifest.
    pub fn open(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let manifest = resolve_manifest(&cfg)?;
        let hash = cfg.config_hash();
        let cache = VolumeCache::new(&cfg);
        log::info!(
            "config {hash}, scenario {}, {} scans",
            cfg.scenario.name(),
            manifest.len()
        );
        Ok(Self {
            cfg,
            hash,
            manifest,
            cache,
        })
    }

    fn labelled(&self, split: Option<Split>) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label.is_some() && split.is_none_or(|s| r.split == Some(s)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn folds_path(&self) -> PathBuf {
        self.cfg
            .paths
            .checkpoints()
            .join(Scenario::Cv5.name())
            .join("folds.csv")
    }

    /// Stratified folds over every labelled scan, persisted (and checked on
    /// load) at [`Self::folds_path`].
    pub fn folds(&self) -> Result<FoldAssignment> {
        let records: Vec<&ScanRecord> = self.labelled(None).iter().map(|&i| &self.manifest.records[i]).collect();
        let folds = stratified_kfold(&records, self.cfg.cv.folds, self.cfg.cv.seed)?;
        for w in &folds.warnings {
            log::warn!("{w}");
        }
        let path = self.folds_path();
        if path.exists() {
            match FoldAssignment::read_csv(&path, self.cfg.cv.folds, &records) {
                Ok(found) if found.folds == folds.folds => return Ok(folds),
                Ok(_) => log::warn!("{} belongs to another fold seed; rewriting", path.display()),
                Err(e) => log::warn!("{e}; rewriting"),
            }
        }
        folds.write_csv(&path)?;
        Ok(folds)
    }

    pub fn units(&self) -> Result<Vec<Unit>> {
        match self.cfg.scenario {
            Scenario::TrainVal => {
                let train = self.labelled(Some(Split::Train));
                let eval = self.labelled(Some(Split::Val));
                if train.is_empty() || eval.is_empty() {
                    bail!(
                        "train-val needs labelled train and val scans, found {} and {}",
                        train.len(),
                        eval.len()
                    );
                }
                Ok(vec![Unit {
                    name: Scenario::TrainVal.name().into(),
                    train,
                    eval,
                }])
            }
            Scenario::Cv5 => {
                let folds = self.folds()?;
                let all = self.labelled(None);
                Ok((0..self.cfg.cv.folds)
                    .map(|f| {
                        let (eval, train) = all
                            .iter()
                            .partition(|&&i| folds.fold_of(&self.manifest.records[i].scan_id) == Some(f));
                        Unit {
                            name: format!("fold-{}", f + 1),
                            train,
                            eval,
                        }
                    })
                    .collect())
            }
        }
    }

    /// Fills the volume caches for every scan in the manifest.
    pub fn preprocess(&self) -> Result<CacheStats> {
        let records: Vec<&ScanRecord> = self.manifest.records.iter().collect();
        let stats = self
            .cache
            .prepare(&records, || build_preprocessor(&self.cfg, &self.manifest))?;
        log::info!(
            "preprocess: {} cached, {} built ({} stale)",
            stats.hits,
            stats.built,
            stats.stale
        );
        Ok(stats)
    }

    fn checkpoint_stem(&self, unit: &str, arch: Arch, which: &str) -> PathBuf {
        self.cfg
            .paths
            .checkpoints()
            .join(unit)
            .join(format!("{}_{which}", arch.name()))
    }

    fn unit_report_dir(&self, unit: &str) -> PathBuf {
        self.cfg.paths.reports().join(unit)
    }

    pub fn predictions_path(&self, unit: &str, model: &str) -> PathBuf {
        self.unit_report_dir(unit).join(format!("{model}_predictions.csv"))
    }

    pub fn report_path(&self, unit: &str, model: &str) -> PathBuf {
        self.unit_report_dir(unit).join(format!("{model}.json"))
    }

    fn samples<I>(
        &self,
        indices: impl Iterator<Item = usize>,
        load: impl Fn(&ScanRecord) -> Result<I>,
    ) -> Result<Vec<Option<I>>> {
        let mut out: Vec<Option<I>> = (0..self.manifest.len()).map(|_| None).collect();
        for i in indices {
            if out[i].is_none() {
                out[i] = Some(load(&self.manifest.records[i])?);
            }
        }
        Ok(out)
    }

    fn is_trained(&self, unit: &str, arch: Arch) -> bool {
        let history = self.checkpoint_stem(unit, arch, "history.csv");
        let stamped = |which: &str| {
            Checkpoint::read_meta(&self.checkpoint_stem(unit, arch, which))
                .is_ok_and(|m| m.pipeline_config_hash.as_deref() == Some(self.hash.as_str()))
        };
        let done = stamped("best") && stamped("last") && history.exists();
        if !done && self.checkpoint_stem(unit, arch, "best.json").exists() {
            log::warn!(
                "{unit}/{}: checkpoint from another config or incomplete; retraining",
                arch.name()
            );
        }
        done
    }

    fn train_units<M: SeverityModel<f32>>(
        &self,
        arch: Arch,
        units: &[Unit],
        make: impl Fn() -> M,
        load: impl Fn(&ScanRecord) -> Result<M::Input>,
        tcfg: &TrainConfig,
    ) -> Result<()> {
        let todo: Vec<&Unit> = units.iter().filter(|u| !self.is_trained(&u.name, arch)).collect();
        if todo.is_empty() {
            log::info!("train {}: all checkpoints current", arch.name());
            return Ok(());
        }
        let samples = self.samples(todo.iter().flat_map(|u| u.train.iter().chain(&u.eval).copied()), load)?;
        let pick =
            |idx: &[usize]| -> Vec<&M::Input> { idx.iter().map(|&i| samples[i].as_ref().expect("loaded")).collect() };
        for unit in todo {
            let mut model = make();
            let outcome = train_model(&mut model, &pick(&unit.train), &pick(&unit.eval), tcfg)
                .with_context(|| format!("training {} on {}", arch.name(), unit.name))?;
            let (mut best, mut last) = (outcome.best, outcome.last);
            for ck in [&mut best, &mut last] {
                ck.meta.pipeline_config_hash = Some(self.hash.clone());
            }
            outcome
                .history
                .write_csv(&self.checkpoint_stem(&unit.name, arch, "history.csv"))?;
            last.save(&self.checkpoint_stem(&unit.name, arch, "last"))?;
            best.save(&self.checkpoint_stem(&unit.name, arch, "best"))?;
            let best_f1 = outcome.history.records[outcome.best_epoch].val_f1.unwrap_or(f64::NAN);
            log::info!(
                "train {} {}: {} epochs, best epoch {} (val macro F1 {best_f1:.2})",
                arch.name(),
                unit.name,
                outcome.history.records.len(),
                outcome.best_epoch
            );
        }
        Ok(())
    }

    pub fn train(&self, arch: Arch) -> Result<()> {
        self.preprocess()?;
        let units = self.units()?;
        match arch {
            Arch::TwoD => self.train_units(
                arch,
                &units,
                || TwoBranchModel::<f32>::new(self.cfg.arch2d.clone()),
                |r| self.cache.two_branch(r),
                &self.cfg.train2d,
            ),
            Arch::ThreeD => self.train_units(
                arch,
                &units,
                || HybridDeCoVNet::<f32>::new(self.cfg.arch3d.clone()),
                |r| self.cache.voxel(r),
                &self.cfg.train3d,
            ),
        }
    }

    fn evaluate_units<M: SeverityModel<f32>>(
        &self,
        arch: Arch,
        units: &[Unit],
        make: impl Fn() -> M,
        load: impl Fn(&ScanRecord) -> Result<M::Input>,
        batch_size: usize,
    ) -> Result<Vec<Predictions>> {
        let samples = self.samples(units.iter().flat_map(|u| u.eval.iter().copied()), load)?;
        let mut out = Vec::new();
        for unit in units {
            let stem = self.checkpoint_stem(&unit.name, arch, "best");
            let ck = Checkpoint::load(&stem).with_context(|| {
                format!(
                    "no usable checkpoint {}; run `train --arch {}` first",
                    stem.display(),
                    arch.name()
                )
            })?;
            if ck.meta.pipeline_config_hash.as_deref() != Some(self.hash.as_str()) {
                bail!(
                    "checkpoint {} was trained under config {:?}, the current config is {}; run `train --arch {}` again",
                    stem.display(),
                    ck.meta.pipeline_config_hash,
                    self.hash,
                    arch.name()
                );
            }
            let mut model = make();
            restore(&ck, &mut model).with_context(|| format!("restoring {}", stem.display()))?;
            let batch: Vec<&M::Input> = unit
                .eval
                .iter()
                .map(|&i| samples[i].as_ref().expect("loaded"))
                .collect();
            let probs = predict_probs(&mut model, &batch, batch_size)?;
            let records: Vec<&ScanRecord> = unit.eval.iter().map(|&i| &self.manifest.records[i]).collect();
            out.push(Predictions::new(
                records.iter().map(|r| r.scan_id.clone()).collect(),
                records.iter().map(|r| r.require_label()).collect::<Result<_, _>>()?,
                probs,
                &self.hash,
            )?);
        }
        Ok(out)
    }

    fn report(&self, preds: &Predictions, unit: &str, model: &str) -> Result<MetricsReport> {
        let report = make_report(&preds.y_true(), &preds.probs, unit, model, &self.hash)?;
        write_if_changed(&self.predictions_path(unit, model), &preds.to_csv()?)?;
        write_report(&report, &self.report_path(unit, model))?;
        log::info!("{unit} {model}: macro F1 {:.2}", report.macro_f1);
        Ok(report)
    }

    /// Names of the report groups of the scenario: the units, plus the
    /// out-of-fold union under cv5.
    pub fn groups(&self, units: &[Unit]) -> Vec<String> {
        let mut names: Vec<String> = units.iter().map(|u| u.name.clone()).collect();
        if self.cfg.scenario == Scenario::Cv5 {
            names.push(Scenario::Cv5.name().into());
        }
        names
    }

    pub fn evaluate(&self, arch: Arch) -> Result<Vec<MetricsReport>> {
        self.preprocess()?;
        let units = self.units()?;
        let batch = self.cfg.train2d.batch_size.max(1);
        let preds = match arch {
            Arch::TwoD => self.evaluate_units(
                arch,
                &units,
                || TwoBranchModel::<f32>::new(self.cfg.arch2d.clone()),
                |r| self.cache.two_branch(r),
                batch,
            )?,
            Arch::ThreeD => self.evaluate_units(
                arch,
                &units,
                || HybridDeCoVNet::<f32>::new(self.cfg.arch3d.clone()),
                |r| self.cache.voxel(r),
                self.cfg.train3d.batch_size.max(1),
            )?,
        };
        let mut reports = Vec::new();
        for (unit, p) in units.iter().zip(&preds) {
            reports.push(self.report(p, &unit.name, arch.name())?);
        }
        if self.cfg.scenario == Scenario::Cv5 {
            // re-read what was persisted so the union is built from the files
            let parts = units
                .iter()
                .map(|u| self.read_predictions(&u.name, arch.name()))
                .collect::<Result<Vec<_>>>()?;
            let union = Predictions::concat(&parts)?;
            reports.push(self.report(&union, Scenario::Cv5.name(), arch.name())?);
        }
        Ok(reports)
    }

    /// Reads a predictions file and rejects it unless it carries this
    /// config's hash.
    pub fn read_predictions(&self, group: &str, model: &str) -> Result<Predictions> {
        let path = self.predictions_path(group, model);
        let preds = Predictions::read(&path).with_context(|| format!("run `eval` first ({})", path.display()))?;
        preds.expect_hash(&self.hash, &path)?;
        Ok(preds)
    }

    /// Combines the persisted 2D and 3D predictions of every group.
    pub fn ensemble(&self) -> Result<Vec<MetricsReport>> {
        let units = self.units()?;
        let mut reports = Vec::new();
        for group in self.groups(&units) {
            let members = Arch::BOTH
                .iter()
                .map(|a| self.read_predictions(&group, a.name()))
                .collect::<Result<Vec<_>>>()?;
            if members[0].scan_ids != members[1].scan_ids || members[0].labels != members[1].labels {
                bail!("{group}: the 2d and 3d predictions cover different scans");
            }
            let sets = [members[0].probs.clone(), members[1].probs.clone()];
            let probs = combine(&sets, self.cfg.ensemble.weights.as_deref(), self.cfg.ensemble.rule)?;
            let preds = Predictions::new(
                members[0].scan_ids.clone(),
                members[0].labels.clone(),
                probs,
                &self.hash,
            )?;
            for a in Arch::BOTH {
                reports.push(self.read_report(&group, a.name())?);
            }
            reports.push(self.report(&preds, &group, ENSEMBLE)?);
        }
        let (header, rows) = comparison_table(&reports);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        write_if_changed(
            &self.comparison_path(),
            &w.into_inner().context("flushing comparison table")?,
        )?;
        Ok(reports)
    }

    fn read_report(&self, group: &str, model: &str) -> Result<MetricsReport> {
        let path = self.report_path(group, model);
        let report = MetricsReport::read(&path).with_context(|| format!("run `eval` first ({})", path.display()))?;
        if report.config_hash != self.hash {
            bail!(
                "{} was produced by config {}, the current config is {}",
                path.display(),
                report.config_hash,
                self.hash
            );
        }
        Ok(report)
    }

    pub fn comparison_path(&self) -> PathBuf {
        self.cfg
            .paths
            .reports()
            .join(format!("comparison-{}.csv", self.cfg.scenario.name()))
    }

    /// Every stage in order; returns the report files of the scenario.
    pub fn run(&self) -> Result<Vec<PathBuf>> {
        self.preprocess().context("preprocess")?;
        for arch in Arch::BOTH {
            self.train(arch)
                .with_context(|| format!("train --arch {}", arch.name()))?;
        }
        for arch in Arch::BOTH {
            self.evaluate(arch)
                .with_context(|| format!("eval --arch {}", arch.name()))?;
        }
        self.ensemble().context("ensemble")?;
        let units = self.units()?;
        let mut files = Vec::new();
        for group in self.groups(&units) {
            for model in [Arch::TwoD.name(), Arch::ThreeD.name(), ENSEMBLE] {
                files.push(self.report_path(&group, model));
            }
        }
        Ok(files)
    }
}
