//! Training protocol: step learning-rate schedule, Adam with (optionally
//! class-weighted) cross-entropy, best-validation checkpointing, stratified
//! k-fold assignment and the per-epoch history file.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dataset::{ScanRecord, NUM_CLASSES};
use crate::evaluate::{argmax_rows, macro_f1};
use crate::model::{Sample, SeverityModel};
use crate::nn::{softmax_cross_entropy, softmax_rows, Adam, AdamConfig, Float, Mode, NnError};
use crate::volume::write_atomic;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error("sample '{0}' has no label")]
    Unlabeled(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] crate::evaluate::EvalError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("fold file {path}: {message}")]
    Folds { path: String, message: String },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn arg(msg: impl Into<String>) -> TrainError {
    TrainError::Argument(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        OptimizerConfig::Adam {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub optimizer: OptimizerConfig,
    /// Weight the loss of class `c` by `N / (4 · n_c)` over the training set.
    pub class_weights: bool,
    pub seed: u64,
    /// Stop once the epoch's train macro F1 reaches this value (percent).
    /// The history then holds fewer than `epochs` rows.
    pub early_stop_train_f1: Option<f64>,
    /// Mirror each training sample along a random subset of its depth,
    /// height and width axes, drawn afresh every epoch.
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::default_2d()
    }
}

impl TrainConfig {
    pub fn default_2d() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            initial_lr: 1e-4,
            lr_decay_epochs: vec![15, 30],
            lr_decay_factor: 0.1,
            optimizer: OptimizerConfig::default(),
            class_weights: false,
            seed: 0,
            early_stop_train_f1: None,
            flip_augment: false,
        }
    }

    pub fn default_3d() -> Self {
        Self {
            epochs: 100,
            lr_decay_epochs: vec![40, 75],
            ..Self::default_2d()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(arg("epochs and batch_size must be at least 1"));
        }
        if !(self.initial_lr > 0.0) || !(self.lr_decay_factor > 0.0) {
            return Err(arg("learning rate and decay factor must be positive"));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(arg(format!(
                "decay epochs {:?} must be strictly increasing",
                self.lr_decay_epochs
            )));
        }
        if self.lr_decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(arg(format!(
                "decay epochs {:?} must be below epochs {}",
                self.lr_decay_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// `initial_lr · factor^(number of decay epochs ≤ epoch)`.
///
/// The product is snapped to 15 significant digits so that decimal
/// schedules come out exact (1e-4 · 0.1 · 0.1 is 1e-6, not 1.0000000000000002e-6).
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(arg(format!("epoch {epoch} outside 0..{}", config.epochs)));
    }
    let drops = config.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    let lr = config.initial_lr * config.lr_decay_factor.powi(drops as i32);
    Ok(format!("{lr:.14e}").parse().expect("formatted float parses"))
}

/// Mapping from scan id to fold index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// In the order of the input records.
    pub folds: Vec<(String, usize)>,
    /// Classes with fewer records than folds.
    pub warnings: Vec<String>,
}

impl FoldAssignment {
    pub fn fold_of(&self, scan_id: &str) -> Option<usize> {
        self.folds.iter().find(|(id, _)| id == scan_id).map(|(_, f)| *f)
    }

    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|(_, f)| *f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Checks that every labelled record is assigned exactly once and no
    /// unknown id appears.
    pub fn validate_against(&self, records: &[&ScanRecord]) -> std::result::Result<(), String> {
        let mut seen = BTreeMap::new();
        for (id, f) in &self.folds {
            if *f >= self.k {
                return Err(format!("scan '{id}' has fold {f}, expected < {}", self.k));
            }
            if seen.insert(id.as_str(), *f).is_some() {
                return Err(format!("scan '{id}' assigned twice"));
            }
        }
        for r in records.iter().filter(|r| r.label.is_some()) {
            if seen.remove(r.scan_id.as_str()).is_none() {
                return Err(format!("scan '{}' has no fold", r.scan_id));
            }
        }
        match seen.keys().next() {
            Some(extra) => Err(format!("scan '{extra}' is not a labelled record")),
            None => Ok(()),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scan_id", "fold"])?;
        for (id, f) in &self.folds {
            w.write_record([id.as_str(), &f.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| arg(e.to_string()))?;
        write_atomic(path, &bytes).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Reads a fold file and validates it against `records`.
    pub fn read_csv(path: &Path, k: usize, records: &[&ScanRecord]) -> Result<Self> {
        let bad = |message: String| TrainError::Folds {
            path: path.display().to_string(),
            message,
        };
        let mut rdr = csv::Reader::from_path(path)?;
        let mut folds = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let (Some(id), Some(f)) = (row.get(0), row.get(1)) else {
                return Err(bad("rows need scan_id and fold".into()));
            };
            let f: usize = f.trim().parse().map_err(|_| bad(format!("bad fold '{f}'")))?;
            folds.push((id.to_string(), f));
        }
        let a = Self {
            k,
            seed: 0,
            folds,
            warnings: Vec::new(),
        };
        a.validate_against(records).map_err(bad)?;
        Ok(a)
    }
}

/// Stratified k-fold assignment.
///
/// Records of each class (in input order) are shuffled with one generator
/// seeded by `seed`, then dealt round-robin; the starting fold of each class
/// continues where the previous class stopped, so overall fold sizes also
/// differ by at most one.
pub fn stratified_kfold(records: &[&ScanRecord], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(arg(format!("k must be at least 2, got {k}")));
    }
    let mut by_class: [Vec<&str>; NUM_CLASSES] = Default::default();
    for r in records {
        let label = r.label.ok_or_else(|| TrainError::Unlabeled(r.scan_id.clone()))?;
        by_class[label.index()].push(&r.scan_id);
    }
    let mut warnings = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(arg(format!("class index {c} has no records")));
        }
        if members.len() < k {
            warnings.push(format!(
                "class index {c} has {} records for {k} folds; some folds lack it",
                members.len()
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned: BTreeMap<&str, usize> = BTreeMap::new();
    let mut offset = 0;
    for members in by_class.iter_mut() {
        members.shuffle(&mut rng);
        for (i, id) in members.iter().enumerate() {
            assigned.insert(id, (offset + i) % k);
        }
        offset = (offset + members.len()) % k;
    }
    let folds = records
        .iter()
        .map(|r| (r.scan_id.clone(), assigned[r.scan_id.as_str()]))
        .collect();
    Ok(FoldAssignment {
        k,
        seed,
        folds,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_f1: f64,
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// CSV `epoch,lr,train_loss,train_f1,val_f1`, floats in shortest
    /// round-trip form; an empty `val_f1` means no validation set.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "lr", "train_loss", "train_f1", "val_f1"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                r.train_f1.to_string(),
                r.val_f1.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.into_inner().map_err(|e| arg(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let field = |i: usize| row.get(i).unwrap_or("").to_string();
            let num = |i: usize| -> Result<f64> {
                field(i)
                    .parse()
                    .map_err(|_| arg(format!("bad history value '{}' in {}", field(i), path.display())))
            };
            records.push(EpochRecord {
                epoch: num(0)? as usize,
                lr: num(1)?,
                train_loss: num(2)?,
                train_f1: num(3)?,
                val_f1: if field(4).is_empty() { None } else { Some(num(4)?) },
            });
        }
        Ok(Self { records })
    }
}

/// Result of [`train_model`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Parameters at the epoch with the best validation macro F1 (train
    /// macro F1 without a validation set); the earliest such epoch wins.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub last: Checkpoint,
}

fn labels<S: Sample>(samples: &[&S]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            s.label()
                .map(|l| l.index())
                .ok_or_else(|| TrainError::Unlabeled(s.scan_id().to_string()))
        })
        .collect()
}

/// Softmax probabilities in inference mode, `(N, 4)`; empty input gives an
/// empty matrix.
pub fn predict_probs<F: Float, M: SeverityModel<F>>(
    model: &mut M,
    samples: &[&M::Input],
    batch_size: usize,
) -> Result<Array2<f64>> {
    let mut out = Array2::<f64>::zeros((samples.len(), NUM_CLASSES));
    let mut row = 0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let logits = model.forward_batch(chunk, Mode::Eval)?;
        let probs = softmax_rows(&logits.mapv(|v| v.as_f64()));
        out.slice_mut(ndarray::s![row..row + chunk.len(), ..]).assign(&probs);
        row += chunk.len();
    }
    Ok(out)
}

/// Batch boundaries of a shuffled epoch. A trailing batch of one sample is
/// folded into the previous batch, since training-mode batch statistics of
/// a single sample can be degenerate.
fn batches(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

/// Inverse-frequency weights `N / (4 · n_c)`; absent classes get weight 0.
pub fn inverse_frequency_weights(labels: &[usize]) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for &l in labels {
        counts[l] += 1;
    }
    counts.map(|c| {
        if c == 0 {
            0.0
        } else {
            labels.len() as f64 / (NUM_CLASSES * c) as f64
        }
    })
}

pub fn capture<F: Float, M: SeverityModel<F>>(model: &mut M, epoch: usize) -> Checkpoint {
    let arch = model.arch();
    let config = model.config_json();
    let mut ck = Checkpoint::capture(arch, &config, model);
    ck.meta.info.insert("epoch".into(), epoch.into());
    ck
}

/// Restores a checkpoint written by [`capture`] into `model`.
pub fn restore<F: Float, M: SeverityModel<F>>(checkpoint: &Checkpoint, model: &mut M) -> Result<()> {
    if checkpoint.meta.arch != model.arch() {
        return Err(CheckpointError::Layout(format!(
            "checkpoint is a '{}' model, expected '{}'",
            checkpoint.meta.arch,
            model.arch()
        ))
        .into());
    }
    let config = model.config_json();
    checkpoint.restore(&config, model)?;
    Ok(())
}

/// Trains `model` in place on `train`, scoring `val` after every epoch.
pub fn train_model<F: Float, M: SeverityModel<F>>(
    model: &mut M,
    train: &[&M::Input],
    val: &[&M::Input],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(arg("training set is empty"));
    }
    let train_labels = labels(train)?;
    let val_labels = labels(val)?;
    let weights = config.class_weights.then(|| inverse_frequency_weights(&train_labels));
    let OptimizerConfig::Adam { beta1, beta2, eps } = config.optimizer;
    let mut adam = Adam::new(AdamConfig { beta1, beta2, eps });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config, epoch)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, range) in batches(order.len(), config.batch_size).into_iter().enumerate() {
            let idx = &order[range];
            let flipped: Vec<M::Input> = if config.flip_augment {
                idx.iter()
                    .map(|&i| train[i].flipped([rng.random(), rng.random(), rng.random()]))
                    .collect()
            } else {
                Vec::new()
            };
            let batch: Vec<&M::Input> = if config.flip_augment {
                flipped.iter().collect()
            } else {
                idx.iter().map(|&i| train[i]).collect()
            };
            let targets: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            model.zero_grad();
            let logits = model.forward_batch(&batch, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &targets, weights.as_ref().map(|w| &w[..]));
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b, loss });
            }
            model.backward(&grad)?;
            adam.step(model, lr);
            loss_sum += loss * idx.len() as f64;
        }
        let train_pred = argmax_rows(&predict_probs(model, train, config.batch_size)?);
        let train_f1 = macro_f1(&train_labels, &train_pred)?;
        let val_f1 = if val.is_empty() {
            None
        } else {
            let pred = argmax_rows(&predict_probs(model, val, config.batch_size)?);
            Some(macro_f1(&val_labels, &pred)?)
        };
        history.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_f1,
            val_f1,
        });
        let score = val_f1.unwrap_or(train_f1);
        if best.as_ref().is_none_or(|(s, ..)| score > *s) {
            best = Some((score, epoch, capture(model, epoch)));
        }
        log::debug!(
            "{} epoch {epoch}: lr {lr:e} train f1 {train_f1:.2} val f1 {val_f1:?}",
            model.arch()
        );
        if config.early_stop_train_f1.is_some_and(|t| train_f1 >= t) {
            break;
        }
    }
    let last_epoch = history.records.last().map(|r| r.epoch).unwrap_or(0);
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
        last: capture(model, last_epoch),
    })
}
