//! Manifest fixtures, stratified folds, the learning-rate schedule,
//! training histories and checkpoints.

use std::path::PathBuf;
use std::sync::Arc;

use covsev_core::arch2d::{BackboneSpec, TwoBranchConfig, TwoBranchModel};
use covsev_core::arch3d::{HybridDeCoVNet, HybridDeCoVNetConfig};
use covsev_core::checkpoint::Checkpoint;
use covsev_core::dataset::{
    class_distribution, generate_synthetic_dataset, load_manifest, DatasetManifest, ScanDims, ScanRecord, SeverityLabel,
};
use covsev_core::preprocess::{OracleFilter, OracleSegmenter, PreprocessConfig, Preprocessor, TwoBranchSample};
use covsev_core::training::{
    capture, lr_at_epoch, predict_probs, restore, stratified_kfold, train_model, FoldAssignment, TrainConfig,
    TrainHistory,
};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn train_fixture() -> DatasetManifest {
    load_manifest(fixture("train_manifest.csv")).unwrap()
}

#[test]
fn fixture_class_counts() {
    let train = train_fixture();
    assert_eq!(train.len(), 462);
    assert_eq!(class_distribution(&train.records).unwrap(), [133, 124, 166, 39]);
    let val = load_manifest(fixture("val_manifest.csv")).unwrap();
    assert_eq!(val.len(), 101);
    assert_eq!(class_distribution(&val.records).unwrap(), [31, 20, 45, 5]);
}

fn class_fold_counts(records: &[&ScanRecord], folds: &FoldAssignment, k: usize) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0; k]; 4];
    for r in records {
        counts[r.label.unwrap().index()][folds.fold_of(&r.scan_id).unwrap()] += 1;
    }
    counts
}

#[test]
fn five_folds_on_the_fixture() {
    let manifest = train_fixture();
    let records: Vec<&ScanRecord> = manifest.records.iter().collect();
    let folds = stratified_kfold(&records, 5, 42).unwrap();
    folds.validate_against(&records).unwrap();
    assert_eq!(folds.folds.len(), 462);
    assert!(folds.warnings.is_empty());

    let counts = class_fold_counts(&records, &folds, 5);
    for (c, per_fold) in counts.iter().enumerate() {
        let (lo, hi) = (per_fold.iter().min().unwrap(), per_fold.iter().max().unwrap());
        assert!(hi - lo <= 1, "class {c}: {per_fold:?}");
    }
    let mut critical = counts[SeverityLabel::Critical.index()].clone();
    critical.sort();
    assert_eq!(critical, vec![7, 8, 8, 8, 8]);

    let sizes: Vec<usize> = (0..5).map(|f| folds.members(f).len()).collect();
    assert!(
        sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1,
        "{sizes:?}"
    );

    assert_eq!(stratified_kfold(&records, 5, 42).unwrap(), folds);
    assert_ne!(stratified_kfold(&records, 5, 43).unwrap().folds, folds.folds);
}

#[test]
fn fold_file_round_trip_and_rejection() {
    let manifest = train_fixture();
    let records: Vec<&ScanRecord> = manifest.records.iter().collect();
    let folds = stratified_kfold(&records, 5, 1).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("folds.csv");
    folds.write_csv(&path).unwrap();
    let back = FoldAssignment::read_csv(&path, 5, &records).unwrap();
    assert_eq!(back.folds, folds.folds);
    // a fold file missing one scan no longer partitions the records
    let text = std::fs::read_to_string(&path).unwrap();
    let truncated: Vec<&str> = text.lines().take(text.lines().count() - 1).collect();
    std::fs::write(&path, truncated.join("\n")).unwrap();
    let err = FoldAssignment::read_csv(&path, 5, &records).unwrap_err().to_string();
    assert!(err.contains("has no fold"), "{err}");
}

fn labelled(counts: &[usize; 4]) -> Vec<ScanRecord> {
    let mut out = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            out.push(ScanRecord::in_memory(
                format!("s{c}-{i}"),
                vec![],
                SeverityLabel::from_index(c),
            ));
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn folds_partition_and_balance(counts in prop::array::uniform4(1usize..40), k in 2usize..8, seed in any::<u64>()) {
        let owned = labelled(&counts);
        let records: Vec<&ScanRecord> = owned.iter().collect();
        let folds = stratified_kfold(&records, k, seed).unwrap();
        prop_assert!(folds.validate_against(&records).is_ok());
        for per_fold in class_fold_counts(&records, &folds, k) {
            let spread = per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap();
            prop_assert!(spread <= 1, "{:?}", per_fold);
        }
        let sizes: Vec<usize> = (0..k).map(|f| folds.members(f).len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(stratified_kfold(&records, k, seed).unwrap(), folds);
    }
}

#[test]
fn schedule_of_the_2d_config() {
    let cfg = TrainConfig::default_2d();
    assert_eq!(lr_at_epoch(&cfg, 0).unwrap(), 1e-4);
    assert_eq!(lr_at_epoch(&cfg, 14).unwrap(), 1e-4);
    assert_eq!(lr_at_epoch(&cfg, 15).unwrap(), 1e-5);
    assert_eq!(lr_at_epoch(&cfg, 29).unwrap(), 1e-5);
    assert_eq!(lr_at_epoch(&cfg, 30).unwrap(), 1e-6);
    assert_eq!(lr_at_epoch(&cfg, 39).unwrap(), 1e-6);
    assert!(lr_at_epoch(&cfg, 40).is_err());
}

fn synthetic_samples(n_per_class: usize, seed: u64, cfg: &PreprocessConfig) -> Vec<TwoBranchSample> {
    let manifest = generate_synthetic_dataset(n_per_class, seed, ScanDims::new(24, 32, 32)).unwrap();
    let pre = Preprocessor::new(Arc::new(OracleFilter), Arc::new(OracleSegmenter), cfg.clone()).unwrap();
    manifest
        .records
        .iter()
        .map(|r| pre.process(r).unwrap().two_branch)
        .collect()
}

fn tiny_2d() -> (PreprocessConfig, TwoBranchConfig) {
    let pre = PreprocessConfig {
        lung_depths: vec![8],
        infection_depths: vec![4],
        image_size: 32,
        voxel_dims: [16, 32, 32],
        ..Default::default()
    };
    let model = TwoBranchConfig {
        lung_depth: 8,
        infection_depth: 4,
        image_size: Some(32),
        backbone: BackboneSpec::compact(vec![8, 16]),
        hidden: 16,
        dropout: 0.0,
        seed: 5,
    };
    (pre, model)
}

#[test]
fn history_rows_follow_the_schedule_and_survive_csv() {
    let (pre, model_cfg) = tiny_2d();
    let samples = synthetic_samples(1, 3, &pre);
    let refs: Vec<&TwoBranchSample> = samples.iter().collect();
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 4,
        initial_lr: 1e-3,
        lr_decay_epochs: vec![2, 4],
        seed: 9,
        ..TrainConfig::default_2d()
    };
    let mut model = TwoBranchModel::<f32>::new(model_cfg);
    let outcome = train_model(&mut model, &refs, &refs, &cfg).unwrap();
    let h = &outcome.history;
    assert_eq!(h.records.len(), cfg.epochs);
    for (e, r) in h.records.iter().enumerate() {
        assert_eq!(r.epoch, e);
        assert_eq!(r.lr, lr_at_epoch(&cfg, e).unwrap());
        assert!(r.val_f1.is_some());
    }
    assert_eq!(h.records[4].lr, 1e-5);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("history.csv");
    h.write_csv(&path).unwrap();
    assert_eq!(&TrainHistory::read_csv(&path).unwrap(), h);
}

#[test]
fn tiny_set_is_fit_perfectly_within_200_epochs() {
    let (pre, model_cfg) = tiny_2d();
    let samples = synthetic_samples(2, 11, &pre);
    let refs: Vec<&TwoBranchSample> = samples.iter().collect();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        initial_lr: 1e-3,
        lr_decay_epochs: vec![],
        seed: 1,
        early_stop_train_f1: Some(100.0),
        ..TrainConfig::default_2d()
    };
    let mut model = TwoBranchModel::<f32>::new(model_cfg);
    let outcome = train_model(&mut model, &refs, &refs, &cfg).unwrap();
    let last = outcome.history.records.last().unwrap();
    assert_eq!(
        last.train_f1, 100.0,
        "stopped at epoch {} with {}",
        last.epoch, last.train_f1
    );
    println!("8-scan set fit after {} epochs", last.epoch + 1);
}

#[test]
fn training_is_deterministic() {
    let (pre, model_cfg) = tiny_2d();
    let samples = synthetic_samples(1, 4, &pre);
    let refs: Vec<&TwoBranchSample> = samples.iter().collect();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 3,
        initial_lr: 1e-3,
        lr_decay_epochs: vec![],
        seed: 2,
        flip_augment: true,
        ..TrainConfig::default_2d()
    };
    let run = || {
        let mut model = TwoBranchModel::<f32>::new(model_cfg.clone());
        let out = train_model(&mut model, &refs, &[], &cfg).unwrap();
        (out.history, out.last.payload)
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_gives_identical_predictions() {
    let (pre, model_cfg) = tiny_2d();
    let samples = synthetic_samples(1, 5, &pre);
    let refs: Vec<&TwoBranchSample> = samples.iter().collect();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        initial_lr: 1e-3,
        lr_decay_epochs: vec![],
        ..TrainConfig::default_2d()
    };
    let mut model = TwoBranchModel::<f32>::new(model_cfg.clone());
    train_model(&mut model, &refs, &[], &cfg).unwrap();
    let before = predict_probs(&mut model, &refs, 4).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("model");
    capture(&mut model, 1).save(&path).unwrap();
    let mut fresh = TwoBranchModel::<f32>::new(TwoBranchConfig { seed: 99, ..model_cfg });
    assert_ne!(predict_probs(&mut fresh, &refs, 4).unwrap(), before);
    let loaded = Checkpoint::load(&path).unwrap();
    // the architecture seed is part of the config, so it must match
    assert!(restore(&loaded, &mut fresh).is_err());
    let mut fresh = TwoBranchModel::<f32>::new(model.config.clone());
    restore(&loaded, &mut fresh).unwrap();
    assert_eq!(predict_probs(&mut fresh, &refs, 4).unwrap(), before);
}

#[test]
fn checkpoint_of_another_architecture_is_rejected() {
    let (_, model_cfg) = tiny_2d();
    let mut two_d = TwoBranchModel::<f32>::new(model_cfg);
    let ck = capture(&mut two_d, 0);
    let mut three_d = HybridDeCoVNet::<f32>::new(HybridDeCoVNetConfig {
        channels: vec![4, 8, 16, 32],
        head_channels: vec![8, 8, 8],
        input_dims: Some([16, 32, 32]),
        ..Default::default()
    });
    let err = restore(&ck, &mut three_d).unwrap_err().to_string();
    assert!(err.contains("two-branch-2d"), "{err}");
}
