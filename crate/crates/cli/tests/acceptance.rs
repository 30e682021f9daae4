//! The nine acceptance criteria. Each test prints one `criterion N ...:
//! PASS|FAIL` line straight to stdout (visible without `--nocapture`).

use std::io::Write;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use covsev_cli::predictions::Predictions;
use covsev_core::arch2d::{BackboneKind, BackboneSpec, TwoBranchConfig, TwoBranchModel};
use covsev_core::arch3d::{HybridDeCoVNet, HybridDeCoVNetConfig};
use covsev_core::dataset::{
    class_distribution, generate_synthetic_dataset, load_manifest, DatasetManifest, MaskPair, ScanDims, ScanRecord,
    SeverityLabel, Slice,
};
use covsev_core::evaluate::{argmax, argmax_rows, ensemble_probs, macro_f1, majority_vote, make_report, MetricsReport};
use covsev_core::model::{Sample, SeverityModel};
use covsev_core::nn::Mode;
use covsev_core::preprocess::{
    pack_volume, OracleFilter, OracleSegmenter, PreprocessConfig, Preprocessor, TwoBranchSample, VoxelSample3D,
};
use covsev_core::training::{lr_at_epoch, predict_probs, stratified_kfold, train_model, TrainConfig, TrainHistory};
use covsev_core::volume::{lookup, read_volume, write_volume, CacheLookup, VolumeMeta};
use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "../../core/tests/support/f1_oracle.rs"]
mod f1_oracle;
#[path = "../../core/tests/support/gradcheck.rs"]
mod gradcheck;
#[path = "../../core/tests/support/traces.rs"]
mod traces;

fn criterion(n: u32, title: &str, body: impl FnOnce()) {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body));
    let verdict = if result.is_ok() { "PASS" } else { "FAIL" };
    let line = format!("criterion {n} ({title}): {verdict} [{:.1?}]\n", start.elapsed());
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    if let Err(e) = result {
        resume_unwind(e);
    }
}

fn random_voxels(n: usize, dims: [usize; 3], seed: u64) -> Vec<VoxelSample3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| VoxelSample3D {
            scan_id: format!("v{i}"),
            volume: Array4::from_shape_simple_fn((2, dims[0], dims[1], dims[2]), || rng.random::<f32>()),
            label: None,
        })
        .collect()
}

fn random_two_branch(n: usize, cfg: &TwoBranchConfig, seed: u64) -> Vec<TwoBranchSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size.unwrap();
    (0..n)
        .map(|i| TwoBranchSample {
            scan_id: format!("t{i}"),
            lungs: Array3::from_shape_simple_fn((cfg.lung_depth, s, s), || rng.random::<f32>()),
            infection: Array3::from_shape_simple_fn((cfg.infection_depth, s, s), || rng.random::<f32>()),
            label: None,
        })
        .collect()
}

fn two_branch_expected(cfg: &TwoBranchConfig, n: usize) -> Vec<(String, Vec<usize>)> {
    let s = cfg.image_size.unwrap();
    let conv = traces::conv_out(s, 3, 1, 1);
    let f = cfg.backbone.kind.feature_dim();
    vec![
        traces::entry("lungs/input", &[n, cfg.lung_depth, s, s]),
        traces::entry("infection/input", &[n, cfg.infection_depth, s, s]),
        traces::entry("lungs/conv_layer", &[n, 3, conv, conv]),
        traces::entry("lungs/features", &[n, f]),
        traces::entry("infection/conv_layer", &[n, 3, conv, conv]),
        traces::entry("infection/features", &[n, f]),
        traces::entry("concat", &[n, 2 * f]),
        traces::entry("logits", &[n, 4]),
    ]
}

#[test]
fn criterion_1_shape_traces() {
    criterion(1, "shape traces", || {
        // documented full-size inputs and the 64/128/256/512 ladder
        let cfg3 = HybridDeCoVNetConfig::default();
        assert_eq!(cfg3.input_dims, Some([64, 224, 224]));
        assert_eq!(cfg3.channels, vec![64, 128, 256, 512]);
        let vox = random_voxels(1, [64, 224, 224], 1);
        let mut m3 = HybridDeCoVNet::<f32>::new(cfg3.clone());
        m3.forward_batch(&vox.iter().collect::<Vec<_>>(), Mode::Eval).unwrap();
        assert_eq!(m3.last_trace(), traces::expected_3d(&cfg3, 1).as_slice());
        assert_eq!(m3.last_trace()[1].1, vec![1, 16, 64, 112, 112]);

        let cfg2 = TwoBranchConfig::default();
        assert_eq!(
            (cfg2.lung_depth, cfg2.infection_depth, cfg2.image_size),
            (32, 16, Some(299))
        );
        let two = random_two_branch(1, &cfg2, 2);
        let mut m2 = TwoBranchModel::<f32>::new(cfg2.clone());
        m2.forward_batch(&two.iter().collect::<Vec<_>>(), Mode::Eval).unwrap();
        assert_eq!(m2.last_trace(), two_branch_expected(&cfg2, 1).as_slice());
        assert_eq!(m2.last_trace()[3].1, vec![1, 1536]);

        // compact widths at the same input shapes, within the time budget
        let start = Instant::now();
        let cfg3c = HybridDeCoVNetConfig {
            channels: vec![8, 16, 32, 64],
            head_channels: vec![32, 16, 16],
            ..Default::default()
        };
        let vox = random_voxels(2, [64, 224, 224], 3);
        let mut m3 = HybridDeCoVNet::<f32>::new(cfg3c.clone());
        m3.forward_batch(&vox.iter().collect::<Vec<_>>(), Mode::Eval).unwrap();
        assert_eq!(m3.last_trace(), traces::expected_3d(&cfg3c, 2).as_slice());
        let cfg2c = TwoBranchConfig::compact();
        let two = random_two_branch(2, &cfg2c, 4);
        let mut m2 = TwoBranchModel::<f32>::new(cfg2c.clone());
        m2.forward_batch(&two.iter().collect::<Vec<_>>(), Mode::Eval).unwrap();
        assert_eq!(m2.last_trace(), two_branch_expected(&cfg2c, 2).as_slice());
        assert!(
            start.elapsed() < Duration::from_secs(60),
            "compact traces took {:?}",
            start.elapsed()
        );
    });
}

#[test]
fn criterion_2_gradient_checks() {
    criterion(2, "finite-difference gradients", || {
        let start = Instant::now();
        let compact = TwoBranchConfig {
            lung_depth: 4,
            infection_depth: 3,
            image_size: Some(12),
            backbone: BackboneSpec::compact(vec![4, 8]),
            hidden: 8,
            dropout: 0.0,
            seed: 21,
        };
        let inception = TwoBranchConfig {
            lung_depth: 2,
            infection_depth: 2,
            image_size: Some(75),
            backbone: BackboneSpec {
                kind: BackboneKind::InceptionResnet { base_width: 2 },
                weights: None,
            },
            hidden: 8,
            dropout: 0.0,
            seed: 22,
        };
        for (cfg, targets) in [(compact, vec![0, 2, 3]), (inception, vec![1, 3])] {
            let samples = random_two_branch(targets.len(), &cfg, 5);
            let batch: Vec<&TwoBranchSample> = samples.iter().collect();
            let mut model = TwoBranchModel::<f64>::new(cfg);
            let (worst, replaced) = gradcheck::check(&mut model, &batch, &targets, 8);
            assert!(worst < gradcheck::TOLERANCE);
            println!("two-branch: worst {worst:e}, {replaced} replaced");
        }
        let cfg = HybridDeCoVNetConfig {
            channels: vec![4, 8, 16, 32],
            head_channels: vec![16, 8, 4],
            input_dims: Some([16, 56, 56]),
            seed: 23,
            ..Default::default()
        };
        let samples = random_voxels(2, [16, 56, 56], 6);
        let batch: Vec<&VoxelSample3D> = samples.iter().collect();
        let mut model = HybridDeCoVNet::<f64>::new(cfg);
        let (worst, replaced) = gradcheck::check(&mut model, &batch, &[3, 1], 9);
        assert!(worst < gradcheck::TOLERANCE);
        println!("hybrid-decovnet: worst {worst:e}, {replaced} replaced");
        assert!(start.elapsed() < Duration::from_secs(300), "took {:?}", start.elapsed());
    });
}

#[test]
fn criterion_3_metric_oracle() {
    criterion(3, "macro F1 oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut absent = 0;
        for _ in 0..1000 {
            let n = rng.random_range(1..50);
            let k = rng.random_range(1..=4);
            let mut pool = vec![0, 1, 2, 3];
            pool.shuffle(&mut rng);
            pool.truncate(k);
            let y_true: Vec<usize> = (0..n).map(|_| pool[rng.random_range(0..k)]).collect();
            let y_pred: Vec<usize> = (0..n)
                .map(|i| {
                    if rng.random_bool(0.5) {
                        y_true[i]
                    } else {
                        pool[rng.random_range(0..k)]
                    }
                })
                .collect();
            if (0..4).any(|c| !y_true.contains(&c)) {
                absent += 1;
            }
            let got = macro_f1(&y_true, &y_pred).unwrap();
            assert!((got - f1_oracle::oracle_macro_f1(&y_true, &y_pred)).abs() < 1e-9);
        }
        assert!(absent >= 100, "{absent} absent-class instances");
        let f1 = macro_f1(&[0, 0, 1, 2, 3], &[0, 1, 1, 2, 3]).unwrap();
        assert_eq!(format!("{f1:.2}"), "83.33");
    });
}

#[test]
fn criterion_4_schedule() {
    criterion(4, "learning-rate schedule", || {
        let cfg = TrainConfig::default_2d();
        for (epoch, lr) in [(0, 1e-4), (15, 1e-5), (30, 1e-6)] {
            assert_eq!(lr_at_epoch(&cfg, epoch).unwrap(), lr);
        }
        // a full 40-epoch history under that schedule, through the CSV file
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model_cfg = TwoBranchConfig {
            lung_depth: 2,
            infection_depth: 2,
            image_size: Some(8),
            backbone: BackboneSpec::compact(vec![4]),
            hidden: 4,
            dropout: 0.0,
            seed: 4,
        };
        let samples: Vec<TwoBranchSample> = (0..4)
            .map(|i| TwoBranchSample {
                label: SeverityLabel::from_index(i),
                ..random_two_branch(1, &model_cfg, rng.random()).remove(0)
            })
            .collect();
        let refs: Vec<&TwoBranchSample> = samples.iter().collect();
        let mut model = TwoBranchModel::<f32>::new(model_cfg);
        let history = train_model(&mut model, &refs, &refs, &cfg).unwrap().history;
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("history.csv");
        history.write_csv(&path).unwrap();
        let back = TrainHistory::read_csv(&path).unwrap();
        assert_eq!(back.records.len(), 40);
        for r in &back.records {
            assert_eq!(r.lr, lr_at_epoch(&cfg, r.epoch).unwrap());
        }
        assert_eq!(
            [back.records[0].lr, back.records[15].lr, back.records[30].lr],
            [1e-4, 1e-5, 1e-6]
        );
    });
}

#[test]
fn criterion_5_stratified_folds() {
    criterion(5, "stratified 5-fold", || {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/train_manifest.csv");
        let manifest = load_manifest(path).unwrap();
        let records: Vec<&ScanRecord> = manifest.records.iter().collect();
        assert_eq!(records.len(), 462);
        assert_eq!(
            class_distribution(records.iter().copied()).unwrap(),
            [133, 124, 166, 39]
        );
        let folds = stratified_kfold(&records, 5, 2024).unwrap();
        folds.validate_against(&records).unwrap();
        let mut counts = [[0usize; 5]; 4];
        for r in &records {
            counts[r.label.unwrap().index()][folds.fold_of(&r.scan_id).unwrap()] += 1;
        }
        for per_fold in counts {
            assert!(
                per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1,
                "{per_fold:?}"
            );
        }
        let mut critical = counts[3];
        critical.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(critical, [8, 8, 8, 8, 7]);
        assert_eq!(stratified_kfold(&records, 5, 2024).unwrap(), folds);
    });
}

fn samples_of(manifest: &DatasetManifest, cfg: &PreprocessConfig) -> (Vec<TwoBranchSample>, Vec<VoxelSample3D>) {
    let pre = Preprocessor::new(Arc::new(OracleFilter), Arc::new(OracleSegmenter), cfg.clone()).unwrap();
    manifest
        .records
        .iter()
        .map(|r| {
            let out = pre.process(r).unwrap();
            (out.two_branch, out.voxel)
        })
        .unzip()
}

fn fit_and_score<M: SeverityModel<f32>>(
    name: &str,
    model: &mut M,
    train: &[M::Input],
    val: &[M::Input],
    cfg: &TrainConfig,
) {
    let train: Vec<&M::Input> = train.iter().collect();
    let val: Vec<&M::Input> = val.iter().collect();
    let history = train_model(model, &train, &[], cfg).unwrap().history;
    let first_perfect = history.records.iter().find(|r| r.train_f1 == 100.0).map(|r| r.epoch);
    let y: Vec<usize> = val.iter().map(|s| s.label().unwrap().index()).collect();
    let val_f1 = macro_f1(&y, &argmax_rows(&predict_probs(model, &val, 16).unwrap())).unwrap();
    println!("{name}: train F1 100 first at epoch {first_perfect:?}, val macro F1 {val_f1:.2}");
    assert!(
        first_perfect.is_some_and(|e| e < 200),
        "{name} never fit the training set"
    );
    assert!(val_f1 >= 80.0, "{name} val macro F1 {val_f1:.2}");
}

#[test]
fn criterion_6_overfit_and_generalize() {
    criterion(6, "overfit 40 scans, validate on 20", || {
        let start = Instant::now();
        let dims = ScanDims::new(40, 64, 64);
        let train = generate_synthetic_dataset(10, 1, dims).unwrap();
        let val = generate_synthetic_dataset(5, 2, dims).unwrap();
        assert_eq!((train.len(), val.len()), (40, 20));
        assert!(train.records.iter().all(|r| val.get(&r.scan_id).is_none()));
        let pre = PreprocessConfig {
            lung_depths: vec![32],
            infection_depths: vec![16],
            image_size: 64,
            voxel_dims: [16, 32, 32],
            ..Default::default()
        };
        let (tr2, tr3) = samples_of(&train, &pre);
        let (va2, va3) = samples_of(&val, &pre);
        let tcfg = TrainConfig {
            epochs: 120,
            batch_size: 16,
            initial_lr: 1e-3,
            lr_decay_epochs: vec![60, 90],
            seed: 3,
            flip_augment: true,
            ..TrainConfig::default_2d()
        };
        let mut m2 = TwoBranchModel::<f32>::new(TwoBranchConfig {
            lung_depth: 32,
            infection_depth: 16,
            image_size: Some(64),
            backbone: BackboneSpec::compact(vec![8, 16, 32]),
            hidden: 64,
            dropout: 0.3,
            seed: 4,
        });
        fit_and_score("two-branch compact", &mut m2, &tr2, &va2, &tcfg);
        let mut m3 = HybridDeCoVNet::<f32>::new(HybridDeCoVNetConfig {
            channels: vec![8, 16, 32, 64],
            head_channels: vec![32, 16, 16],
            input_dims: Some([16, 32, 32]),
            seed: 4,
            ..Default::default()
        });
        fit_and_score("hybrid-decovnet compact", &mut m3, &tr3, &va3, &tcfg);
        assert!(
            start.elapsed() < Duration::from_secs(30 * 60),
            "took {:?}",
            start.elapsed()
        );
    });
}

/// Two independent `run --scenario train-val` executions of the demo
/// config, shared by criteria 7 and 8.
struct DemoRuns {
    _tmp: tempfile::TempDir,
    outs: [PathBuf; 2],
}

fn demo_runs() -> &'static DemoRuns {
    static RUNS: OnceLock<DemoRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/demo.toml");
        let outs = [tmp.path().join("a"), tmp.path().join("b")];
        for out in &outs {
            let status = Command::new(env!("CARGO_BIN_EXE_covsev"))
                .args(["run", "--scenario", "train-val", "--config"])
                .arg(&config)
                .arg("--out")
                .arg(out)
                .env("RUST_LOG", "warn")
                .status()
                .unwrap();
            assert!(status.success(), "demo run into {} failed", out.display());
        }
        DemoRuns { _tmp: tmp, outs }
    })
}

fn prob_sets(rng: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
    let (n, k) = (rng.random_range(1..10), rng.random_range(1..6));
    (0..k)
        .map(|_| {
            let mut m = Array2::from_shape_simple_fn((n, 4), || rng.random_range(1e-6..1.0));
            for mut row in m.rows_mut() {
                let s = row.sum();
                row /= s;
            }
            m
        })
        .collect()
}

#[test]
fn criterion_7_ensemble() {
    criterion(7, "ensemble invariants and recomputable report", || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let sets = prob_sets(&mut rng);
            let mean = ensemble_probs(&sets, None).unwrap();
            assert_eq!(
                ensemble_probs(&vec![sets[0].clone(); sets.len()], None).unwrap(),
                sets[0]
            );
            let mut shuffled = sets.clone();
            shuffled.shuffle(&mut rng);
            assert_eq!(ensemble_probs(&shuffled, None).unwrap(), mean);
            assert_eq!(
                majority_vote(&shuffled, None).unwrap(),
                majority_vote(&sets, None).unwrap()
            );
            for row in mean.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9 && row.iter().all(|v| *v >= 0.0));
            }
            // a class every member ranks first stays first
            let argmaxes: Vec<usize> = sets.iter().map(|m| argmax(m.row(0).as_slice().unwrap())).collect();
            if argmaxes.iter().all(|&c| c == argmaxes[0]) {
                assert_eq!(argmax(mean.row(0).as_slice().unwrap()), argmaxes[0]);
            }
        }

        let dir = demo_runs().outs[0].join("reports/train-val");
        let read = |m: &str| Predictions::read(&dir.join(format!("{m}_predictions.csv"))).unwrap();
        let (p2, p3, pe) = (read("2d"), read("3d"), read("ensemble"));
        assert_eq!(p2.scan_ids, p3.scan_ids);
        assert_eq!(p2.scan_ids.len(), 20);
        let probs = ensemble_probs(&[p2.probs.clone(), p3.probs.clone()], None).unwrap();
        assert!(probs
            .iter()
            .zip(pe.probs.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let recomputed = make_report(&p2.y_true(), &probs, "train-val", "ensemble", &pe.config_hash).unwrap();
        let on_disk = std::fs::read_to_string(dir.join("ensemble.json")).unwrap();
        assert_eq!(format!("{}\n", recomputed.to_json()), on_disk);
        println!("ensemble macro F1 {:.2}", recomputed.macro_f1);
    });
}

#[test]
fn criterion_8_pipeline_determinism() {
    criterion(8, "byte-identical reports across runs", || {
        let runs = demo_runs();
        let dir = |i: usize| runs.outs[i].join("reports/train-val");
        let mut names: Vec<String> = std::fs::read_dir(dir(0))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".json"))
            .collect();
        names.sort();
        assert_eq!(names, ["2d.json", "3d.json", "ensemble.json"]);
        for name in &names {
            let a = std::fs::read(dir(0).join(name)).unwrap();
            let b = std::fs::read(dir(1).join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
            MetricsReport::read(&dir(0).join(name)).unwrap();
        }
    });
}

#[test]
fn criterion_9_preprocessing_fidelity() {
    criterion(9, "oracle masks, packing, cache round trip", || {
        let manifest = generate_synthetic_dataset(2, 9, ScanDims::new(24, 48, 48)).unwrap();
        let cfg = PreprocessConfig {
            image_size: 48,
            voxel_dims: [16, 48, 48],
            ..Default::default()
        };
        let pre = Preprocessor::new(Arc::new(OracleFilter), Arc::new(OracleSegmenter), cfg).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        for r in &manifest.records {
            let out = pre.process(r).unwrap();
            let gt = r.ground_truth_masks().unwrap().unwrap();
            for (k, &i) in out.kept.iter().enumerate() {
                assert_eq!(out.masks[k], gt[i]);
            }
            let lung_slices: Vec<usize> = (0..gt.len()).filter(|&i| gt[i].lung.iter().any(|v| *v)).collect();
            assert_eq!(out.kept, lung_slices);
            let stem = tmp.path().join(&r.scan_id);
            let data = out.voxel.volume.clone();
            let shape: [usize; 4] = data.shape().try_into().unwrap();
            write_volume(&stem, &VolumeMeta::new(&r.scan_id, shape, "h"), &data).unwrap();
            let (back, _) = read_volume(&stem).unwrap();
            assert!(back.iter().zip(data.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(matches!(lookup(&stem, "h"), CacheLookup::Hit(_)));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let slices: Vec<Slice> = (0..6)
            .map(|_| Array2::from_shape_simple_fn((10, 12), || rng.random::<f32>()))
            .collect();
        let same = pack_volume(&slices, [6, 10, 12]).unwrap();
        for (d, s) in slices.iter().enumerate() {
            assert_eq!(same.index_axis(ndarray::Axis(0), d), s.view());
        }
        let constant = vec![Array2::from_elem((17, 13), 0.625f32); 9];
        for target in [[4, 8, 8], [32, 299, 299], [1, 1, 1]] {
            assert!(pack_volume(&constant, target).unwrap().iter().all(|v| *v == 0.625));
        }
        let empty = MaskPair {
            lung: Array2::from_elem((4, 4), false),
            infection: Array2::from_elem((4, 4), false),
        };
        assert!(!empty.lung.iter().any(|v| *v));
    });
}
