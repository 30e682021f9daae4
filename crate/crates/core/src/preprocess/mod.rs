//! Slice filtering, lung/infection segmentation, masking and volume packing.
//!
//! A scan goes through four steps: keep the slices that show lung, segment
//! each kept slice into lung and infection masks (infection clipped to the
//! lung), multiply the intensities by each mask, and resample the masked
//! stacks into the fixed-shape volumes the two networks consume.

mod resample;
pub mod stages;

use std::sync::Arc;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use resample::{resize_volume, Interpolation};
pub use stages::{
    heuristic_lung_filter, HeuristicFilter, LungSlicePredictor, OracleFilter, OracleSegmenter, SegmentationPredictor,
    SegmenterNet, SegmenterNetConfig, SliceContext, SliceFilterNet, SliceFilterNetConfig, StageFitConfig,
};

use crate::dataset::{DatasetError, MaskPair, ScanRecord, SeverityLabel, Slice};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("scan '{scan_id}' slice {slice}: predictor failed: {message}")]
    Predictor {
        scan_id: String,
        slice: usize,
        message: String,
    },
    #[error("scan '{scan_id}' slice {slice}: {message}")]
    Contract {
        scan_id: String,
        slice: usize,
        message: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

/// How "segmented lungs / infection" are rendered into network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// Intensity × mask, resampled trilinearly.
    #[default]
    MaskedIntensity,
    /// The binary mask itself, resampled nearest-neighbour.
    BinaryMask,
}

/// Shapes and thresholds of the preprocessing stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub threshold: f64,
    pub min_keep: usize,
    pub representation: Representation,
    /// Depths packed for the lungs branch; several entries are concatenated
    /// along the depth axis (the "two views" reading).
    pub lung_depths: Vec<usize>,
    pub infection_depths: Vec<usize>,
    /// Height and width of the 2D-branch volumes.
    pub image_size: usize,
    /// `(D, H, W)` of each channel of the 3D volume.
    pub voxel_dims: [usize; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_keep: 8,
            representation: Representation::MaskedIntensity,
            lung_depths: vec![32],
            infection_depths: vec![16],
            image_size: 299,
            voxel_dims: [64, 224, 224],
        }
    }
}

impl PreprocessConfig {
    pub fn lung_depth(&self) -> usize {
        self.lung_depths.iter().sum()
    }

    pub fn infection_depth(&self) -> usize {
        self.infection_depths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(PreprocessError::InvalidArgument(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if self.min_keep == 0 {
            return Err(PreprocessError::InvalidArgument("min_keep must be at least 1".into()));
        }
        let all = self
            .lung_depths
            .iter()
            .chain(&self.infection_depths)
            .chain(&self.voxel_dims);
        if self.lung_depths.is_empty()
            || self.infection_depths.is_empty()
            || self.image_size == 0
            || all.clone().any(|d| *d == 0)
        {
            return Err(PreprocessError::InvalidArgument(
                "packing targets must be non-empty and >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Slice filter: a predictor plus the keep rule.
pub struct SliceFilterModel {
    pub predictor: Arc<dyn LungSlicePredictor>,
    pub threshold: f64,
    pub min_keep: usize,
}

impl SliceFilterModel {
    pub fn new(predictor: Arc<dyn LungSlicePredictor>) -> Self {
        Self {
            predictor,
            threshold: 0.5,
            min_keep: 8,
        }
    }

    pub fn with_rule(mut self, threshold: f64, min_keep: usize) -> Self {
        self.threshold = threshold;
        self.min_keep = min_keep;
        self
    }
}

pub struct Segmenter {
    pub predictor: Arc<dyn SegmentationPredictor>,
}

impl Segmenter {
    pub fn new(predictor: Arc<dyn SegmentationPredictor>) -> Self {
        Self { predictor }
    }
}

/// The keep rule applied to per-slice probabilities: indices at or above
/// `threshold`; if fewer than `min_keep` qualify, the `min_keep` most
/// probable slices (ties to the lower index). Always ascending, never empty
/// for non-empty input.
pub fn select_slices(probabilities: &[f64], threshold: f64, min_keep: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = (0..probabilities.len())
        .filter(|&i| probabilities[i] >= threshold)
        .collect();
    if kept.len() < min_keep {
        let mut order: Vec<usize> = (0..probabilities.len()).collect();
        order.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
        order.truncate(min_keep.max(1));
        order.sort_unstable();
        kept = order;
    }
    kept
}

fn contexts<'a>(
    scan: &'a ScanRecord,
    slices: &'a [Slice],
    masks: Option<&'a [MaskPair]>,
    i: usize,
) -> SliceContext<'a> {
    SliceContext {
        scan_id: &scan.scan_id,
        index: i,
        slice: &slices[i],
        ground_truth: masks.and_then(|m| m.get(i)),
    }
}

/// Indices of the slices to keep, ascending.
pub fn filter_slices(scan: &ScanRecord, slices: &[Slice], model: &SliceFilterModel) -> Result<Vec<usize>> {
    if slices.is_empty() {
        return Err(PreprocessError::InvalidArgument(format!(
            "scan '{}' has no slices",
            scan.scan_id
        )));
    }
    let gt = scan.ground_truth_masks()?;
    let gt = gt.as_deref().map(Vec::as_slice);
    let mut probs = Vec::with_capacity(slices.len());
    for i in 0..slices.len() {
        let p = model
            .predictor
            .lung_probability(&contexts(scan, slices, gt, i))
            .map_err(|message| PreprocessError::Predictor {
                scan_id: scan.scan_id.clone(),
                slice: i,
                message,
            })?;
        if !(0.0..=1.0).contains(&p) {
            return Err(PreprocessError::Predictor {
                scan_id: scan.scan_id.clone(),
                slice: i,
                message: format!("probability {p} outside [0, 1]"),
            });
        }
        probs.push(p);
    }
    Ok(select_slices(&probs, model.threshold, model.min_keep))
}

/// One mask pair per kept slice, infection clipped to the lung.
pub fn segment_scan(
    scan: &ScanRecord,
    slices: &[Slice],
    kept: &[usize],
    segmenter: &Segmenter,
) -> Result<Vec<MaskPair>> {
    let gt = scan.ground_truth_masks()?;
    let gt = gt.as_deref().map(Vec::as_slice);
    kept.iter()
        .map(|&i| {
            if i >= slices.len() {
                return Err(PreprocessError::InvalidArgument(format!(
                    "kept index {i} out of range for {} slices",
                    slices.len()
                )));
            }
            let contract = |message: String| PreprocessError::Contract {
                scan_id: scan.scan_id.clone(),
                slice: i,
                message,
            };
            let mut pair = segmenter
                .predictor
                .segment(&contexts(scan, slices, gt, i))
                .map_err(|message| PreprocessError::Predictor {
                    scan_id: scan.scan_id.clone(),
                    slice: i,
                    message,
                })?;
            let dims = slices[i].dim();
            if pair.lung.dim() != dims || pair.infection.dim() != dims {
                return Err(contract(format!(
                    "segmenter returned masks {:?}/{:?} for a {:?} slice",
                    pair.lung.dim(),
                    pair.infection.dim(),
                    dims
                )));
            }
            ndarray::Zip::from(&mut pair.infection)
                .and(&pair.lung)
                .for_each(|inf, &lung| *inf &= lung);
            Ok(pair)
        })
        .collect()
}

/// Resamples a stack of `(H, W)` slices to `target = (D, H', W')` with
/// trilinear interpolation.
pub fn pack_volume(slices: &[Slice], target: [usize; 3]) -> Result<Array3<f32>> {
    pack_with(slices, target, Interpolation::Linear)
}

/// Nearest-neighbour variant for binary inputs; output stays in {0, 1}.
pub fn pack_mask_volume(slices: &[Slice], target: [usize; 3]) -> Result<Array3<f32>> {
    pack_with(slices, target, Interpolation::Nearest)
}

fn pack_with(slices: &[Slice], target: [usize; 3], interp: Interpolation) -> Result<Array3<f32>> {
    let Some(first) = slices.first() else {
        return Err(PreprocessError::InvalidArgument(
            "cannot pack an empty slice list".into(),
        ));
    };
    if target.contains(&0) {
        return Err(PreprocessError::InvalidArgument(format!(
            "packing target {target:?} has a zero axis"
        )));
    }
    if slices.iter().any(|s| s.dim() != first.dim()) || first.is_empty() {
        return Err(PreprocessError::InvalidArgument(
            "slices must be non-empty and share one shape".into(),
        ));
    }
    Ok(resize_volume(&crate::dataset::stack_slices(slices), target, interp))
}

/// Packed inputs of the two-branch 2D network.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoBranchSample {
    pub scan_id: String,
    /// `(depth, image_size, image_size)`, depth 32 by default.
    pub lungs: Array3<f32>,
    /// `(depth, image_size, image_size)`, depth 16 by default.
    pub infection: Array3<f32>,
    pub label: Option<SeverityLabel>,
}

/// Packed two-channel input of the 3D network, `(2, D, H, W)`: channel 0
/// lung, channel 1 infection.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSample3D {
    pub scan_id: String,
    pub volume: Array4<f32>,
    pub label: Option<SeverityLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    Lung,
    Infection,
}

fn masked_slices(
    slices: &[Slice],
    kept: &[usize],
    masks: &[MaskPair],
    region: Region,
    repr: Representation,
) -> Vec<Slice> {
    kept.iter()
        .zip(masks)
        .map(|(&i, m)| {
            let mask = match region {
                Region::Lung => &m.lung,
                Region::Infection => &m.infection,
            };
            match repr {
                Representation::MaskedIntensity => {
                    let mut s = slices[i].clone();
                    ndarray::Zip::from(&mut s).and(mask).for_each(|v, &keep| {
                        if !keep {
                            *v = 0.0;
                        }
                    });
                    s
                }
                Representation::BinaryMask => mask.mapv(|b| b as u8 as f32),
            }
        })
        .collect()
}

fn pack_region(
    slices: &[Slice],
    kept: &[usize],
    masks: &[MaskPair],
    region: Region,
    depths: &[usize],
    hw: [usize; 2],
    repr: Representation,
) -> Result<Array3<f32>> {
    if kept.len() != masks.len() {
        return Err(PreprocessError::InvalidArgument(format!(
            "{} kept slices but {} mask pairs",
            kept.len(),
            masks.len()
        )));
    }
    if let Some(&bad) = kept.iter().find(|&&i| i >= slices.len()) {
        return Err(PreprocessError::InvalidArgument(format!(
            "kept index {bad} out of range"
        )));
    }
    let masked = masked_slices(slices, kept, masks, region, repr);
    let views: Vec<Array3<f32>> = depths
        .iter()
        .map(|&d| match repr {
            Representation::MaskedIntensity => pack_volume(&masked, [d, hw[0], hw[1]]),
            Representation::BinaryMask => pack_mask_volume(&masked, [d, hw[0], hw[1]]),
        })
        .collect::<Result<_>>()?;
    if views.len() == 1 {
        return Ok(views.into_iter().next().expect("one view"));
    }
    let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &refs).expect("views share H and W"))
}

pub fn build_two_branch_sample(
    scan: &ScanRecord,
    slices: &[Slice],
    kept: &[usize],
    masks: &[MaskPair],
    config: &PreprocessConfig,
) -> Result<TwoBranchSample> {
    let hw = [config.image_size, config.image_size];
    let lungs = pack_region(
        slices,
        kept,
        masks,
        Region::Lung,
        &config.lung_depths,
        hw,
        config.representation,
    )?;
    let infection = pack_region(
        slices,
        kept,
        masks,
        Region::Infection,
        &config.infection_depths,
        hw,
        config.representation,
    )?;
    Ok(TwoBranchSample {
        scan_id: scan.scan_id.clone(),
        lungs,
        infection,
        label: scan.label,
    })
}

pub fn build_voxel_sample(
    scan: &ScanRecord,
    slices: &[Slice],
    kept: &[usize],
    masks: &[MaskPair],
    config: &PreprocessConfig,
) -> Result<VoxelSample3D> {
    let [d, h, w] = config.voxel_dims;
    let lung = pack_region(slices, kept, masks, Region::Lung, &[d], [h, w], config.representation)?;
    let infection = pack_region(
        slices,
        kept,
        masks,
        Region::Infection,
        &[d],
        [h, w],
        config.representation,
    )?;
    let volume = ndarray::stack(Axis(0), &[lung.view(), infection.view()]).expect("channels share shape");
    Ok(VoxelSample3D {
        scan_id: scan.scan_id.clone(),
        volume,
        label: scan.label,
    })
}

/// Everything preprocessing produces for one scan.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub kept: Vec<usize>,
    pub masks: Vec<MaskPair>,
    pub two_branch: TwoBranchSample,
    pub voxel: VoxelSample3D,
}

/// Filter + segmenter + packing shapes.
pub struct Preprocessor {
    pub filter: SliceFilterModel,
    pub segmenter: Segmenter,
    pub config: PreprocessConfig,
}

impl Preprocessor {
    pub fn new(
        filter: Arc<dyn LungSlicePredictor>,
        segmenter: Arc<dyn SegmentationPredictor>,
        config: PreprocessConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            filter: SliceFilterModel::new(filter).with_rule(config.threshold, config.min_keep),
            segmenter: Segmenter::new(segmenter),
            config,
        })
    }

    pub fn process(&self, scan: &ScanRecord) -> Result<Preprocessed> {
        let slices = scan.slices()?;
        let kept = filter_slices(scan, &slices, &self.filter)?;
        let masks = segment_scan(scan, &slices, &kept, &self.segmenter)?;
        let two_branch = build_two_branch_sample(scan, &slices, &kept, &masks, &self.config)?;
        let voxel = build_voxel_sample(scan, &slices, &kept, &masks, &self.config)?;
        Ok(Preprocessed {
            kept,
            masks,
            two_branch,
            voxel,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, Mask, ScanDims};
    use ndarray::Array2;

    struct Fixed(Vec<f64>);

    impl LungSlicePredictor for Fixed {
        fn lung_probability(&self, ctx: &SliceContext<'_>) -> std::result::Result<f64, String> {
            Ok(self.0[ctx.index])
        }
    }

    struct Failing;

    impl LungSlicePredictor for Failing {
        fn lung_probability(&self, ctx: &SliceContext<'_>) -> std::result::Result<f64, String> {
            if ctx.index == 2 {
                Err("boom".into())
            } else {
                Ok(1.0)
            }
        }
    }

    fn blank_scan(n: usize) -> (ScanRecord, Vec<Slice>) {
        let slices = vec![Slice::zeros((4, 4)); n];
        (ScanRecord::in_memory("s", slices.clone(), None), slices)
    }

    fn filter(probs: &[f64], min_keep: usize) -> Vec<usize> {
        let (scan, slices) = blank_scan(probs.len());
        let model = SliceFilterModel::new(Arc::new(Fixed(probs.to_vec()))).with_rule(0.5, min_keep);
        filter_slices(&scan, &slices, &model).unwrap()
    }

    #[test]
    fn threshold_rule() {
        assert_eq!(filter(&[0.9, 0.2, 0.6], 1), vec![0, 2]);
        assert_eq!(filter(&[0.9, 0.7, 0.6, 0.5], 1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn min_keep_fallback_takes_most_probable() {
        // brute force: the two largest of (0.1, 0.4, 0.3, 0.2) sit at 1 and 2
        assert_eq!(filter(&[0.1, 0.4, 0.3, 0.2], 2), vec![1, 2]);
        // ties resolve toward the lower index
        assert_eq!(filter(&[0.3, 0.3, 0.3], 2), vec![0, 1]);
        // fewer slices than min_keep keeps them all
        assert_eq!(filter(&[0.0, 0.0], 8), vec![0, 1]);
    }

    #[test]
    fn predictor_failure_carries_slice_index() {
        let (scan, slices) = blank_scan(4);
        let model = SliceFilterModel::new(Arc::new(Failing));
        match filter_slices(&scan, &slices, &model).unwrap_err() {
            PreprocessError::Predictor { slice, message, .. } => {
                assert_eq!(slice, 2);
                assert_eq!(message, "boom");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn heuristic_filter_edge_cases() {
        assert_eq!(heuristic_lung_filter(&Slice::zeros((32, 32))), 0.0);
        assert_eq!(heuristic_lung_filter(&Slice::ones((32, 32))), 0.0);
        assert_eq!(heuristic_lung_filter(&Slice::from_elem((10, 10), 0.3)), 1.0);
    }

    struct Raw(MaskPair);

    impl SegmentationPredictor for Raw {
        fn segment(&self, _ctx: &SliceContext<'_>) -> std::result::Result<MaskPair, String> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn infection_outside_lung_is_removed() {
        let (scan, slices) = blank_scan(1);
        let mut lung = Mask::from_elem((4, 4), false);
        lung[[1, 1]] = true;
        let mut infection = Mask::from_elem((4, 4), false);
        infection[[1, 1]] = true;
        infection[[3, 3]] = true;
        let seg = Segmenter::new(Arc::new(Raw(MaskPair { lung, infection })));
        let out = segment_scan(&scan, &slices, &[0], &seg).unwrap();
        assert!(out[0].infection[[1, 1]]);
        assert!(!out[0].infection[[3, 3]]);
    }

    #[test]
    fn wrong_mask_dims_is_a_contract_error() {
        let (scan, slices) = blank_scan(2);
        let bad = MaskPair {
            lung: Mask::from_elem((3, 4), false),
            infection: Mask::from_elem((3, 4), false),
        };
        let seg = Segmenter::new(Arc::new(Raw(bad)));
        let err = segment_scan(&scan, &slices, &[1], &seg).unwrap_err();
        assert!(matches!(err, PreprocessError::Contract { slice: 1, .. }), "{err}");
    }

    #[test]
    fn background_slice_segments_to_empty_masks() {
        let (scan, slices) = blank_scan(1);
        let empty = MaskPair {
            lung: Mask::from_elem((4, 4), false),
            infection: Mask::from_elem((4, 4), false),
        };
        let scan = scan.with_masks(vec![empty.clone()]);
        let seg = Segmenter::new(Arc::new(OracleSegmenter));
        assert_eq!(segment_scan(&scan, &slices, &[0], &seg).unwrap(), vec![empty]);
    }

    #[test]
    fn pack_identity_and_constants() {
        let slices: Vec<Slice> = (0..5)
            .map(|d| Array2::from_shape_fn((6, 7), |(h, w)| ((d * 13 + h * 7 + w) % 10) as f32 / 9.0))
            .collect();
        let same = pack_volume(&slices, [5, 6, 7]).unwrap();
        for (d, s) in slices.iter().enumerate() {
            assert_eq!(same.index_axis(Axis(0), d), s.view());
        }
        let constant = vec![Slice::from_elem((9, 11), 0.37); 4];
        let out = pack_volume(&constant, [7, 5, 13]).unwrap();
        assert!(out.iter().all(|v| *v == 0.37));
        assert!(pack_volume(&[], [1, 1, 1]).is_err());
    }

    #[test]
    fn oracle_path_on_synthetic_scan() {
        let m = generate_synthetic_dataset(1, 3, ScanDims::new(12, 24, 24)).unwrap();
        let config = PreprocessConfig {
            lung_depths: vec![8],
            infection_depths: vec![4],
            image_size: 16,
            voxel_dims: [8, 12, 12],
            ..Default::default()
        };
        let pre = Preprocessor::new(Arc::new(OracleFilter), Arc::new(OracleSegmenter), config).unwrap();
        for scan in &m.records {
            let out = pre.process(scan).unwrap();
            let gt = scan.ground_truth_masks().unwrap().unwrap();
            for (k, pair) in out.kept.iter().zip(&out.masks) {
                assert_eq!(pair, &gt[*k]);
            }
            assert_eq!(out.two_branch.lungs.dim(), (8, 16, 16));
            assert_eq!(out.two_branch.infection.dim(), (4, 16, 16));
            assert_eq!(out.voxel.volume.dim(), (2, 8, 12, 12));
            assert_eq!(out.two_branch.label, scan.label);
        }
    }

    #[test]
    fn two_views_concatenate_along_depth() {
        let m = generate_synthetic_dataset(1, 5, ScanDims::new(10, 16, 16)).unwrap();
        let config = PreprocessConfig {
            lung_depths: vec![8, 4],
            infection_depths: vec![8, 4],
            image_size: 12,
            voxel_dims: [4, 8, 8],
            ..Default::default()
        };
        let pre = Preprocessor::new(Arc::new(OracleFilter), Arc::new(OracleSegmenter), config).unwrap();
        let out = pre.process(&m.records[0]).unwrap();
        assert_eq!(out.two_branch.lungs.dim(), (12, 12, 12));
        assert_eq!(out.two_branch.infection.dim(), (12, 12, 12));
    }
}
