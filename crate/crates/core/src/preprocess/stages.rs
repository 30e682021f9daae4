//! Pluggable slice-filter and segmentation predictors.
//!
//! Three families are provided for each stage: a ground-truth oracle (for
//! synthetic data), a deterministic heuristic (filter only) and a compact
//! learned network that can be fitted on scans carrying ground-truth masks.

use std::path::Path;
use std::sync::Mutex;

use ndarray::{Array2, Array5, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::resample::{resize_volume, Interpolation};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dataset::{Mask, MaskPair, ScanRecord, Slice};
use crate::nn::{
    join, softmax_cross_entropy, softmax_rows, Adam, AdamConfig, Conv3d, ConvBnRelu, ConvStack, GlobalAvgPool, Linear,
    Mode, Module, NnResult, Param,
};

/// Everything a per-slice predictor may look at.
#[derive(Debug, Clone, Copy)]
pub struct SliceContext<'a> {
    pub scan_id: &'a str,
    pub index: usize,
    pub slice: &'a Slice,
    pub ground_truth: Option<&'a MaskPair>,
}

/// Maps a slice to the probability that it shows lung tissue.
pub trait LungSlicePredictor: Send + Sync {
    fn lung_probability(&self, ctx: &SliceContext<'_>) -> Result<f64, String>;
}

/// Maps a slice to binary lung and infection masks of the same size.
pub trait SegmentationPredictor: Send + Sync {
    fn segment(&self, ctx: &SliceContext<'_>) -> Result<MaskPair, String>;
}

/// Intensity band counted as lung parenchyma or lesion by the heuristic.
pub const HEURISTIC_BAND: (f32, f32) = (0.05, 0.6);
/// Fraction of each axis kept by the heuristic's central crop.
pub const HEURISTIC_CROP: f64 = 0.8;

/// Fraction of pixels of the central crop whose intensity lies in
/// [`HEURISTIC_BAND`].
pub fn heuristic_lung_filter(slice: &Slice) -> f64 {
    let (h, w) = slice.dim();
    let margin = (1.0 - HEURISTIC_CROP) / 2.0;
    let (r0, r1) = (
        (h as f64 * margin).round() as usize,
        (h as f64 * (1.0 - margin)).round() as usize,
    );
    let (c0, c1) = (
        (w as f64 * margin).round() as usize,
        (w as f64 * (1.0 - margin)).round() as usize,
    );
    let crop = slice.slice(ndarray::s![r0..r1.max(r0 + 1).min(h), c0..c1.max(c0 + 1).min(w)]);
    if crop.is_empty() {
        return 0.0;
    }
    let (lo, hi) = HEURISTIC_BAND;
    let inside = crop.iter().filter(|v| (lo..=hi).contains(*v)).count();
    (inside as f64 / crop.len() as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicFilter;

impl LungSlicePredictor for HeuristicFilter {
    fn lung_probability(&self, ctx: &SliceContext<'_>) -> Result<f64, String> {
        Ok(heuristic_lung_filter(ctx.slice))
    }
}

/// 1.0 when the ground-truth lung mask is non-empty, else 0.0.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleFilter;

impl LungSlicePredictor for OracleFilter {
    fn lung_probability(&self, ctx: &SliceContext<'_>) -> Result<f64, String> {
        let gt = ctx
            .ground_truth
            .ok_or_else(|| format!("scan '{}' has no ground-truth masks", ctx.scan_id))?;
        Ok(if gt.lung.iter().any(|v| *v) { 1.0 } else { 0.0 })
    }
}

/// Returns the scan's ground-truth masks.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleSegmenter;

impl SegmentationPredictor for OracleSegmenter {
    fn segment(&self, ctx: &SliceContext<'_>) -> Result<MaskPair, String> {
        ctx.ground_truth
            .cloned()
            .ok_or_else(|| format!("scan '{}' has no ground-truth masks", ctx.scan_id))
    }
}

fn slice_tensor(slice: &Slice, size: Option<usize>) -> Array5<f32> {
    let (h, w) = slice.dim();
    let img = match size {
        Some(s) if (h, w) != (s, s) => {
            let vol = slice.view().insert_axis(Axis(0)).to_owned();
            resize_volume(&vol, [1, s, s], Interpolation::Linear)
                .index_axis(Axis(0), 0)
                .to_owned()
        }
        _ => slice.clone(),
    };
    let (h, w) = img.dim();
    img.into_shape_with_order((1, 1, 1, h, w)).expect("contiguous slice")
}

/// Options for fitting the learned stage models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for StageFitConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceFilterNetConfig {
    /// Slices are resized to `input_size × input_size`.
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for SliceFilterNetConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: vec![8, 16, 16],
            seed: 0,
        }
    }
}

/// Compact lung / non-lung slice classifier: strided conv stack, global
/// average pooling, linear layer over two classes.
#[derive(Debug)]
pub struct SliceFilterNet {
    pub config: SliceFilterNetConfig,
    layers: Mutex<FilterLayers>,
}

#[derive(Debug)]
struct FilterLayers {
    stack: ConvStack<f32>,
    pool: GlobalAvgPool,
    fc: Linear<f32>,
}

impl Module<f32> for FilterLayers {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        self.stack.visit_params(&join(prefix, "stack"), f);
        self.fc.visit_params(&join(prefix, "fc"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f32>)) {
        self.stack.visit_buffers(&join(prefix, "stack"), f);
    }
}

impl FilterLayers {
    fn forward(&mut self, x: &Array5<f32>, mode: Mode) -> NnResult<Array2<f32>> {
        let y = self.stack.forward(x, mode)?;
        let feats = self.pool.forward(&y, mode);
        self.fc.forward(&feats, mode)
    }

    fn backward(&mut self, grad: &Array2<f32>) -> NnResult<()> {
        let g = self.fc.backward(grad)?;
        let g = self.pool.backward(&g)?;
        self.stack.backward(g)?;
        Ok(())
    }
}

pub const SLICE_FILTER_ARCH: &str = "slice-filter-net";
pub const SEGMENTER_ARCH: &str = "segmenter-net";

impl SliceFilterNet {
    pub fn new(config: SliceFilterNetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut units = Vec::new();
        let mut c_in = 1;
        for &c in &config.channels {
            units.push(ConvBnRelu::new(c_in, c, [1, 3, 3], [1, 2, 2], [0, 1, 1], &mut rng));
            c_in = c;
        }
        if let Some(first) = units.first_mut() {
            first.conv.input_grad = false;
        }
        let fc = Linear::new(c_in, 2, &mut rng);
        Self {
            config,
            layers: Mutex::new(FilterLayers {
                stack: ConvStack::new(units),
                pool: GlobalAvgPool::new(),
                fc,
            }),
        }
    }

    fn batch(&self, slices: &[&Slice]) -> Array5<f32> {
        let s = self.config.input_size;
        let mut x = Array5::zeros((slices.len(), 1, 1, s, s));
        for (mut dst, slice) in x.outer_iter_mut().zip(slices) {
            dst.assign(&slice_tensor(slice, Some(s)).index_axis(Axis(0), 0));
        }
        x
    }

    /// Fits on every slice of `scans`; a slice is positive when its
    /// ground-truth lung mask is non-empty.
    pub fn fit(&self, scans: &[&ScanRecord], fit: &StageFitConfig) -> Result<(), String> {
        let mut samples: Vec<(Slice, usize)> = Vec::new();
        for scan in scans {
            let slices = scan.slices().map_err(|e| e.to_string())?;
            let masks = scan
                .ground_truth_masks()
                .map_err(|e| e.to_string())?
                .ok_or_else(|| format!("scan '{}' has no ground-truth masks", scan.scan_id))?;
            for (s, m) in slices.iter().zip(masks.iter()) {
                samples.push((s.clone(), m.lung.iter().any(|v| *v) as usize));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
        let mut adam = Adam::new(AdamConfig::default());
        let mut layers = self.layers.lock().expect("filter lock");
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..fit.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(fit.batch_size.max(1)) {
                let batch: Vec<&Slice> = chunk.iter().map(|&i| &samples[i].0).collect();
                let targets: Vec<usize> = chunk.iter().map(|&i| samples[i].1).collect();
                let x = self.batch(&batch);
                layers.zero_grad();
                let logits = layers.forward(&x, Mode::Train).map_err(|e| e.to_string())?;
                let (_, grad) = softmax_cross_entropy(&logits, &targets, None);
                layers.backward(&grad).map_err(|e| e.to_string())?;
                adam.step(&mut *layers, fit.lr);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut layers = self.layers.lock().expect("filter lock");
        Checkpoint::capture(SLICE_FILTER_ARCH, &self.config, &mut *layers).save(path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let ck = Checkpoint::load(path)?;
        let config: SliceFilterNetConfig = serde_json::from_value(ck.meta.config.clone())
            .map_err(|e| CheckpointError::Layout(format!("bad slice filter config: {e}")))?;
        let net = Self::new(config);
        ck.restore(&net.config, &mut *net.layers.lock().expect("filter lock"))?;
        Ok(net)
    }
}

impl LungSlicePredictor for SliceFilterNet {
    fn lung_probability(&self, ctx: &SliceContext<'_>) -> Result<f64, String> {
        let x = self.batch(&[ctx.slice]);
        let logits = self
            .layers
            .lock()
            .map_err(|e| e.to_string())?
            .forward(&x, Mode::Eval)
            .map_err(|e| e.to_string())?;
        Ok(softmax_rows(&logits)[[0, 1]] as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterNetConfig {
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for SegmenterNetConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 8],
            seed: 0,
        }
    }
}

/// Compact full-resolution per-pixel classifier over
/// {background, lung, infection}.
#[derive(Debug)]
pub struct SegmenterNet {
    pub config: SegmenterNetConfig,
    layers: Mutex<SegLayers>,
}

#[derive(Debug)]
struct SegLayers {
    stack: ConvStack<f32>,
    head: Conv3d<f32>,
}

impl Module<f32> for SegLayers {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        self.stack.visit_params(&join(prefix, "stack"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f32>)) {
        self.stack.visit_buffers(&join(prefix, "stack"), f);
    }
}

/// `(N, 3, 1, H, W)` logits to `(N·H·W, 3)` rows.
fn pixel_rows(logits: &Array5<f32>) -> Array2<f32> {
    let (n, c, _, h, w) = logits.dim();
    let mut rows = Array2::zeros((n * h * w, c));
    for i in 0..n {
        for ch in 0..c {
            let plane = logits.slice(ndarray::s![i, ch, 0, .., ..]);
            for (p, v) in plane.iter().enumerate() {
                rows[[i * h * w + p, ch]] = *v;
            }
        }
    }
    rows
}

fn pixel_grid(rows: &Array2<f32>, n: usize, h: usize, w: usize) -> Array5<f32> {
    let c = rows.ncols();
    Array5::from_shape_fn((n, c, 1, h, w), |(i, ch, _, y, x)| rows[[i * h * w + y * w + x, ch]])
}

impl SegmenterNet {
    pub fn new(config: SegmenterNetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut units = Vec::new();
        let mut c_in = 1;
        for &c in &config.channels {
            units.push(ConvBnRelu::new(c_in, c, [1, 3, 3], [1, 1, 1], [0, 1, 1], &mut rng));
            c_in = c;
        }
        if let Some(first) = units.first_mut() {
            first.conv.input_grad = false;
        }
        let head = Conv3d::new(c_in, 3, [1, 1, 1], [1, 1, 1], [0, 0, 0], true, &mut rng);
        Self {
            config,
            layers: Mutex::new(SegLayers {
                stack: ConvStack::new(units),
                head,
            }),
        }
    }

    /// Per-pixel class targets: 2 infection, 1 lung, 0 elsewhere.
    fn targets(masks: &MaskPair) -> Vec<usize> {
        masks
            .lung
            .iter()
            .zip(masks.infection.iter())
            .map(|(l, i)| {
                if *i {
                    2
                } else if *l {
                    1
                } else {
                    0
                }
            })
            .collect()
    }

    pub fn fit(&self, scans: &[&ScanRecord], fit: &StageFitConfig) -> Result<(), String> {
        let mut samples: Vec<(Slice, MaskPair)> = Vec::new();
        for scan in scans {
            let slices = scan.slices().map_err(|e| e.to_string())?;
            let masks = scan
                .ground_truth_masks()
                .map_err(|e| e.to_string())?
                .ok_or_else(|| format!("scan '{}' has no ground-truth masks", scan.scan_id))?;
            samples.extend(slices.iter().cloned().zip(masks.iter().cloned()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
        let mut adam = Adam::new(AdamConfig::default());
        let mut layers = self.layers.lock().expect("segmenter lock");
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..fit.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(fit.batch_size.max(1)) {
                let (h, w) = samples[chunk[0]].0.dim();
                if chunk.iter().any(|&i| samples[i].0.dim() != (h, w)) {
                    return Err("segmenter training slices must share one size".into());
                }
                let mut x = Array5::zeros((chunk.len(), 1, 1, h, w));
                let mut targets = Vec::with_capacity(chunk.len() * h * w);
                for (mut dst, &i) in x.outer_iter_mut().zip(chunk) {
                    dst.slice_mut(ndarray::s![0, 0, .., ..]).assign(&samples[i].0);
                    targets.extend(Self::targets(&samples[i].1));
                }
                layers.zero_grad();
                let feats = layers.stack.forward(&x, Mode::Train).map_err(|e| e.to_string())?;
                let logits = layers.head.forward(&feats, Mode::Train).map_err(|e| e.to_string())?;
                let (_, grad) = softmax_cross_entropy(&pixel_rows(&logits), &targets, None);
                let g = layers
                    .head
                    .backward(&pixel_grid(&grad, chunk.len(), h, w))
                    .map_err(|e| e.to_string())?;
                layers.stack.backward(g).map_err(|e| e.to_string())?;
                adam.step(&mut *layers, fit.lr);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut layers = self.layers.lock().expect("segmenter lock");
        Checkpoint::capture(SEGMENTER_ARCH, &self.config, &mut *layers).save(path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let ck = Checkpoint::load(path)?;
        let config: SegmenterNetConfig = serde_json::from_value(ck.meta.config.clone())
            .map_err(|e| CheckpointError::Layout(format!("bad segmenter config: {e}")))?;
        let net = Self::new(config);
        ck.restore(&net.config, &mut *net.layers.lock().expect("segmenter lock"))?;
        Ok(net)
    }
}

impl SegmentationPredictor for SegmenterNet {
    fn segment(&self, ctx: &SliceContext<'_>) -> Result<MaskPair, String> {
        let (h, w) = ctx.slice.dim();
        let x = slice_tensor(ctx.slice, None);
        let mut layers = self.layers.lock().map_err(|e| e.to_string())?;
        let feats = layers.stack.forward(&x, Mode::Eval).map_err(|e| e.to_string())?;
        let logits = layers.head.forward(&feats, Mode::Eval).map_err(|e| e.to_string())?;
        let rows = pixel_rows(&logits);
        let classes: Vec<usize> = rows
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for c in 1..r.len() {
                    if r[c] > r[best] {
                        best = c;
                    }
                }
                best
            })
            .collect();
        let to_mask = |pred: &dyn Fn(usize) -> bool| -> Mask {
            Array2::from_shape_vec((h, w), classes.iter().map(|&c| pred(c)).collect()).expect("pixel count")
        };
        Ok(MaskPair {
            lung: to_mask(&|c| c >= 1),
            infection: to_mask(&|c| c == 2),
        })
    }
}
