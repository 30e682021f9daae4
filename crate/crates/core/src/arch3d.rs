//! Hybrid-DeCoVNet: a 3D residual network over two-channel voxel volumes.
//!
//! Stem (5×7×7 convolution, 2 → 16 channels, spatial stride 2), four residual
//! layers (64, 128, 256, 512 channels, each halving every axis), a
//! classification head (adaptive max pooling to 2×4×4, three 3×3×3
//! convolutions, global max pooling) and a single linear decision layer.

use ndarray::{Array2, Array5, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::NUM_CLASSES;
use crate::model::SeverityModel;
use crate::nn::{
    join, AdaptiveMaxPool3d, BatchNorm3d, Conv3d, ConvBnRelu, ConvStack, Float, Linear, Mode, Module, NnError,
    NnResult, Param, Relu,
};
use crate::preprocess::VoxelSample3D;

pub const ARCH: &str = "hybrid-decovnet-3d";

/// Depth must be a multiple of this when the input depth is variable.
pub const DEPTH_MULTIPLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(D, H, W)`.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for StemConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            out_channels: 16,
            kernel: [5, 7, 7],
            stride: [1, 2, 2],
            padding: [2, 3, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridDeCoVNetConfig {
    pub stem: StemConfig,
    /// Output channels of the four residual layers.
    pub channels: Vec<usize>,
    pub blocks_per_layer: usize,
    pub head_pool: [usize; 3],
    pub head_channels: Vec<usize>,
    /// Fixed `(D, H, W)` input, or `None` for variable depth and size.
    pub input_dims: Option<[usize; 3]>,
    pub seed: u64,
}

impl Default for HybridDeCoVNetConfig {
    fn default() -> Self {
        Self {
            stem: StemConfig::default(),
            channels: vec![64, 128, 256, 512],
            blocks_per_layer: 1,
            head_pool: [2, 4, 4],
            head_channels: vec![256, 128, 64],
            input_dims: Some([64, 224, 224]),
            seed: 0,
        }
    }
}

impl HybridDeCoVNetConfig {
    pub fn feature_dim(&self) -> usize {
        self.head_channels
            .last()
            .or(self.channels.last())
            .copied()
            .unwrap_or(self.stem.out_channels)
    }
}

/// Two 3×3×3 conv + BN stages with a shortcut; ReLU after the sum.
#[derive(Debug, Clone)]
pub struct ResBlock<F> {
    pub conv1: ConvBnRelu<F>,
    pub conv2: Conv3d<F>,
    pub bn2: BatchNorm3d<F>,
    /// `None` is the identity shortcut.
    pub shortcut: Option<(Conv3d<F>, BatchNorm3d<F>)>,
    relu: Relu,
}

impl<F: Float> ResBlock<F> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: [usize; 3], rng: &mut R) -> Self {
        let shortcut = (c_in != c_out || stride != [1, 1, 1]).then(|| {
            (
                Conv3d::new(c_in, c_out, [1, 1, 1], stride, [0, 0, 0], false, rng),
                BatchNorm3d::new(c_out),
            )
        });
        Self {
            conv1: ConvBnRelu::new(c_in, c_out, [3, 3, 3], stride, [1, 1, 1], rng),
            conv2: Conv3d::new(c_out, c_out, [3, 3, 3], [1, 1, 1], [1, 1, 1], false, rng),
            bn2: BatchNorm3d::new(c_out),
            shortcut,
            relu: Relu::new(),
        }
    }

    pub fn output_shape(&self, input: [usize; 5]) -> [usize; 5] {
        self.conv2.output_shape(self.conv1.output_shape(input))
    }

    pub fn forward(&mut self, x: &Array5<F>, mode: Mode) -> NnResult<Array5<F>> {
        let y = self.conv1.forward(x, mode)?;
        let y = self.conv2.forward(&y, mode)?;
        let mut y = self.bn2.forward(&y, mode);
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(x, mode)?;
                y += &bn.forward(&s, mode);
            }
            None => y += x,
        }
        Ok(self.relu.forward(y, mode))
    }

    pub fn backward(&mut self, grad: Array5<F>) -> NnResult<Array5<F>> {
        let g = self.relu.backward(grad)?;
        let gr = self.bn2.backward(&g)?;
        let gr = self.conv2.backward(&gr)?;
        let mut dx = self.conv1.backward(gr)?;
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let gs = bn.backward(&g)?;
                dx += &conv.backward(&gs)?;
            }
            None => dx += &g,
        }
        Ok(dx)
    }
}

impl<F: Float> Module<F> for ResBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_params(&join(prefix, "shortcut.conv"), f);
            bn.visit_params(&join(prefix, "shortcut.bn"), f);
        }
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.conv1.visit_buffers(&join(prefix, "conv1"), f);
        self.bn2.visit_buffers(&join(prefix, "bn2"), f);
        if let Some((_, bn)) = &mut self.shortcut {
            bn.visit_buffers(&join(prefix, "shortcut.bn"), f);
        }
    }
}

/// A sequence of residual blocks; the first one strides.
#[derive(Debug, Clone)]
pub struct ResLayer<F> {
    pub blocks: Vec<ResBlock<F>>,
}

impl<F: Float> ResLayer<F> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, blocks: usize, rng: &mut R) -> Self {
        let blocks = (0..blocks.max(1))
            .map(|i| {
                if i == 0 {
                    ResBlock::new(c_in, c_out, [2, 2, 2], rng)
                } else {
                    ResBlock::new(c_out, c_out, [1, 1, 1], rng)
                }
            })
            .collect();
        Self { blocks }
    }

    pub fn output_shape(&self, mut shape: [usize; 5]) -> [usize; 5] {
        for b in &self.blocks {
            shape = b.output_shape(shape);
        }
        shape
    }

    fn forward(&mut self, x: &Array5<F>, mode: Mode) -> NnResult<Array5<F>> {
        let mut blocks = self.blocks.iter_mut();
        let mut y = blocks.next().expect("at least one block").forward(x, mode)?;
        for b in blocks {
            y = b.forward(&y, mode)?;
        }
        Ok(y)
    }

    fn backward(&mut self, grad: Array5<F>) -> NnResult<Array5<F>> {
        let mut g = grad;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(g)?;
        }
        Ok(g)
    }
}

impl<F: Float> Module<F> for ResLayer<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &i.to_string()), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassificationHead<F> {
    pub adaptive_pool: AdaptiveMaxPool3d,
    pub convs: ConvStack<F>,
    pub global_pool: AdaptiveMaxPool3d,
}

#[derive(Debug, Clone)]
pub struct HybridDeCoVNet<F> {
    pub config: HybridDeCoVNetConfig,
    pub stem: ConvBnRelu<F>,
    pub layers: Vec<ResLayer<F>>,
    pub head: ClassificationHead<F>,
    pub decision: Linear<F>,
    trace: Vec<(String, Vec<usize>)>,
}

impl<F: Float> HybridDeCoVNet<F> {
    pub fn new(config: HybridDeCoVNetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = &config.stem;
        let mut stem = ConvBnRelu::new(s.in_channels, s.out_channels, s.kernel, s.stride, s.padding, &mut rng);
        stem.conv.input_grad = false;
        let mut c_in = s.out_channels;
        let layers = config
            .channels
            .iter()
            .map(|&c| {
                let layer = ResLayer::new(c_in, c, config.blocks_per_layer, &mut rng);
                c_in = c;
                layer
            })
            .collect();
        let convs = config
            .head_channels
            .iter()
            .map(|&c| {
                let unit = ConvBnRelu::new(c_in, c, [3, 3, 3], [1, 1, 1], [1, 1, 1], &mut rng);
                c_in = c;
                unit
            })
            .collect();
        let head = ClassificationHead {
            adaptive_pool: AdaptiveMaxPool3d::new(config.head_pool),
            convs: ConvStack::new(convs),
            global_pool: AdaptiveMaxPool3d::global(),
        };
        let decision = Linear::new(c_in, NUM_CLASSES, &mut rng);
        Self {
            config,
            stem,
            layers,
            head,
            decision,
            trace: Vec::new(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> NnResult<()> {
        let c = self.config.stem.in_channels;
        if shape.len() != 5 || shape[1] != c {
            return Err(NnError::shape(
                "stem",
                format!("(B, {c}, D, H, W)"),
                format!("{shape:?}"),
            ));
        }
        match self.config.input_dims {
            Some(dims) if shape[2..] != dims => Err(NnError::shape(
                "stem",
                format!("(B, {c}, {}, {}, {})", dims[0], dims[1], dims[2]),
                format!("{shape:?}"),
            )),
            None if shape[2] < DEPTH_MULTIPLE || shape[2] % DEPTH_MULTIPLE != 0 => Err(NnError::shape(
                "stem",
                format!("depth >= {DEPTH_MULTIPLE} and divisible by {DEPTH_MULTIPLE}"),
                format!("depth {}", shape[2]),
            )),
            _ => Ok(()),
        }
    }

    /// Forward pass on a raw `(B, C, D, H, W)` tensor.
    pub fn forward_tensor(&mut self, x: &Array5<F>, mode: Mode) -> NnResult<Array2<F>> {
        self.check_input(x.shape())?;
        let mut trace = vec![("input".to_string(), x.shape().to_vec())];
        let mut y = self.stem.forward(x, mode).map_err(|e| e.in_stage("stem"))?;
        trace.push(("stem".to_string(), y.shape().to_vec()));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let name = format!("layer{}", i + 1);
            let shape: [usize; 5] = y.shape().try_into().expect("5D");
            if layer.output_shape(shape)[2..].contains(&0) {
                return Err(NnError::shape(
                    name,
                    "an input that stays non-empty after striding",
                    format!("{shape:?}"),
                ));
            }
            y = layer.forward(&y, mode).map_err(|e| e.in_stage(&name))?;
            trace.push((name, y.shape().to_vec()));
        }
        let y = self
            .head
            .adaptive_pool
            .forward(&y, mode)
            .map_err(|e| e.in_stage("head"))?;
        trace.push(("head/adaptive_pool".to_string(), y.shape().to_vec()));
        let y = self.head.convs.forward(&y, mode).map_err(|e| e.in_stage("head"))?;
        trace.push(("head/convs".to_string(), y.shape().to_vec()));
        let y = self
            .head
            .global_pool
            .forward(&y, mode)
            .map_err(|e| e.in_stage("head"))?;
        let (b, c, ..) = y.dim();
        let feats = y.into_shape_with_order((b, c)).expect("1×1×1 grid");
        trace.push(("head/features".to_string(), feats.shape().to_vec()));
        let logits = self
            .decision
            .forward(&feats, mode)
            .map_err(|e| e.in_stage("decision"))?;
        trace.push(("logits".to_string(), logits.shape().to_vec()));
        self.trace = trace;
        Ok(logits)
    }
}

impl<F: Float> Module<F> for HybridDeCoVNet<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &format!("layer{}", i + 1)), f);
        }
        self.head.convs.visit_params(&join(prefix, "head"), f);
        self.decision.visit_params(&join(prefix, "decision"), f);
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.stem.visit_buffers(&join(prefix, "stem"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_buffers(&join(prefix, &format!("layer{}", i + 1)), f);
        }
        self.head.convs.visit_buffers(&join(prefix, "head"), f);
    }
}

impl<F: Float> SeverityModel<F> for HybridDeCoVNet<F> {
    type Input = VoxelSample3D;

    fn arch(&self) -> &'static str {
        ARCH
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    fn forward_batch(&mut self, batch: &[&VoxelSample3D], mode: Mode) -> NnResult<Array2<F>> {
        let Some(first) = batch.first() else {
            return Err(NnError::shape("stem", "a non-empty batch", "0 samples"));
        };
        let (c, d, h, w) = first.volume.dim();
        if let Some(bad) = batch.iter().find(|s| s.volume.dim() != (c, d, h, w)) {
            return Err(NnError::shape(
                format!("stem input '{}'", bad.scan_id),
                format!("{:?}", (c, d, h, w)),
                format!("{:?}", bad.volume.dim()),
            ));
        }
        let mut x = Array5::<F>::zeros((batch.len(), c, d, h, w));
        for (mut dst, s) in x.outer_iter_mut().zip(batch) {
            dst.zip_mut_with(&s.volume, |o, &v| *o = F::cast(v as f64));
        }
        self.forward_tensor(&x, mode)
    }

    fn backward(&mut self, grad: &Array2<F>) -> NnResult<()> {
        let g = self.decision.backward(grad)?;
        let (b, c) = g.dim();
        let g = g.into_shape_with_order((b, c, 1, 1, 1)).expect("feature grid");
        let g = self.head.global_pool.backward(&g)?;
        let g = self.head.convs.backward(g)?;
        let mut g = self.head.adaptive_pool.backward(&g)?;
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(g)?;
        }
        self.stem.backward(g)?;
        Ok(())
    }

    fn last_trace(&self) -> &[(String, Vec<usize>)] {
        &self.trace
    }
}

/// Removes the batch axis from a trace entry; handy for comparisons.
pub fn trace_without_batch(trace: &[(String, Vec<usize>)]) -> Vec<(String, Vec<usize>)> {
    trace
        .iter()
        .map(|(n, s)| (n.clone(), s.iter().skip(1).copied().collect()))
        .collect()
}
