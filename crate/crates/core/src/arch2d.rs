//! Two-branch 2D severity network.
//!
//! Each branch maps a packed slice volume `(D, H, W)` through a ConvLayer
//! (3×3 convolution from D depth channels to 3 image channels, batch norm,
//! ReLU) into a 2D feature backbone. The two feature vectors are
//! concatenated and classified by a two-layer fully connected head.
//!
//! 2D tensors travel through the engine as `(N, C, 1, H, W)`.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, Array5, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dataset::NUM_CLASSES;
use crate::model::SeverityModel;
use crate::nn::{
    concat_channels, join, split_channels, Conv3d, ConvBnRelu, ConvStack, Dropout, Float, GlobalAvgPool, Linear, Mode,
    Module, NnError, NnResult, Param, Relu,
};
use crate::preprocess::TwoBranchSample;

pub const ARCH: &str = "two-branch-2d";
pub const BACKBONE_ARCH: &str = "backbone-2d";

/// Depth-to-image adapter in front of each backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerConfig {
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvLayerConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels: 3,
        }
    }
}

/// 3×3 convolution (padding 1), batch norm, ReLU; spatial size preserved.
#[derive(Debug, Clone)]
pub struct ConvLayer<F> {
    pub unit: ConvBnRelu<F>,
}

impl<F: Float> ConvLayer<F> {
    pub fn new<R: Rng + ?Sized>(config: ConvLayerConfig, rng: &mut R) -> Self {
        Self {
            unit: ConvBnRelu::new(
                config.in_channels,
                config.out_channels,
                [1, 3, 3],
                [1, 1, 1],
                [0, 1, 1],
                rng,
            ),
        }
    }

    /// `(B, D, H, W)` to `(B, 3, H, W)`.
    pub fn forward_2d(&mut self, x: &Array4<F>, mode: Mode) -> NnResult<Array4<F>> {
        let (b, d, h, w) = x.dim();
        let x5 = x.to_shape((b, d, 1, h, w)).expect("unit depth axis").to_owned();
        let y = self.forward(&x5, mode)?;
        Ok(y.index_axis_move(Axis(2), 0))
    }

    pub fn forward(&mut self, x: &Array5<F>, mode: Mode) -> NnResult<Array5<F>> {
        let expected = self.unit.conv.in_channels;
        if x.len_of(Axis(1)) != expected {
            return Err(NnError::shape(
                "conv layer",
                format!("{expected} depth channels"),
                format!("{} depth channels", x.len_of(Axis(1))),
            ));
        }
        self.unit.forward(x, mode)
    }

    pub fn backward(&mut self, grad: Array5<F>) -> NnResult<Array5<F>> {
        self.unit.backward(grad)
    }
}

impl<F: Float> Module<F> for ConvLayer<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.unit.visit_params(prefix, f);
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.unit.visit_buffers(prefix, f);
    }
}

/// Which 2D feature extractor sits behind the ConvLayer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Reduced-depth Inception-ResNet-style network; `base_width` 32 gives
    /// the 1536-dimensional reference feature.
    InceptionResnet { base_width: usize },
    /// Strided 3×3 conv stack with global average pooling; the feature is
    /// the last channel count.
    Compact { channels: Vec<usize> },
}

impl BackboneKind {
    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneKind::InceptionResnet { base_width } => 48 * base_width,
            BackboneKind::Compact { channels } => channels.last().copied().unwrap_or(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    #[serde(flatten)]
    pub kind: BackboneKind,
    /// Optional backbone checkpoint loaded into both branches.
    #[serde(default)]
    pub weights: Option<String>,
}

impl BackboneSpec {
    pub fn compact(channels: Vec<usize>) -> Self {
        Self {
            kind: BackboneKind::Compact { channels },
            weights: None,
        }
    }

    pub fn inception_resnet() -> Self {
        Self {
            kind: BackboneKind::InceptionResnet { base_width: 32 },
            weights: None,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.kind.feature_dim()
    }
}

fn cbr<F: Float, R: Rng + ?Sized>(
    c_in: usize,
    c_out: usize,
    k: [usize; 2],
    s: usize,
    p: [usize; 2],
    rng: &mut R,
) -> ConvBnRelu<F> {
    ConvBnRelu::new(c_in, c_out, [1, k[0], k[1]], [1, s, s], [0, p[0], p[1]], rng)
}

fn out_channels<F>(stack: &ConvStack<F>) -> usize {
    stack.units.last().map(|u| u.conv.out_channels).unwrap_or(0)
}

/// Parallel conv branches, concatenated, projected back to the input width
/// by a biased 1×1 convolution, scaled and added to the input, then ReLU.
#[derive(Debug, Clone)]
pub struct ResidualInception<F> {
    pub branches: Vec<ConvStack<F>>,
    pub proj: Conv3d<F>,
    pub scale: f64,
    relu: Relu,
}

impl<F: Float> ResidualInception<F> {
    fn new<R: Rng + ?Sized>(channels: usize, branches: Vec<ConvStack<F>>, scale: f64, rng: &mut R) -> Self {
        let cat = branches.iter().map(out_channels).sum();
        Self {
            branches,
            proj: Conv3d::new(cat, channels, [1, 1, 1], [1, 1, 1], [0, 0, 0], true, rng),
            scale,
            relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array5<F>, mode: Mode) -> NnResult<Array5<F>> {
        let outs = self
            .branches
            .iter_mut()
            .map(|b| b.forward(x, mode))
            .collect::<NnResult<Vec<_>>>()?;
        let mixed = self.proj.forward(&concat_channels(&outs)?, mode)?;
        let y = x + &(mixed * F::cast(self.scale));
        Ok(self.relu.forward(y, mode))
    }

    fn backward(&mut self, grad: Array5<F>) -> NnResult<Array5<F>> {
        let g = self.relu.backward(grad)?;
        let gcat = self.proj.backward(&(&g * F::cast(self.scale)))?;
        let widths: Vec<usize> = self.branches.iter().map(out_channels).collect();
        let mut dx = g;
        for (b, gb) in self.branches.iter_mut().zip(split_channels(&gcat, &widths)?) {
            dx += &b.backward(gb)?;
        }
        Ok(dx)
    }
}

impl<F: Float> Module<F> for ResidualInception<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("branch{i}")), f);
        }
        self.proj.visit_params(&join(prefix, "proj"), f);
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &format!("branch{i}")), f);
        }
    }
}

/// Strided branches whose outputs are concatenated (grid halves, width
/// grows).
#[derive(Debug, Clone)]
pub struct Reduction<F> {
    pub branches: Vec<ConvStack<F>>,
}

impl<F: Float> Reduction<F> {
    fn forward(&mut self, x: &Array5<F>, mode: Mode) -> NnResult<Array5<F>> {
        let outs = self
            .branches
            .iter_mut()
            .map(|b| b.forward(x, mode))
            .collect::<NnResult<Vec<_>>>()?;
        concat_channels(&outs)
    }

    fn backward(&mut self, grad: Array5<F>) -> NnResult<Array5<F>> {
        let widths: Vec<usize> = self.branches.iter().map(out_channels).collect();
        let mut dx: Option<Array5<F>> = None;
        for (b, gb) in self.branches.iter_mut().zip(split_channels(&grad, &widths)?) {
            let g = b.backward(gb)?;
            dx = Some(match dx {
                Some(acc) => acc + &g,
                None => g,
            });
        }
        dx.ok_or(NnError::NoCache("reduction"))
    }
}

impl<F: Float> Module<F> for Reduction<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("branch{i}")), f);
        }
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &format!("branch{i}")), f);
        }
    }
}

/// Reduced-depth Inception-ResNet-style backbone: a strided stem, one
/// residual inception block per grid size (3×3, 1×7/7×1 and 1×3/3×1
/// factorizations) with two reductions between them, a 1×1 expansion and
/// global average pooling.
#[derive(Debug, Clone)]
pub struct InceptionResNet<F> {
    pub stem: ConvStack<F>,
    pub block_a: ResidualInception<F>,
    pub reduction_a: Reduction<F>,
    pub block_b: ResidualInception<F>,
    pub reduction_b: Reduction<F>,
    pub block_c: ResidualInception<F>,
    pub expand: ConvBnRelu<F>,
    pool: GlobalAvgPool,
}

impl<F: Float> InceptionResNet<F> {
    pub fn new<R: Rng + ?Sized>(b: usize, rng: &mut R) -> Self {
        let b = b.max(2);
        let stack = |units: Vec<ConvBnRelu<F>>| ConvStack::new(units);
        let stem = stack(vec![
            cbr(3, b, [3, 3], 2, [0, 0], rng),
            cbr(b, 2 * b, [3, 3], 1, [1, 1], rng),
            cbr(2 * b, 4 * b, [3, 3], 2, [0, 0], rng),
            cbr(4 * b, 8 * b, [3, 3], 2, [0, 0], rng),
        ]);
        let c = 8 * b;
        let block_a = {
            let branches = vec![
                stack(vec![cbr(c, b, [1, 1], 1, [0, 0], rng)]),
                stack(vec![
                    cbr(c, b, [1, 1], 1, [0, 0], rng),
                    cbr(b, b, [3, 3], 1, [1, 1], rng),
                ]),
                stack(vec![
                    cbr(c, b, [1, 1], 1, [0, 0], rng),
                    cbr(b, 3 * b / 2, [3, 3], 1, [1, 1], rng),
                    cbr(3 * b / 2, 2 * b, [3, 3], 1, [1, 1], rng),
                ]),
            ];
            ResidualInception::new(c, branches, 0.17, rng)
        };
        let reduction_a = Reduction {
            branches: vec![
                stack(vec![cbr(c, c, [3, 3], 2, [0, 0], rng)]),
                stack(vec![
                    cbr(c, c / 2, [1, 1], 1, [0, 0], rng),
                    cbr(c / 2, c / 2, [3, 3], 1, [1, 1], rng),
                    cbr(c / 2, c, [3, 3], 2, [0, 0], rng),
                ]),
            ],
        };
        let c = 16 * b;
        let block_b = {
            let branches = vec![
                stack(vec![cbr(c, 3 * b, [1, 1], 1, [0, 0], rng)]),
                stack(vec![
                    cbr(c, 2 * b, [1, 1], 1, [0, 0], rng),
                    cbr(2 * b, 5 * b / 2, [1, 7], 1, [0, 3], rng),
                    cbr(5 * b / 2, 3 * b, [7, 1], 1, [3, 0], rng),
                ]),
            ];
            ResidualInception::new(c, branches, 0.1, rng)
        };
        let reduction_b = Reduction {
            branches: vec![
                stack(vec![cbr(c, c, [3, 3], 2, [0, 0], rng)]),
                stack(vec![
                    cbr(c, c / 2, [1, 1], 1, [0, 0], rng),
                    cbr(c / 2, c / 2, [3, 3], 1, [1, 1], rng),
                    cbr(c / 2, c, [3, 3], 2, [0, 0], rng),
                ]),
            ],
        };
        let c = 32 * b;
        let block_c = {
            let branches = vec![
                stack(vec![cbr(c, 3 * b, [1, 1], 1, [0, 0], rng)]),
                stack(vec![
                    cbr(c, 3 * b, [1, 1], 1, [0, 0], rng),
                    cbr(3 * b, 7 * b / 2, [1, 3], 1, [0, 1], rng),
                    cbr(7 * b / 2, 4 * b, [3, 1], 1, [1, 0], rng),
                ]),
            ];
            ResidualInception::new(c, branches, 0.2, rng)
        };
        let expand = cbr(c, 48 * b, [1, 1], 1, [0, 0], rng);
        Self {
            stem,
            block_a,
            reduction_a,
            block_b,
            reduction_b,
            block_c,
            expand,
            pool: GlobalAvgPool::new(),
        }
    }

    fn forward(&mut self, x: &Array5<F>, mode: Mode) -> NnResult<Array2<F>> {
        let shape: [usize; 5] = x.shape().try_into().expect("5D input");
        let mut reduced = self.stem.output_shape(shape);
        for branch in [&self.reduction_a.branches[0], &self.reduction_b.branches[0]] {
            reduced = branch.output_shape(reduced);
        }
        if reduced[3] == 0 || reduced[4] == 0 {
            return Err(NnError::shape(
                "inception-resnet backbone",
                "an image large enough for three stem reductions and two grid reductions",
                format!("{}x{}", shape[3], shape[4]),
            ));
        }
        let y = self.stem.forward(x, mode)?;
        let y = self.block_a.forward(&y, mode)?;
        let y = self.reduction_a.forward(&y, mode)?;
        let y = self.block_b.forward(&y, mode)?;
        let y = self.reduction_b.forward(&y, mode)?;
        let y = self.block_c.forward(&y, mode)?;
        let y = self.expand.forward(&y, mode)?;
        Ok(self.pool.forward(&y, mode))
    }

    fn backward(&mut self, grad: &Array2<F>) -> NnResult<Array5<F>> {
        let g = self.pool.backward(grad)?;
        let g = self.expand.backward(g)?;
        let g = self.block_c.backward(g)?;
        let g = self.reduction_b.backward(g)?;
        let g = self.block_b.backward(g)?;
        let g = self.reduction_a.backward(g)?;
        let g = self.block_a.backward(g)?;
        self.stem.backward(g)
    }
}

impl<F: Float> Module<F> for InceptionResNet<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        self.block_a.visit_params(&join(prefix, "block_a"), f);
        self.reduction_a.visit_params(&join(prefix, "reduction_a"), f);
        self.block_b.visit_params(&join(prefix, "block_b"), f);
        self.reduction_b.visit_params(&join(prefix, "reduction_b"), f);
        self.block_c.visit_params(&join(prefix, "block_c"), f);
        self.expand.visit_params(&join(prefix, "expand"), f);
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.stem.visit_buffers(&join(prefix, "stem"), f);
        self.block_a.visit_buffers(&join(prefix, "block_a"), f);
        self.reduction_a.visit_buffers(&join(prefix, "reduction_a"), f);
        self.block_b.visit_buffers(&join(prefix, "block_b"), f);
        self.reduction_b.visit_buffers(&join(prefix, "reduction_b"), f);
        self.block_c.visit_buffers(&join(prefix, "block_c"), f);
        self.expand.visit_buffers(&join(prefix, "expand"), f);
    }
}

/// A 2D feature extractor: `(N, 3, 1, H, W)` to `(N, feature_dim)`.
#[derive(Debug, Clone)]
pub enum Backbone<F> {
    InceptionResnet(Box<InceptionResNet<F>>),
    Compact { stack: ConvStack<F>, pool: GlobalAvgPool },
}

impl<F: Float> Backbone<F> {
    pub fn new<R: Rng + ?Sized>(kind: &BackboneKind, rng: &mut R) -> Self {
        match kind {
            BackboneKind::InceptionResnet { base_width } => {
                Backbone::InceptionResnet(Box::new(InceptionResNet::new(*base_width, rng)))
            }
            BackboneKind::Compact { channels } => {
                let mut c_in = 3;
                let units = channels
                    .iter()
                    .map(|&c| {
                        let u = cbr(c_in, c, [3, 3], 2, [1, 1], rng);
                        c_in = c;
                        u
                    })
                    .collect();
                Backbone::Compact {
                    stack: ConvStack::new(units),
                    pool: GlobalAvgPool::new(),
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Array5<F>, mode: Mode) -> NnResult<Array2<F>> {
        match self {
            Backbone::InceptionResnet(net) => net.forward(x, mode),
            Backbone::Compact { stack, pool } => {
                let y = stack.forward(x, mode)?;
                Ok(pool.forward(&y, mode))
            }
        }
    }

    pub fn backward(&mut self, grad: &Array2<F>) -> NnResult<Array5<F>> {
        match self {
            Backbone::InceptionResnet(net) => net.backward(grad),
            Backbone::Compact { stack, pool } => {
                let g = pool.backward(grad)?;
                stack.backward(g)
            }
        }
    }
}

impl<F: Float> Module<F> for Backbone<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        match self {
            Backbone::InceptionResnet(net) => net.visit_params(prefix, f),
            Backbone::Compact { stack, .. } => stack.visit_params(prefix, f),
        }
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        match self {
            Backbone::InceptionResnet(net) => net.visit_buffers(prefix, f),
            Backbone::Compact { stack, .. } => stack.visit_buffers(prefix, f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoBranchConfig {
    pub lung_depth: usize,
    pub infection_depth: usize,
    /// Required square input size; `None` accepts any size the backbone
    /// can reduce.
    pub image_size: Option<usize>,
    pub backbone: BackboneSpec,
    pub hidden: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TwoBranchConfig {
    fn default() -> Self {
        Self {
            lung_depth: 32,
            infection_depth: 16,
            image_size: Some(299),
            backbone: BackboneSpec::inception_resnet(),
            hidden: 512,
            dropout: 0.3,
            seed: 0,
        }
    }
}

impl TwoBranchConfig {
    /// Desk-scale variant: compact backbone with 64-dimensional features.
    pub fn compact() -> Self {
        Self {
            backbone: BackboneSpec::compact(vec![16, 32, 64]),
            ..Self::default()
        }
    }
}

/// One input path: ConvLayer followed by a backbone.
#[derive(Debug, Clone)]
pub struct Branch<F> {
    pub conv_layer: ConvLayer<F>,
    pub backbone: Backbone<F>,
}

impl<F: Float> Branch<F> {
    fn forward(
        &mut self,
        x: &Array5<F>,
        mode: Mode,
        trace: &mut Vec<(String, Vec<usize>)>,
        name: &str,
    ) -> NnResult<Array2<F>> {
        let y = self.conv_layer.forward(x, mode).map_err(|e| e.in_stage(name))?;
        let (b, c, _, h, w) = y.dim();
        trace.push((format!("{name}/conv_layer"), vec![b, c, h, w]));
        let feats = self
            .backbone
            .forward(&y, mode)
            .map_err(|e| e.in_stage(&format!("{name}/backbone")))?;
        trace.push((format!("{name}/features"), feats.shape().to_vec()));
        Ok(feats)
    }

    fn backward(&mut self, grad: &Array2<F>) -> NnResult<()> {
        let g = self.backbone.backward(grad)?;
        self.conv_layer.backward(g)?;
        Ok(())
    }
}

impl<F: Float> Module<F> for Branch<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv_layer.visit_params(&join(prefix, "conv_layer"), f);
        self.backbone.visit_params(&join(prefix, "backbone"), f);
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.conv_layer.visit_buffers(&join(prefix, "conv_layer"), f);
        self.backbone.visit_buffers(&join(prefix, "backbone"), f);
    }
}

/// FC → ReLU → dropout → FC.
#[derive(Debug, Clone)]
pub struct Head<F> {
    pub fc1: Linear<F>,
    relu: Relu,
    dropout: Dropout,
    pub fc2: Linear<F>,
}

impl<F: Float> Head<F> {
    fn forward(&mut self, x: &Array2<F>, mode: Mode) -> NnResult<Array2<F>> {
        let h = self.fc1.forward(x, mode)?;
        let h = self.relu.forward(h, mode);
        let h = self.dropout.forward(h, mode);
        self.fc2.forward(&h, mode)
    }

    fn backward(&mut self, grad: &Array2<F>) -> NnResult<Array2<F>> {
        let g = self.fc2.backward(grad)?;
        let g = self.dropout.backward(g)?;
        let g = self.relu.backward(g)?;
        self.fc1.backward(&g)
    }
}

impl<F: Float> Module<F> for Head<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct TwoBranchModel<F> {
    pub config: TwoBranchConfig,
    pub lung_branch: Branch<F>,
    pub infection_branch: Branch<F>,
    pub head: Head<F>,
    trace: Vec<(String, Vec<usize>)>,
}

/// `B` volumes `(D, H, W)` as an `(B, D, 1, H, W)` tensor.
fn batch_volumes<F: Float>(volumes: &[&Array3<f32>]) -> Array5<F> {
    let (d, h, w) = volumes[0].dim();
    let mut x = Array5::<F>::zeros((volumes.len(), d, 1, h, w));
    for (mut dst, v) in x.outer_iter_mut().zip(volumes) {
        dst.index_axis_mut(Axis(1), 0)
            .zip_mut_with(*v, |o, &s| *o = F::cast(s as f64));
    }
    x
}

impl<F: Float> TwoBranchModel<F> {
    pub fn new(config: TwoBranchConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fd = config.backbone.feature_dim();
        let mut branch = |depth: usize| {
            let mut conv_layer = ConvLayer::new(ConvLayerConfig::new(depth), &mut rng);
            conv_layer.unit.conv.input_grad = false;
            Branch {
                conv_layer,
                backbone: Backbone::new(&config.backbone.kind, &mut rng),
            }
        };
        let lung_branch = branch(config.lung_depth);
        let infection_branch = branch(config.infection_depth);
        let head = Head {
            fc1: Linear::new(2 * fd, config.hidden, &mut rng),
            relu: Relu::new(),
            dropout: Dropout::new(config.dropout, config.seed ^ 0xd20f),
            fc2: Linear::new(config.hidden, NUM_CLASSES, &mut rng),
        };
        Self {
            config,
            lung_branch,
            infection_branch,
            head,
            trace: Vec::new(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.config.backbone.feature_dim()
    }

    /// Loads the configured backbone checkpoint, if any, into both branches.
    pub fn load_backbone_weights(&mut self) -> Result<(), CheckpointError> {
        let Some(path) = self.config.backbone.weights.clone() else {
            return Ok(());
        };
        let ck = Checkpoint::load(Path::new(&path))?;
        ck.restore(&self.config.backbone.kind, &mut self.lung_branch.backbone)?;
        ck.restore(&self.config.backbone.kind, &mut self.infection_branch.backbone)
    }

    /// Snapshot of one backbone in the format [`Self::load_backbone_weights`] reads.
    pub fn backbone_checkpoint(&mut self) -> Checkpoint {
        Checkpoint::capture(
            BACKBONE_ARCH,
            &self.config.backbone.kind,
            &mut self.lung_branch.backbone,
        )
    }

    fn check_inputs(&self, batch: &[&TwoBranchSample]) -> NnResult<()> {
        let Some(first) = batch.first() else {
            return Err(NnError::shape("two-branch input", "a non-empty batch", "0 samples"));
        };
        let (_, h, w) = first.lungs.dim();
        let (hh, ww) = match self.config.image_size {
            Some(s) => (s, s),
            None => (h, w),
        };
        for s in batch {
            let want_l = (self.config.lung_depth, hh, ww);
            let want_i = (self.config.infection_depth, hh, ww);
            if s.lungs.dim() != want_l {
                return Err(NnError::shape(
                    format!("two-branch input '{}' lungs", s.scan_id),
                    format!("{want_l:?}"),
                    format!("{:?}", s.lungs.dim()),
                ));
            }
            if s.infection.dim() != want_i {
                return Err(NnError::shape(
                    format!("two-branch input '{}' infection", s.scan_id),
                    format!("{want_i:?}"),
                    format!("{:?}", s.infection.dim()),
                ));
            }
        }
        Ok(())
    }

    /// Forward pass on raw `(B, D, 1, H, W)` tensors.
    pub fn forward_tensors(&mut self, lungs: &Array5<F>, infection: &Array5<F>, mode: Mode) -> NnResult<Array2<F>> {
        let mut trace = Vec::new();
        let strip = |x: &Array5<F>| {
            let s = x.shape();
            vec![s[0], s[1], s[3], s[4]]
        };
        trace.push(("lungs/input".to_string(), strip(lungs)));
        trace.push(("infection/input".to_string(), strip(infection)));
        let fl = self.lung_branch.forward(lungs, mode, &mut trace, "lungs")?;
        let fi = self
            .infection_branch
            .forward(infection, mode, &mut trace, "infection")?;
        let feats = ndarray::concatenate(Axis(1), &[fl.view(), fi.view()]).map_err(|_| {
            NnError::shape(
                "feature concat",
                "equal batch sizes",
                format!("{} vs {}", fl.nrows(), fi.nrows()),
            )
        })?;
        trace.push(("concat".to_string(), feats.shape().to_vec()));
        let logits = self.head.forward(&feats, mode).map_err(|e| e.in_stage("head"))?;
        trace.push(("logits".to_string(), logits.shape().to_vec()));
        self.trace = trace;
        Ok(logits)
    }
}

impl<F: Float> Module<F> for TwoBranchModel<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.lung_branch.visit_params(&join(prefix, "lungs"), f);
        self.infection_branch.visit_params(&join(prefix, "infection"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.lung_branch.visit_buffers(&join(prefix, "lungs"), f);
        self.infection_branch.visit_buffers(&join(prefix, "infection"), f);
    }
}

impl<F: Float> SeverityModel<F> for TwoBranchModel<F> {
    type Input = TwoBranchSample;

    fn arch(&self) -> &'static str {
        ARCH
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    fn forward_batch(&mut self, batch: &[&TwoBranchSample], mode: Mode) -> NnResult<Array2<F>> {
        self.check_inputs(batch)?;
        let lungs: Vec<&Array3<f32>> = batch.iter().map(|s| &s.lungs).collect();
        let infection: Vec<&Array3<f32>> = batch.iter().map(|s| &s.infection).collect();
        self.forward_tensors(&batch_volumes(&lungs), &batch_volumes(&infection), mode)
    }

    fn backward(&mut self, grad: &Array2<F>) -> NnResult<()> {
        let g = self.head.backward(grad)?;
        let fd = self.feature_dim();
        let gl = g.slice(ndarray::s![.., ..fd]).to_owned();
        let gi = g.slice(ndarray::s![.., fd..]).to_owned();
        self.lung_branch.backward(&gl)?;
        self.infection_branch.backward(&gi)
    }

    fn last_trace(&self) -> &[(String, Vec<usize>)] {
        &self.trace
    }
}
