//! Common interface of the severity classifiers.

use ndarray::{Array2, Array3, Axis, Dimension};

use crate::dataset::SeverityLabel;
use crate::nn::{Float, Mode, Module, NnResult};
use crate::preprocess::{TwoBranchSample, VoxelSample3D};

/// A packed, possibly labelled network input.
pub trait Sample {
    fn scan_id(&self) -> &str;
    fn label(&self) -> Option<SeverityLabel>;

    /// Copy with the depth, height and width axes reversed where `axes`
    /// is set. Severity does not depend on orientation, so this is a
    /// label-preserving augmentation.
    fn flipped(&self, axes: [bool; 3]) -> Self
    where
        Self: Sized;
}

/// Reverses the trailing three axes of `a` selected by `axes`.
fn flip_trailing<D: Dimension>(a: &ndarray::Array<f32, D>, axes: [bool; 3]) -> ndarray::Array<f32, D> {
    let mut view = a.view();
    let offset = a.ndim() - 3;
    for (i, _) in axes.iter().enumerate().filter(|(_, f)| **f) {
        view.invert_axis(Axis(offset + i));
    }
    view.as_standard_layout().into_owned()
}

impl Sample for TwoBranchSample {
    fn scan_id(&self) -> &str {
        &self.scan_id
    }
    fn label(&self) -> Option<SeverityLabel> {
        self.label
    }
    fn flipped(&self, axes: [bool; 3]) -> Self {
        let flip = |a: &Array3<f32>| flip_trailing(a, axes);
        Self {
            scan_id: self.scan_id.clone(),
            lungs: flip(&self.lungs),
            infection: flip(&self.infection),
            label: self.label,
        }
    }
}

impl Sample for VoxelSample3D {
    fn scan_id(&self) -> &str {
        &self.scan_id
    }
    fn label(&self) -> Option<SeverityLabel> {
        self.label
    }
    fn flipped(&self, axes: [bool; 3]) -> Self {
        Self {
            scan_id: self.scan_id.clone(),
            volume: flip_trailing(&self.volume, axes),
            label: self.label,
        }
    }
}

/// A network mapping a batch of samples to `(B, 4)` severity logits.
pub trait SeverityModel<F: Float>: Module<F> {
    type Input: Sample;

    /// Architecture tag written into checkpoints.
    fn arch(&self) -> &'static str;

    /// Architecture configuration as JSON; its hash guards checkpoints.
    fn config_json(&self) -> serde_json::Value;

    fn forward_batch(&mut self, batch: &[&Self::Input], mode: Mode) -> NnResult<Array2<F>>;

    /// Back-propagates `d loss / d logits` of the last training-mode
    /// forward pass into the parameter gradients.
    fn backward(&mut self, grad: &Array2<F>) -> NnResult<()>;

    /// Shapes recorded by the most recent forward pass, stage by stage.
    fn last_trace(&self) -> &[(String, Vec<usize>)];
}
