//! COVID-19 severity prediction from chest CT volumes.
//!
//! The crate covers the whole path from raw slice stacks to severity
//! reports: slice filtering and lung/infection segmentation
//! ([`preprocess`]), a two-branch 2D network over packed slice volumes
//! ([`arch2d`]), a 3D residual network over two-channel voxel volumes
//! ([`arch3d`]), the training protocol ([`training`]) and macro-F1
//! evaluation with probability-averaging ensembles ([`evaluate`]).

pub mod arch2d;
pub mod arch3d;
pub mod checkpoint;
pub mod dataset;
pub mod evaluate;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod training;
pub mod volume;
