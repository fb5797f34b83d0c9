//! Per-voxel adaptive thresholding of 3D volumes.
//!
//! A global threshold `theta_g` is corrected per voxel by a linear function of
//! local shape features, `theta(U) = theta_g + beta . F(U)`. The weights are
//! learned from a few seed voxels: each seed window gets a minimum cross
//! entropy threshold as target, and `beta` solves a constrained elastic-net
//! regression that keeps the thresholds of all seed windows inside `[0, W]`.

pub mod features;
pub mod mce;
pub mod model;
pub mod segmenter;
pub mod solver;
pub mod synthetic;
pub mod tuning;
pub mod volume;

pub use features::{FeatureConfig, FeatureKind};
pub use model::FaithModel;
pub use segmenter::{
    segment, segment_to_file, train_from_seeds, SeedSet, SegmentControl, SegmentOptions,
    SegmentStats, ThresholdRule, TrainingConfig, TrainingOutcome,
};
pub use solver::{solve_faith, Polytope, SolverParams};
pub use tuning::{CVReport, CvSettings, HyperGrid};
pub use volume::{load_volume, Dtype, Volume, VolumeMeta};
