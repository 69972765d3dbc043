//! Distance-binned density estimation for UAV swarms.
//!
//! The pipeline in this crate goes from synthetic 3-D swarm scenes to a
//! trained image regressor and its evaluation:
//!
//! * [`geometry`]: pinhole camera, poses, projected bounding boxes, and the
//!   image grid that partitions a frame into output cells.
//! * [`labeling`]: per-cell histograms counting UAVs over camera distance,
//!   plus the partial and full Gaussian smoothing applied to them.
//! * [`scenegen`]: seeded scene sampling, silhouette rendering, biased
//!   cropping, count balancing, and the on-disk dataset format.
//! * [`regressor`]: the convolutional histogram regressor with hand-written
//!   forward/backward passes, ADAM training, and checkpointing.
//! * [`baselines`]: the ideal-detector bounding-box baseline and its
//!   distance-bias analysis.
//! * [`metrics`]: per-bin relative error aggregation and CSV reports.
//!
//! Everything is deterministic under a fixed seed: scene sampling, rendering,
//! weight initialization, batch shuffling, and all file outputs.

pub mod baselines;
pub mod geometry;
pub mod labeling;
pub mod metrics;
pub mod regressor;
pub mod scenegen;

pub use geometry::{CameraIntrinsics, GridSpec, PixelBox, TargetModel, UavPose};
pub use labeling::{LabelGrid, LabelMode, LabelSpec};
