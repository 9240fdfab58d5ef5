//! Tooling for pose estimation in crowded scenes.
//!
//! * [`annotations`]: canonical pose model, COCO-like / JTA-like / native parsers, keypoint mapping.
//! * [`masks`]: polygon and RLE masks, cutouts and compositing.
//! * [`augment`]: occlusion augmentation by pasting object, body-part and full-body cutouts.
//! * [`crowd_metrics`]: CrowdIndex and Easy / Medium / Hard partitions.
//! * [`heatmaps`]: crop transforms and dual-branch Gaussian targets.
//! * [`occloss`]: the dual-branch loss, its gradient and a gradient checker.
//! * [`evaluator`]: OKS, greedy matching and AP per crowding level.
//! * [`synthgen`]: procedural crowd scenes with exact occlusion flags.
//! * [`cli`]: the `crowdpose-kit` command line.
//!
//! Randomness always flows through [`rng`] streams keyed by a seed, so every
//! result is reproducible and independent of thread count.

pub mod annotations;
pub mod augment;
pub mod cli;
pub mod crowd_metrics;
pub mod evaluator;
pub mod heatmaps;
pub mod masks;
pub mod occloss;
pub mod raster;
pub mod rng;
pub mod synthgen;

pub use annotations::{BBox, Dataset, ImageRecord, Keypoint, PersonInstance, Pose, PoseSchema, Visibility};
pub use raster::RasterImage;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/annotations.md")]
    mod annotations {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/crowd-index.md")]
    mod crowd_index {}
    #[doc = include_str!("../../../book/src/heatmaps.md")]
    mod heatmaps {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthetic-scenes.md")]
    mod synthetic_scenes {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
