//! Supervision signals from point annotations for density-based counting.
//!
//! Point annotations are turned into Gaussian density maps, foreground masks,
//! occlusion maps and levels, global-density labels and copy-paste occlusion
//! augmentations. The [`loss`] module holds the training objectives with
//! analytic gradients (including a log-domain Sinkhorn solver), [`toynet`] a
//! miniature convolutional counter with a two-stage distillation trainer, and
//! [`metrics`] the evaluation harness.

pub mod annot;
pub mod cli;
pub mod density;
pub mod focus;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod occsim;
pub mod raster;
pub mod rng;
pub mod toynet;

pub use annot::{ObjectDisc, Point, PointSet, SigmaPolicy};
pub use density::DensityMap;
pub use grid::Grid;
pub use raster::{FloatMap, GrayImage};
