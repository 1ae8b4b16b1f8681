//! Two-stage vertebrae centroid detection and identification for spine CT.
//!
//! The pipeline: resample scans to a 1mm grid, convert sparse centroid
//! annotations into anatomically shaped dense labels, train a 3D detection
//! U-net (vertebrae vs background) and a 2D identification U-net (continuous
//! per-pixel vertebra index), fuse both at inference by voxel-wise
//! multiplication, and aggregate the fused labels into centroid estimates by
//! vote thresholds and per-label median positions.

pub mod aggregate;
pub mod centroids;
pub mod config;
pub mod deform;
pub mod dense;
pub mod error;
pub mod evaluate;
pub mod inference;
pub mod loss;
pub mod nets;
pub mod nifti;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod sampler;
pub mod vertebra;
pub mod volume;

pub use error::{Error, Result};
