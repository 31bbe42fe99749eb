//! Semi-supervised 2D pose estimation with adaptive keypoint masking and
//! dual-branch (masking + mixup) strong augmentation in a shared-weight
//! teacher-student setup.

pub mod data;
pub mod error;
pub mod geometry;
pub mod heatmap;
pub mod losses;
pub mod metrics;
pub mod masking;
pub mod mixup;
pub mod nn;
pub mod plot;
pub mod train;

pub use error::{Error, Result};
