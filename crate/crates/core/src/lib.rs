//! Weakly-supervised 3D pose depth training at desk scale.
//!
//! A small regressor lifts 2D joints to per-joint depth. Fully labelled samples are
//! supervised by depth regression, 2D-only samples by a geometric loss that asks
//! bones in the same group (arms, legs, shoulders, hips) to share one
//! length-to-canonical ratio.

pub mod datagen;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod regressor;
pub mod sample;
pub mod skeleton;
pub mod study;

pub use error::{Error, Result};
pub use sample::{Evidence, PoseSample, Supervision};
pub use skeleton::{DepthVector, Pose2D, Pose3D, Skeleton};
