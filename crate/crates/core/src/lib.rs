//! Layout-guided LiDAR range image generation.

// NaN-rejecting validation is written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cloud;
pub mod config;
pub mod extraction;
pub mod geom;
pub mod layout;
pub mod meshing;
pub mod metrics;
pub mod raycast;
pub mod scorenet;
pub mod sensor;
