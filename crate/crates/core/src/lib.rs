//! Part-assembly planning by target segmentation.
//!
//! A target point cloud is segmented into one region per input part by a
//! transformer ([`model`]); each part is then placed by aligning oriented
//! bounding boxes ([`geometry::estimate_pose`]). [`datagen`] builds
//! procedural assemblies, [`training`] fits the model with a loss that is
//! invariant to relabeling interchangeable parts, and [`eval`] scores the
//! resulting assemblies.

pub mod assignment;
pub mod datagen;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod tensor;
pub mod training;
