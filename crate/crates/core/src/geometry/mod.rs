//! Point-cloud kernels: sampling, neighborhoods, chamfer distance, rigid
//! transforms, PCA bounding boxes and pose recovery.
//!
//! Everything here is a pure function of its inputs.

mod chamfer;
mod kdtree;
pub mod linalg;
mod obb;
pub mod ply;
mod rotation;
mod sampling;

pub use chamfer::{chamfer, chamfer_mean, directed_chamfer};
pub use kdtree::KdTree;
pub use obb::{
    align_principal_axes, estimate_pose, filter_outliers, pca_frame, proper_axis_alignments, Alignment, ObbFrame,
};
pub use rotation::{random_rotation, Pose, Rotation};
pub use sampling::{farthest_point_sample, farthest_point_sample_from, knn_indices, NeighborTable};

use linalg::Vec3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("requested {requested} points from a cloud of {available}")]
    TooMany { requested: usize, available: usize },
    #[error("matrix is not a proper rotation (orthonormality error {ortho:e}, det {det})")]
    NotRotation { ortho: f64, det: f64 },
    #[error("segment is empty: part unused")]
    PartUnused,
}

/// Ordered, non-empty list of finite 3D points. Order is meaningful: labels
/// index into it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec3>", into = "Vec<Vec3>")]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite(i));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with collections.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            c = linalg::add(c, *p);
        }
        linalg::scale(c, 1.0 / self.points.len() as f64)
    }

    /// Points selected by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, GeometryError> {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    /// Translates the cloud so its centroid sits at the origin.
    pub fn zero_center(&self) -> (Self, Vec3) {
        let c = self.centroid();
        let points = self.points.iter().map(|p| linalg::sub(*p, c)).collect();
        (Self { points }, c)
    }

    pub fn transformed(&self, pose: &Pose) -> Self {
        Self { points: self.points.iter().map(|p| pose.apply(*p)).collect() }
    }

    pub fn rotated(&self, r: &Rotation) -> Self {
        Self { points: self.points.iter().map(|p| r.apply(*p)).collect() }
    }

    /// Concatenation of several clouds, in order.
    pub fn union<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> Result<Self, GeometryError> {
        let points: Vec<Vec3> = clouds.into_iter().flat_map(|c| c.points.iter().copied()).collect();
        Self::new(points)
    }

    /// Axis-aligned bounding box as (min corner, max corner).
    pub fn aabb(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Full side lengths of the axis-aligned bounding box.
    pub fn aabb_extents(&self) -> Vec3 {
        let (lo, hi) = self.aabb();
        linalg::sub(hi, lo)
    }
}

impl TryFrom<Vec<Vec3>> for PointCloud {
    type Error = GeometryError;
    fn try_from(points: Vec<Vec3>) -> Result<Self, Self::Error> {
        Self::new(points)
    }
}

impl From<PointCloud> for Vec<Vec3> {
    fn from(c: PointCloud) -> Self {
        c.points
    }
}

#[cfg(test)]
mod tests;
