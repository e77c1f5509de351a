//! PCA-based oriented bounding boxes and pose recovery from them.

use serde::{Deserialize, Serialize};

use super::linalg::{self, Mat3, Vec3};
use super::{chamfer, GeometryError, PointCloud, Pose, Rotation};

/// Oriented bounding box: centroid, principal axes (matrix columns) and
/// half-lengths along them.
///
/// Axes follow descending variance. For boxes and other convex solids of
/// distinct side lengths the extents then come out descending too, but a
/// sparse or irregular cloud can have its widest reach along a lower-variance
/// axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObbFrame {
    pub center: Vec3,
    pub axes: Rotation,
    pub extents: Vec3,
}

impl ObbFrame {
    /// Pose taking box-local coordinates to world coordinates.
    pub fn to_world(&self) -> Pose {
        Pose::new(self.axes, self.center)
    }
}

fn covariance(points: &[Vec3], c: Vec3) -> Mat3 {
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        let d = linalg::sub(*p, c);
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    let n = points.len() as f64;
    cov.map(|row| row.map(|v| v / n))
}

/// Index of the largest-magnitude component (first one on ties).
fn dominant(v: Vec3) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if v[k].abs() > v[best].abs() {
            best = k;
        }
    }
    best
}

/// Principal-axis frame of a cloud.
///
/// Axes are covariance eigenvectors by descending eigenvalue, each flipped
/// so its largest-magnitude component is positive; the third axis is then
/// replaced by the cross product of the first two. Rank-deficient
/// covariances still yield the orthonormal basis the Jacobi sweep returns,
/// so any non-empty cloud has a frame.
pub fn pca_frame(cloud: &PointCloud) -> ObbFrame {
    let center = cloud.centroid();
    let cov = covariance(cloud.points(), center);
    let (vals, vecs) = linalg::symmetric_eigen(&cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut axes: Vec<Vec3> = order
        .iter()
        .map(|&j| {
            let v = linalg::normalize(linalg::column(&vecs, j));
            if v[dominant(v)] < 0.0 {
                linalg::scale(v, -1.0)
            } else {
                v
            }
        })
        .collect();
    axes[2] = linalg::normalize(linalg::cross(axes[0], axes[1]));
    let axes_m = linalg::from_columns(axes[0], axes[1], axes[2]);
    let mut extents = [0.0; 3];
    for p in cloud.points() {
        let d = linalg::sub(*p, center);
        for (k, a) in axes.iter().enumerate() {
            extents[k] = f64::max(extents[k], linalg::dot(d, *a).abs());
        }
    }
    ObbFrame { center, axes: Rotation::from_matrix_unchecked(axes_m), extents }
}

/// Drops points whose distance from the centroid exceeds mean + 1 std of all
/// centroid distances. Returns the input unchanged if fewer than 4 points
/// would remain.
pub fn filter_outliers(cloud: &PointCloud) -> PointCloud {
    const MIN_KEEP: usize = 4;
    let c = cloud.centroid();
    let d: Vec<f64> = cloud.points().iter().map(|p| linalg::norm(linalg::sub(*p, c))).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    // rounding slack so that equidistant clouds are left intact
    let threshold = mean + std + 1e-12 * mean.max(1.0);
    let kept: Vec<Vec3> = cloud.points().iter().zip(&d).filter(|(_, &di)| di <= threshold).map(|(p, _)| *p).collect();
    if kept.len() < MIN_KEEP || kept.len() == cloud.len() {
        return cloud.clone();
    }
    PointCloud::new(kept).expect("subset of a valid cloud")
}

/// The 24 signed permutation matrices with determinant +1, identity first.
pub fn proper_axis_alignments() -> Vec<Rotation> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for perm in PERMS {
        for signs in 0..8u32 {
            let mut m = [[0.0; 3]; 3];
            for (row, &col) in perm.iter().enumerate() {
                m[row][col] = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
            }
            if linalg::det(&m) > 0.0 {
                out.push(Rotation::from_matrix_unchecked(m));
            }
        }
    }
    out
}

/// A cloud expressed in its own principal frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub aligned: PointCloud,
    /// Rotation taking aligned coordinates back to the input's orientation.
    pub rotation: Rotation,
    /// Centroid of the input.
    pub center: Vec3,
}

impl Alignment {
    /// Pose mapping the aligned cloud onto the original input.
    pub fn to_original(&self) -> Pose {
        Pose::new(self.rotation, self.center)
    }
}

/// Zero-centers a cloud and rotates its principal axes onto the world axes.
pub fn align_principal_axes(cloud: &PointCloud) -> Alignment {
    let frame = pca_frame(cloud);
    let inv = frame.to_world().inverse();
    Alignment { aligned: cloud.transformed(&inv), rotation: frame.axes, center: frame.center }
}

/// Pose `q` with `q(part) ≈ segment`, from their PCA boxes.
///
/// Both frames are fitted after outlier filtering, so that a rigid copy of
/// the part yields matching frames. All 24 proper alignments between the two
/// frames are tried and the one with the lowest chamfer distance to the full
/// segment wins (first on ties).
pub fn estimate_pose(part: &PointCloud, segment: Option<&PointCloud>) -> Result<Pose, GeometryError> {
    let segment = segment.ok_or(GeometryError::PartUnused)?;
    let part_frame = pca_frame(&filter_outliers(part)).to_world();
    let seg_frame = pca_frame(&filter_outliers(segment)).to_world();
    let part_inv = part_frame.inverse();
    let mut best: Option<(f64, Pose)> = None;
    for c in proper_axis_alignments() {
        let q = seg_frame.compose(&Pose::new(c, [0.0; 3])).compose(&part_inv);
        let score = chamfer(segment, &part.transformed(&q));
        if best.as_ref().map_or(true, |(s, _)| score < *s) {
            best = Some((score, q));
        }
    }
    Ok(best.expect("24 candidates").1)
}
