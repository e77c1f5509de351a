//! From segmentation to placed parts.

use super::EvalError;
use crate::datagen::AssemblySample;
use crate::geometry::{estimate_pose, PointCloud, Pose};
use crate::model::SegmentationResult;
use crate::tensor::Tensor;

/// Segments smaller than this are treated as noise.
pub const DEFAULT_MIN_POINTS: usize = 5;

/// Disjoint target segments, one per part (empty ⇒ part unused).
#[derive(Clone, Debug, PartialEq)]
pub struct Segments {
    pub indices: Vec<Vec<usize>>,
    /// Final per-point labels after reassignment.
    pub labels: Vec<usize>,
}

impl Segments {
    pub fn is_used(&self, part: usize) -> bool {
        !self.indices[part].is_empty()
    }
}

/// Splits the target by predicted label. Segments with fewer than
/// `min_points` points are emptied and their points move to the most probable
/// surviving part (ties to the lower index).
pub fn segments_from_result(result: &SegmentationResult, min_points: usize) -> Result<Segments, EvalError> {
    let probs = &result.probs;
    let n = probs.cols();
    let mut counts = vec![0usize; n];
    for &l in &result.labels {
        counts[l] += 1;
    }
    let keep: Vec<bool> = counts.iter().map(|&c| c >= min_points.max(1)).collect();
    if !keep.iter().any(|&k| k) {
        return Err(EvalError::Degenerate(format!("no segment reaches {min_points} points")));
    }
    let mut labels = result.labels.clone();
    let mut indices = vec![Vec::new(); n];
    for (t, l) in labels.iter_mut().enumerate() {
        if !keep[*l] {
            *l = best_kept(probs, t, &keep);
        }
        indices[*l].push(t);
    }
    Ok(Segments { indices, labels })
}

fn best_kept(probs: &Tensor, t: usize, keep: &[bool]) -> usize {
    let row = probs.row(t);
    let mut best = usize::MAX;
    for (j, &k) in keep.iter().enumerate() {
        if k && (best == usize::MAX || row[j] > row[best]) {
            best = j;
        }
    }
    best
}

/// Placed parts: a pose per used part and the union of their clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct Assembly {
    pub poses: Vec<Option<Pose>>,
    pub assembled: PointCloud,
}

impl Assembly {
    pub fn used_parts(&self) -> usize {
        self.poses.iter().filter(|p| p.is_some()).count()
    }
}

/// Estimates a pose for every part with a non-empty segment.
pub fn assemble_segments(sample: &AssemblySample, segments: &Segments) -> Result<Assembly, EvalError> {
    if segments.indices.len() != sample.num_parts() {
        return Err(EvalError::Mismatch(format!(
            "{} segments for {} parts",
            segments.indices.len(),
            sample.num_parts()
        )));
    }
    let mut poses = Vec::with_capacity(sample.num_parts());
    let mut placed = Vec::new();
    for (part, idx) in sample.parts.iter().zip(&segments.indices) {
        if idx.is_empty() {
            poses.push(None);
            continue;
        }
        let seg = sample.target.select(idx)?;
        let pose = estimate_pose(part, Some(&seg))?;
        placed.push(part.transformed(&pose));
        poses.push(Some(pose));
    }
    let assembled = PointCloud::union(&placed)?;
    Ok(Assembly { poses, assembled })
}

/// Segments the target from `result` (default minimum segment size) and
/// places the parts.
pub fn assemble(sample: &AssemblySample, result: &SegmentationResult) -> Result<Assembly, EvalError> {
    if result.probs.rows() != sample.target.len() || result.probs.cols() != sample.num_parts() {
        return Err(EvalError::Mismatch(format!(
            "result is {:?}, sample has {} points and {} parts",
            result.probs.shape(),
            sample.target.len(),
            sample.num_parts()
        )));
    }
    let segments = segments_from_result(result, DEFAULT_MIN_POINTS)?;
    assemble_segments(sample, &segments)
}

/// One-hot segmentation from the ground-truth labels.
pub fn oracle_result(sample: &AssemblySample) -> SegmentationResult {
    let n = sample.num_parts();
    let mut data = vec![0.0; sample.target.len() * n];
    for (t, &l) in sample.gt_labels.iter().enumerate() {
        data[t * n + l] = 1.0;
    }
    let probs = Tensor::matrix(sample.target.len(), n, data);
    SegmentationResult {
        labels: sample.gt_labels.clone(),
        attn_probs: probs.clone(),
        attn_indices: (0..sample.target.len()).collect(),
        probs,
    }
}
