//! Per-sample scores. Every metric maximizes over relabelings within
//! equivalence classes, solved exactly by assignment per class.

use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::geometry::{chamfer, chamfer_mean, PointCloud, Pose};

/// Part-accuracy threshold on the averaged chamfer distance.
pub const DEFAULT_TAU: f64 = 0.01;

/// Fraction of points whose prediction matches the best within-class
/// relabeling of the ground truth. An empty input scores 1.
pub fn seg_accuracy(pred: &[usize], gt: &[usize], classes: &[Vec<usize>]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "prediction and ground truth lengths differ");
    if gt.is_empty() {
        return 1.0;
    }
    let n_parts = classes.iter().flatten().max().map_or(0, |m| m + 1);
    let mut confusion = vec![0usize; n_parts * n_parts];
    for (&p, &g) in pred.iter().zip(gt) {
        if p < n_parts && g < n_parts {
            confusion[g * n_parts + p] += 1;
        }
    }
    let mut matched = 0usize;
    for class in classes {
        let s = class.len();
        let cost: Vec<f64> = class
            .iter()
            .flat_map(|&g| class.iter().map(move |&p| (g, p)))
            .map(|(g, p)| -(confusion[g * n_parts + p] as f64))
            .collect();
        let assign = hungarian(&cost, s);
        matched += assign.iter().enumerate().map(|(a, &b)| confusion[class[a] * n_parts + class[b]]).sum::<usize>();
    }
    matched as f64 / gt.len() as f64
}

/// Result of matching predicted part placements against ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMatch {
    /// `matched[i]` is the ground-truth slot assigned to part `i`.
    pub matched: Vec<usize>,
    pub hits: Vec<bool>,
    /// Averaged chamfer of each part to its matched slot; `None` if unused.
    pub distances: Vec<Option<f64>>,
}

impl PartMatch {
    pub fn accuracy(&self) -> f64 {
        if self.hits.is_empty() {
            return 1.0;
        }
        self.hits.iter().filter(|&&h| h).count() as f64 / self.hits.len() as f64
    }
}

/// Matches predicted placements to ground-truth placements within each class,
/// maximizing hits (chamfer below `tau`) and breaking ties by lower total
/// chamfer. Unused parts (`None`) are always misses.
pub fn match_parts(
    poses: &[Option<Pose>],
    gt_poses: &[Pose],
    parts: &[PointCloud],
    classes: &[Vec<usize>],
    tau: f64,
) -> PartMatch {
    let n = parts.len();
    assert!(poses.len() == n && gt_poses.len() == n, "pose and part counts differ");
    let mut matched: Vec<usize> = (0..n).collect();
    let mut hits = vec![false; n];
    let mut distances = vec![None; n];
    let placed: Vec<Option<PointCloud>> =
        poses.iter().zip(parts).map(|(q, p)| q.as_ref().map(|q| p.transformed(q))).collect();
    let gt_placed: Vec<PointCloud> = gt_poses.iter().zip(parts).map(|(q, p)| p.transformed(q)).collect();
    for class in classes {
        let s = class.len();
        let mut cd = vec![None; s * s];
        for (a, &i) in class.iter().enumerate() {
            if let Some(pc) = &placed[i] {
                for (b, &j) in class.iter().enumerate() {
                    cd[a * s + b] = Some(chamfer_mean(pc, &gt_placed[j]));
                }
            }
        }
        // a hit outweighs any sum of distances
        let weight = 1.0 + cd.iter().flatten().sum::<f64>();
        let cost: Vec<f64> = cd
            .iter()
            .map(|d| match d {
                Some(d) if *d < tau => d - weight,
                Some(d) => *d,
                None => weight,
            })
            .collect();
        let assign = hungarian(&cost, s);
        for (a, &b) in assign.iter().enumerate() {
            let i = class[a];
            matched[i] = class[b];
            distances[i] = cd[a * s + b];
            hits[i] = cd[a * s + b].is_some_and(|d| d < tau);
        }
    }
    PartMatch { matched, hits, distances }
}

/// Fraction of parts placed within `tau` of a ground-truth placement.
pub fn part_accuracy(
    poses: &[Option<Pose>],
    gt_poses: &[Pose],
    parts: &[PointCloud],
    classes: &[Vec<usize>],
    tau: f64,
) -> f64 {
    match_parts(poses, gt_poses, parts, classes, tau).accuracy()
}

/// Chamfer distance of an assembly to its target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChamferReport {
    /// `1000 ×` the averaged (density-normalized) chamfer distance.
    pub cd_permille: f64,
    /// Chamfer distance with summed squared distances.
    pub cd_raw: f64,
}

pub fn chamfer_report(target: &PointCloud, assembled: &PointCloud) -> ChamferReport {
    ChamferReport { cd_permille: 1000.0 * chamfer_mean(target, assembled), cd_raw: chamfer(target, assembled) }
}
