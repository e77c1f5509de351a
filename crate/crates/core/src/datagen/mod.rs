//! Procedural assembly samples built from primitive parts.
//!
//! A template instance is a list of shapes placed in the world. The target is
//! a farthest-point subsample of the union surface (points buried inside
//! another part are dropped), labeled by generating part. Each part cloud is
//! sampled separately, zero-centered and rotated onto its principal axes, and
//! its ground-truth pose maps it back into the target.

mod dataset;
mod shapes;
mod templates;
#[cfg(test)]
mod tests;

pub use dataset::{
    generate_dataset, read_dataset, sample_rng, write_dataset, Dataset, DatasetConfig, DatasetManifest, Split, Splits,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use shapes::{generate_primitive, PartSpec, PrimitiveKind, Shape};
pub use templates::{instantiate, PlacedPart, Template};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::linalg::{self, Vec3};
use crate::geometry::{
    align_principal_axes, farthest_point_sample_from, random_rotation, GeometryError, PointCloud, Pose, Rotation,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("dataset version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("dataset file is truncated")]
    Truncated,
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("malformed dataset content: {0}")]
    Corrupt(String),
    #[error("manifest json: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("invalid part spec: {0}")]
    InvalidSpec(String),
    #[error("unknown template '{0}'")]
    UnknownTemplate(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Whether parts are the exact shapes the target was built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Exact,
    Nonexact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssemblySample {
    pub sample_id: String,
    pub template: Template,
    pub variant: Variant,
    pub target: PointCloud,
    /// Zero-centered, principal-axis aligned part clouds.
    pub parts: Vec<PointCloud>,
    pub part_types: Vec<String>,
    /// Primitive family used when substituting each part.
    pub part_kinds: Vec<PrimitiveKind>,
    pub gt_labels: Vec<usize>,
    /// `gt_poses[i]` maps `parts[i]` into the target.
    pub gt_poses: Vec<Pose>,
    pub equivalence_classes: Vec<Vec<usize>>,
    /// Rotation applied to the canonical target.
    pub target_orientation: Rotation,
}

impl AssemblySample {
    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    /// Union of the parts at their ground-truth poses, in part order.
    pub fn gt_assembly(&self) -> PointCloud {
        let placed: Vec<PointCloud> = self.parts.iter().zip(&self.gt_poses).map(|(p, q)| p.transformed(q)).collect();
        PointCloud::union(&placed).expect("parts are non-empty")
    }

    /// Indices of target points carrying label `part`.
    pub fn gt_segment_indices(&self, part: usize) -> Vec<usize> {
        self.gt_labels.iter().enumerate().filter(|(_, &l)| l == part).map(|(i, _)| i).collect()
    }

    /// Checks the structural invariants; used after decoding.
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.parts.len();
        let bad = |m: &str| Err(DataError::Corrupt(format!("{}: {m}", self.sample_id)));
        if n == 0 {
            return bad("no parts");
        }
        if self.part_types.len() != n || self.part_kinds.len() != n || self.gt_poses.len() != n {
            return bad("per-part field lengths disagree");
        }
        if self.gt_labels.len() != self.target.len() {
            return bad("label count differs from target size");
        }
        if self.gt_labels.iter().any(|&l| l >= n) {
            return bad("label out of range");
        }
        let mut seen = vec![false; n];
        for c in &self.equivalence_classes {
            for &i in c {
                if i >= n || seen[i] {
                    return bad("equivalence classes are not a partition");
                }
                seen[i] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return bad("equivalence classes do not cover all parts");
        }
        Ok(())
    }
}

/// Point counts for generated samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub n_target: usize,
    pub n_part: usize,
    /// Dense surface samples per final point before farthest-point selection.
    pub oversample: usize,
}

impl SampleConfig {
    pub const DESK: SampleConfig = SampleConfig { n_target: 2560, n_part: 512, oversample: 4 };
    pub const FULL: SampleConfig = SampleConfig { n_target: 5000, n_part: 1000, oversample: 4 };
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self::DESK
    }
}

/// Relative per-axis tolerance for geometric equivalence.
pub const EQUIVALENCE_TOL: f64 = 0.05;

/// Partition of part indices into interchangeable groups.
///
/// Parts `i` and `j` are linked when their types match and their sorted
/// bounding-box extents agree within [`EQUIVALENCE_TOL`] (relative) on every
/// axis; classes are the connected components. Classes are ordered by their
/// smallest member and list members ascending.
pub fn equivalence_classes(parts: &[(Vec3, &str)]) -> Vec<Vec<usize>> {
    let n = parts.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let sorted: Vec<Vec3> = parts
        .iter()
        .map(|(e, _)| {
            let mut s = *e;
            s.sort_by(|a, b| b.total_cmp(a));
            s
        })
        .collect();
    for i in 0..n {
        for j in i + 1..n {
            if parts[i].1 != parts[j].1 {
                continue;
            }
            let close = (0..3).all(|k| {
                let (a, b) = (sorted[i][k], sorted[j][k]);
                (a - b).abs() <= EQUIVALENCE_TOL * a.min(b)
            });
            if close {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                // attach to the smaller root so roots are class minima
                let (lo, hi) = (ri.min(rj), ri.max(rj));
                parent[hi] = lo;
            }
        }
    }
    let mut classes: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = classes.len();
            classes.push(Vec::new());
        }
        classes[slot[r]].push(i);
    }
    classes
}

/// Largest-remainder split of `total` proportionally to `weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Scales and shifts a placed instance so its bounding box is centered at the
/// origin with largest side 1.
fn normalize(parts: &[PlacedPart]) -> Vec<PlacedPart> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in parts {
        let (a, b) = templates::placed_bounds(p);
        for k in 0..3 {
            lo[k] = lo[k].min(a[k]);
            hi[k] = hi[k].max(b[k]);
        }
    }
    let center = linalg::scale(linalg::add(lo, hi), 0.5);
    let size = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    let s = 1.0 / size;
    parts
        .iter()
        .map(|p| PlacedPart {
            shape: p.shape.scaled(s),
            part_type: p.part_type,
            pose: Pose::new(p.pose.rotation, linalg::scale(linalg::sub(p.pose.translation, center), s)),
        })
        .collect()
}

/// Margin below which a point counts as on, not inside, another part.
const INSIDE_MARGIN: f64 = 1e-9;

/// One exact sample from `template`, in canonical orientation.
pub fn generate_assembly(
    template: Template,
    rng: &mut impl Rng,
    config: &SampleConfig,
    sample_id: &str,
) -> Result<AssemblySample, DataError> {
    let placed = normalize(&instantiate(template, rng));
    let inverse: Vec<Pose> = placed.iter().map(|p| p.pose.inverse()).collect();

    let dense_total = config.n_target * config.oversample;
    let areas: Vec<f64> = placed.iter().map(|p| p.shape.area()).collect();
    let mut dense = Vec::with_capacity(dense_total);
    let mut dense_labels = Vec::with_capacity(dense_total);
    for (i, (p, count)) in placed.iter().zip(apportion(dense_total, &areas)).enumerate() {
        for _ in 0..count {
            let x = p.pose.apply(p.shape.sample_surface(rng));
            let buried = placed
                .iter()
                .enumerate()
                .any(|(j, o)| j != i && o.shape.contains_strictly(inverse[j].apply(x), INSIDE_MARGIN));
            if !buried {
                dense.push(x);
                dense_labels.push(i);
            }
        }
    }
    let dense = PointCloud::new(dense)?;
    let start = rng.gen_range(0..dense.len());
    let pick = farthest_point_sample_from(&dense, config.n_target, start)?;
    let target = dense.select(&pick)?;
    let gt_labels: Vec<usize> = pick.iter().map(|&i| dense_labels[i]).collect();

    let mut parts = Vec::with_capacity(placed.len());
    let mut gt_poses = Vec::with_capacity(placed.len());
    for p in &placed {
        let local = PointCloud::new(p.shape.sample_cloud(config.n_part * config.oversample, rng))?;
        let start = rng.gen_range(0..local.len());
        let local = local.select(&farthest_point_sample_from(&local, config.n_part, start)?)?;
        let a = align_principal_axes(&local);
        gt_poses.push(p.pose.compose(&a.to_original()));
        parts.push(a.aligned);
    }
    let keyed: Vec<(Vec3, &str)> = placed.iter().map(|p| (p.shape.extents(), p.part_type)).collect();
    let sample = AssemblySample {
        sample_id: sample_id.to_string(),
        template,
        variant: Variant::Exact,
        target,
        parts,
        part_types: placed.iter().map(|p| p.part_type.to_string()).collect(),
        part_kinds: placed
            .iter()
            .map(|p| match p.shape {
                Shape::Sphere { .. } => PrimitiveKind::Sphere,
                _ => PrimitiveKind::Box,
            })
            .collect(),
        gt_labels,
        gt_poses,
        equivalence_classes: equivalence_classes(&keyed),
        target_orientation: Rotation::IDENTITY,
    };
    Ok(sample)
}

/// Grid step for non-exact primitive sizes.
pub const SIZE_STEP: f64 = 0.05;

/// Rounds a bounding-box side to the nearest grid size (at least one step).
pub fn quantize_size(e: f64) -> f64 {
    ((e / SIZE_STEP).round() * SIZE_STEP).max(SIZE_STEP)
}

/// Replaces every part by a box or sphere of grid-quantized bounding-box size.
///
/// Labels and poses are kept; equivalence is recomputed from the quantized
/// sizes. A part whose extents already sit on the grid keeps its cloud.
pub fn nonexact_substitute(sample: &AssemblySample, rng: &mut impl Rng) -> Result<AssemblySample, DataError> {
    if sample.variant != Variant::Exact {
        return Err(DataError::InvalidSpec(format!("{} is already non-exact", sample.sample_id)));
    }
    let n_p = sample.parts[0].len();
    let mut out = sample.clone();
    let mut sizes = Vec::with_capacity(sample.num_parts());
    for (i, part) in sample.parts.iter().enumerate() {
        let e = part.aabb_extents();
        let mut q = e.map(quantize_size);
        if sample.part_kinds[i] == PrimitiveKind::Sphere {
            q = [q.iter().copied().fold(0.0, f64::max); 3];
        }
        if (0..3).any(|k| (q[k] - e[k]).abs() > 1e-9) {
            let spec = PartSpec { kind: sample.part_kinds[i], size: q, part_type: sample.part_types[i].clone() };
            out.parts[i] = generate_primitive(&spec, n_p, rng)?;
        }
        sizes.push(q);
    }
    let keyed: Vec<(Vec3, &str)> = sizes.iter().zip(&sample.part_types).map(|(s, t)| (*s, t.as_str())).collect();
    out.equivalence_classes = equivalence_classes(&keyed);
    out.variant = Variant::Nonexact;
    Ok(out)
}

/// Rotates the target by `r` about the origin; point order, labels and part
/// clouds are untouched and ground-truth poses follow the rotation.
pub fn rotate_sample(sample: &AssemblySample, r: &Rotation) -> AssemblySample {
    let mut out = sample.clone();
    let rp = Pose::new(*r, [0.0; 3]);
    out.target = sample.target.rotated(r);
    out.gt_poses = sample.gt_poses.iter().map(|q| rp.compose(q)).collect();
    out.target_orientation = r.compose(&sample.target_orientation);
    out
}

/// [`rotate_sample`] with a Haar-uniform rotation.
pub fn augment_rotation(sample: &AssemblySample, rng: &mut impl Rng) -> AssemblySample {
    rotate_sample(sample, &random_rotation(rng))
}
