use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::dist2;
use super::{GeometryError, PointCloud};

/// Farthest point sampling with a seed-chosen start index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed: u64) -> Result<Vec<usize>, GeometryError> {
    let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..cloud.len());
    farthest_point_sample_from(cloud, m, start)
}

/// Farthest point sampling from a given start index. Each new index maximizes
/// the distance to the already selected set; ties go to the lowest index.
pub fn farthest_point_sample_from(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>, GeometryError> {
    let n = cloud.len();
    if m > n || start >= n {
        return Err(GeometryError::TooMany { requested: m.max(start + 1), available: n });
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(m);
    if m == 0 {
        return Ok(selected);
    }
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..m {
        selected.push(current);
        let c = pts[current];
        min_d[current] = f64::NEG_INFINITY;
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = &mut min_d[i];
            if *d != f64::NEG_INFINITY {
                let nd = dist2(*p, c);
                if nd < *d {
                    *d = nd;
                }
                if *d > best_d {
                    best_d = *d;
                    best = i;
                }
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Fixed-width neighbor lists, flattened row-major (`len × k`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl NeighborTable {
    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// The `k' ≤ k` nearest neighbors of every point (rows are sorted, so a
    /// prefix is again a nearest-neighbor list).
    pub fn truncated(&self, k: usize) -> NeighborTable {
        assert!(k <= self.k);
        let indices = (0..self.len()).flat_map(|i| self.row(i)[..k].iter().copied()).collect();
        NeighborTable { k, indices }
    }
}

/// Exact k nearest neighbors of every point by full scan. Each list is sorted
/// by ascending distance, ties by index, and includes the point itself.
pub fn knn_indices(cloud: &PointCloud, k: usize) -> Result<NeighborTable, GeometryError> {
    let n = cloud.len();
    if k > n {
        return Err(GeometryError::TooMany { requested: k, available: n });
    }
    let pts = cloud.points();
    let mut indices = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for p in pts {
        cand.clear();
        cand.extend(pts.iter().enumerate().map(|(j, q)| (dist2(*p, *q), j)));
        let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            cand.select_nth_unstable_by(k, by_key);
            cand.truncate(k);
        }
        cand.sort_unstable_by(by_key);
        indices.extend(cand.iter().take(k).map(|c| c.1));
    }
    Ok(NeighborTable { k, indices })
}
