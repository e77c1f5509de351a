use super::{KdTree, PointCloud};

/// `Σ_{x∈a} min_{y∈b} ‖x − y‖²`, summed in the order of `a`.
pub fn directed_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let tree = KdTree::new(b.points());
    a.points().iter().map(|&x| tree.nearest(x).0).sum()
}

/// Chamfer distance with summed (not averaged) squared nearest distances.
/// Symmetric bit-for-bit: both directed terms are computed independently.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    directed_chamfer(a, b) + directed_chamfer(b, a)
}

/// Density-normalized chamfer: each directed sum divided by its cloud size.
pub fn chamfer_mean(a: &PointCloud, b: &PointCloud) -> f64 {
    directed_chamfer(a, b) / a.len() as f64 + directed_chamfer(b, a) / b.len() as f64
}
