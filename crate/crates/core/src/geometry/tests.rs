use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::{self, Vec3};
use super::*;

fn cloud(points: Vec<Vec3>) -> PointCloud {
    PointCloud::new(points).unwrap()
}

fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    cloud((0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect())
}

/// Gaussian blob stretched along three distinct axis lengths.
fn anisotropic_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    let s = [1.0, 0.5, 0.2];
    cloud(
        (0..n)
            .map(|_| {
                let g: [f64; 3] = std::array::from_fn(|_| rng.sample(rand_distr::StandardNormal));
                [g[0] * s[0], g[1] * s[1], g[2] * s[2]]
            })
            .collect(),
    )
}

fn random_pose(rng: &mut impl Rng) -> Pose {
    Pose::new(random_rotation(rng), [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
}

fn brute_fps(pts: &[Vec3], m: usize, start: usize) -> Vec<usize> {
    let mut sel = vec![start];
    while sel.len() < m {
        let mut best = (f64::NEG_INFINITY, 0);
        for i in 0..pts.len() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&j| linalg::dist2(pts[i], pts[j])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        sel.push(best.1);
    }
    sel
}

fn brute_knn(pts: &[Vec3], k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for p in pts {
        let mut all: Vec<(f64, usize)> = pts.iter().enumerate().map(|(j, q)| (linalg::dist2(*p, *q), j)).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.extend(all[..k].iter().map(|x| x.1));
    }
    out
}

fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    let dir = |x: &[Vec3], y: &[Vec3]| -> f64 {
        x.iter().map(|p| y.iter().map(|q| linalg::dist2(*p, *q)).fold(f64::INFINITY, f64::min)).sum()
    };
    dir(a, b) + dir(b, a)
}

fn box_grid(size: Vec3, steps: usize) -> PointCloud {
    let mut pts = Vec::new();
    for i in 0..=steps {
        for j in 0..=steps {
            for k in 0..=steps {
                let f = |t: usize, s: f64| (t as f64 / steps as f64 - 0.5) * s;
                pts.push([f(i, size[0]), f(j, size[1]), f(k, size[2])]);
            }
        }
    }
    cloud(pts)
}

#[test]
fn point_cloud_rejects_empty_and_nan() {
    assert_eq!(PointCloud::new(vec![]), Err(GeometryError::EmptyCloud));
    assert_eq!(PointCloud::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]]), Err(GeometryError::NonFinite(1)));
}

#[test]
fn zero_center_moves_centroid_to_origin() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = random_cloud(&mut rng, 40);
    let (z, center) = c.zero_center();
    assert!(linalg::norm(z.centroid()) < 1e-12);
    assert!(linalg::norm(linalg::sub(center, c.centroid())) < 1e-15);
}

#[test]
fn fps_full_is_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = random_cloud(&mut rng, 30);
    let mut idx = farthest_point_sample(&c, 30, 9).unwrap();
    idx.sort_unstable();
    assert_eq!(idx, (0..30).collect::<Vec<_>>());
}

#[test]
fn fps_collinear_pair() {
    let c = cloud(vec![[0.0; 3], [0.1, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    assert_eq!(farthest_point_sample_from(&c, 2, 0).unwrap(), vec![0, 2]);
}

#[test]
fn fps_ties_go_to_lowest_index() {
    let c = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
    assert_eq!(farthest_point_sample_from(&c, 2, 0).unwrap(), vec![0, 1]);
}

#[test]
fn fps_too_many_is_error() {
    let c = cloud(vec![[0.0; 3]]);
    assert!(matches!(farthest_point_sample(&c, 2, 0), Err(GeometryError::TooMany { .. })));
}

#[test]
fn fps_seed_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = random_cloud(&mut rng, 64);
    assert_eq!(farthest_point_sample(&c, 8, 77).unwrap(), farthest_point_sample(&c, 8, 77).unwrap());
}

#[test]
fn fps_matches_brute_force_on_50_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..50 {
        let c = random_cloud(&mut rng, 64);
        let got = farthest_point_sample(&c, 8, trial).unwrap();
        assert_eq!(got, brute_fps(c.points(), 8, got[0]), "trial {trial}");
    }
}

#[test]
fn knn_k1_is_self() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = random_cloud(&mut rng, 20);
    let t = knn_indices(&c, 1).unwrap();
    assert_eq!(t.indices, (0..20).collect::<Vec<_>>());
}

#[test]
fn knn_full_is_permutation_and_too_many_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = random_cloud(&mut rng, 12);
    let t = knn_indices(&c, 12).unwrap();
    for i in 0..12 {
        let mut r = t.row(i).to_vec();
        assert_eq!(r[0], i);
        r.sort_unstable();
        assert_eq!(r, (0..12).collect::<Vec<_>>());
    }
    assert!(knn_indices(&c, 13).is_err());
}

#[test]
fn knn_matches_brute_force_on_50_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let c = random_cloud(&mut rng, 32);
        assert_eq!(knn_indices(&c, 5).unwrap().indices, brute_knn(c.points(), 5));
    }
}

#[test]
fn knn_truncation_is_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = random_cloud(&mut rng, 32);
    assert_eq!(knn_indices(&c, 8).unwrap().truncated(3), knn_indices(&c, 3).unwrap());
}

#[test]
fn knn_handles_duplicate_points() {
    let c = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0; 3]]);
    let t = knn_indices(&c, 2).unwrap();
    assert_eq!(t.row(0), &[0, 2]);
    assert_eq!(t.row(2), &[0, 2]);
}

#[test]
fn chamfer_basic_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_cloud(&mut rng, 30);
    assert_eq!(chamfer(&a, &a), 0.0);
    let p = cloud(vec![[0.0; 3]]);
    let q = cloud(vec![[1.0, 0.0, 0.0]]);
    assert_eq!(chamfer(&p, &q), 2.0);
}

#[test]
fn chamfer_zero_for_subset_sets() {
    let a = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
    let b = cloud(vec![[1.0, 0.0, 0.0], [0.0; 3], [0.0; 3]]);
    assert_eq!(chamfer(&a, &b), 0.0);
}

#[test]
fn chamfer_matches_double_loop_on_50_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let a = random_cloud(&mut rng, 50);
        let b = random_cloud(&mut rng, 60);
        let want = brute_chamfer(a.points(), b.points());
        assert!((chamfer(&a, &b) - want).abs() < 1e-12);
        assert_eq!(chamfer(&a, &b), chamfer(&b, &a));
    }
}

#[test]
fn kdtree_matches_scan_on_clustered_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // heavy duplication exercises the tie rules
    let pts: Vec<Vec3> = (0..500).map(|_| [rng.gen_range(0..4) as f64, rng.gen_range(0..4) as f64, 0.0]).collect();
    let tree = KdTree::new(&pts);
    for _ in 0..200 {
        let q = [rng.gen_range(-1.0..5.0), rng.gen_range(-1.0..5.0), rng.gen_range(-1.0..1.0)];
        let want = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (linalg::dist2(q, *p), i))
            .min_by(|a, b| a.partial_cmp(b).unwrap())
            .unwrap();
        assert_eq!(tree.nearest(q), want);
    }
}

#[test]
fn chamfer_mean_normalizes_by_size() {
    let p = cloud(vec![[0.0; 3], [0.0; 3]]);
    let q = cloud(vec![[1.0, 0.0, 0.0]]);
    assert_eq!(chamfer(&p, &q), 3.0);
    assert_eq!(chamfer_mean(&p, &q), 2.0);
}

#[test]
fn rotations_are_proper_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let r = random_rotation(&mut rng);
        assert!(Rotation::new(*r.matrix()).is_ok());
    }
    let a = random_rotation(&mut ChaCha8Rng::seed_from_u64(5));
    let b = random_rotation(&mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, b);
}

#[test]
fn random_rotation_is_isotropic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut mean = [0.0; 3];
    for _ in 0..10_000 {
        mean = linalg::add(mean, random_rotation(&mut rng).apply([1.0, 0.0, 0.0]));
    }
    assert!(linalg::norm(linalg::scale(mean, 1e-4)) < 0.05);
}

#[test]
fn rotation_new_rejects_reflection() {
    let m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
    assert!(matches!(Rotation::new(m), Err(GeometryError::NotRotation { .. })));
}

#[test]
fn pose_group_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let (a, b, c) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
        let x = [rng.gen_range(-1.0..1.0), 0.3, -0.7];
        let lhs = a.compose(&b).compose(&c).apply(x);
        let rhs = a.compose(&b.compose(&c)).apply(x);
        assert!(linalg::norm(linalg::sub(lhs, rhs)) < 1e-9);
        let id = a.compose(&a.inverse());
        assert!(linalg::norm(linalg::sub(id.apply(x), x)) < 1e-9);
        assert!(id.rotation.angle_to(&Rotation::IDENTITY) < 1e-7);
        assert!(linalg::norm(linalg::sub(a.compose(&b).apply(x), a.apply(b.apply(x)))) < 1e-12);
    }
}

#[test]
fn axis_angle_quarter_turn() {
    let r = Rotation::from_axis_angle([0.0, 0.0, 2.0], std::f64::consts::FRAC_PI_2);
    let y = r.apply([1.0, 0.0, 0.0]);
    assert!(linalg::norm(linalg::sub(y, [0.0, 1.0, 0.0])) < 1e-15);
    assert!((r.angle_to(&Rotation::IDENTITY) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
}

#[test]
fn pca_axis_aligned_box() {
    let f = pca_frame(&box_grid([2.0, 1.0, 0.5], 10));
    for k in 0..3 {
        assert!((f.extents[k] - [1.0, 0.5, 0.25][k]).abs() < 1e-12);
    }
    assert!(linalg::orthonormality_error(f.axes.matrix()) < 1e-12);
    assert!(f.axes.angle_to(&Rotation::IDENTITY) < 1e-9);
}

#[test]
fn pca_box_along_other_axes_gives_permutation() {
    let f = pca_frame(&box_grid([0.5, 2.0, 1.0], 10));
    let m = f.axes.matrix();
    // first principal axis is world y
    assert!((m[1][0] - 1.0).abs() < 1e-9);
    assert!((m[2][1] - 1.0).abs() < 1e-9);
    assert!((m[0][2] - 1.0).abs() < 1e-9);
    assert!((linalg::det(m) - 1.0).abs() < 1e-12);
}

#[test]
fn pca_single_point_is_identity() {
    let f = pca_frame(&cloud(vec![[0.3, -0.2, 5.0]]));
    assert_eq!(f.extents, [0.0; 3]);
    assert_eq!(f.axes, Rotation::IDENTITY);
    assert_eq!(f.center, [0.3, -0.2, 5.0]);
}

#[test]
fn pca_degenerate_inputs_still_give_proper_frames() {
    let line = cloud((0..10).map(|i| [0.1 * i as f64, 0.2 * i as f64, 0.0]).collect());
    let plane = cloud((0..25).map(|i| [(i % 5) as f64, (i / 5) as f64 * 0.5, 1.0]).collect());
    for c in [line, plane] {
        let f = pca_frame(&c);
        assert!(Rotation::new(*f.axes.matrix()).is_ok());
        assert!(f.extents[0] >= f.extents[1] && f.extents[1] >= f.extents[2]);
    }
}

#[test]
fn pca_rotation_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        let c = anisotropic_cloud(&mut rng, 200);
        let r = random_rotation(&mut rng);
        let f0 = pca_frame(&c);
        let f1 = pca_frame(&c.rotated(&r));
        for k in 0..3 {
            assert!((f0.extents[k] - f1.extents[k]).abs() < 1e-9);
            // R·a0 is ± a1 for each principal axis
            let a0 = r.apply(linalg::column(f0.axes.matrix(), k));
            let a1 = linalg::column(f1.axes.matrix(), k);
            assert!((linalg::dot(a0, a1).abs() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn align_principal_axes_reconstructs_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let c = anisotropic_cloud(&mut rng, 100).transformed(&random_pose(&mut rng));
    let a = align_principal_axes(&c);
    assert!(linalg::norm(a.aligned.centroid()) < 1e-12);
    let back = a.aligned.transformed(&a.to_original());
    for (p, q) in back.points().iter().zip(c.points()) {
        assert!(linalg::norm(linalg::sub(*p, *q)) < 1e-12);
    }
    let f = pca_frame(&a.aligned);
    assert!(f.axes.angle_to(&Rotation::IDENTITY) < 1e-9);
}

#[test]
fn filter_equidistant_unchanged() {
    let pts: Vec<Vec3> = (0..12)
        .map(|i| {
            let t = i as f64 * std::f64::consts::TAU / 12.0;
            [t.cos(), t.sin(), 0.0]
        })
        .collect();
    let c = cloud(pts);
    assert_eq!(filter_outliers(&c), c);
}

#[test]
fn filter_removes_far_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut pts = Vec::new();
    while pts.len() < 100 {
        let p: Vec3 = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        if linalg::norm(p) <= 1.0 {
            pts.push(p);
        }
    }
    pts.push([10.0, 0.0, 0.0]);
    let c = cloud(pts.clone());
    // the threshold, recomputed directly
    let cen = c.centroid();
    let d: Vec<f64> = pts.iter().map(|p| linalg::norm(linalg::sub(*p, cen))).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    let want: Vec<Vec3> = pts.iter().zip(&d).filter(|(_, &x)| x <= mean + std).map(|(p, _)| *p).collect();
    let f = filter_outliers(&c);
    assert!(!f.points().contains(&[10.0, 0.0, 0.0]));
    assert_eq!(f.points(), &want[..]);
}

#[test]
fn filter_small_cloud_unchanged() {
    let c = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]]);
    assert_eq!(filter_outliers(&c), c);
}

#[test]
fn axis_alignments_are_24_distinct_rotations() {
    let all = proper_axis_alignments();
    assert_eq!(all.len(), 24);
    assert_eq!(all[0], Rotation::IDENTITY);
    for (i, a) in all.iter().enumerate() {
        assert!(Rotation::new(*a.matrix()).is_ok());
        for b in &all[..i] {
            assert_ne!(a, b);
        }
    }
}

#[test]
fn estimate_pose_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let c = anisotropic_cloud(&mut rng, 300);
    let q = estimate_pose(&c, Some(&c)).unwrap();
    assert!(linalg::norm(q.translation) < 1e-6);
    assert!(q.rotation.angle_to(&Rotation::IDENTITY) < 1e-6);
}

#[test]
fn estimate_pose_unused_part() {
    let c = cloud(vec![[0.0; 3]]);
    assert_eq!(estimate_pose(&c, None), Err(GeometryError::PartUnused));
}

#[test]
fn estimate_pose_recovers_rigid_transform_100_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for trial in 0..100 {
        let part = anisotropic_cloud(&mut rng, 200);
        let truth = random_pose(&mut rng);
        let seg = part.transformed(&truth);
        let q = estimate_pose(&part, Some(&seg)).unwrap();
        let cd = chamfer(&seg, &part.transformed(&q));
        assert!(cd < 1e-9, "trial {trial}: chamfer {cd}");
        assert!(q.rotation.angle_to(&truth.rotation) < 1e-6);
        assert!(linalg::norm(linalg::sub(q.translation, truth.translation)) < 1e-6);
    }
}

#[test]
fn estimate_pose_cube_ties_symmetries() {
    let cube = box_grid([1.0; 3], 4);
    let t = [0.3, -0.1, 0.7];
    let sym = proper_axis_alignments()[7];
    let seg = cube.transformed(&Pose::new(sym, t));
    let q = estimate_pose(&cube, Some(&seg)).unwrap();
    let best = chamfer(&seg, &cube.transformed(&q));
    assert!(best < 1e-20);
    // every cube symmetry followed by the translation fits equally well
    for s in proper_axis_alignments() {
        let cd = chamfer(&seg, &cube.transformed(&Pose::new(s, t)));
        assert!(cd < 1e-20);
    }
    let is_symmetry = proper_axis_alignments().iter().any(|s| s.angle_to(&q.rotation) < 1e-6);
    assert!(is_symmetry);
}

#[test]
fn ply_output_has_header_and_rows() {
    let c = cloud(vec![[0.0; 3], [1.0, 0.5, -2.0]]);
    let mut buf = Vec::new();
    ply::write_ply(&mut buf, &c, Some(&[[1, 2, 3], [4, 5, 6]])).unwrap();
    let s = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines[0], "ply");
    assert_eq!(lines[1], "format ascii 1.0");
    assert_eq!(lines[2], "element vertex 2");
    assert!(lines.contains(&"property uchar red"));
    assert_eq!(lines.last().copied(), Some("1 0.5 -2 4 5 6"));
    assert!(ply::write_ply(&mut Vec::new(), &c, Some(&[[0, 0, 0]])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_symmetric_and_rigid_invariant(seed in any::<u64>(), n in 1usize..40, m in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_cloud(&mut rng, n);
        let b = random_cloud(&mut rng, m);
        let pose = random_pose(&mut rng);
        prop_assert_eq!(chamfer(&a, &b), chamfer(&b, &a));
        prop_assert_eq!(chamfer(&a, &a), 0.0);
        let moved = chamfer(&a.transformed(&pose), &b.transformed(&pose));
        prop_assert!((moved - chamfer(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn pca_frame_proper_and_extents_rotation_invariant(seed in any::<u64>(), n in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_cloud(&mut rng, n);
        let f = pca_frame(&c);
        prop_assert!(Rotation::new(*f.axes.matrix()).is_ok());
        prop_assert!(f.extents.iter().all(|e| *e >= 0.0));
        if n >= 4 {
            let r = random_rotation(&mut rng);
            let c2 = anisotropic_cloud(&mut rng, 80);
            let (e0, e1) = (pca_frame(&c2).extents, pca_frame(&c2.rotated(&r)).extents);
            for k in 0..3 {
                prop_assert!((e0[k] - e1[k]).abs() < 1e-9);
            }
        }
    }
}
