use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{chamfer_mean, linalg, random_rotation};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const SMALL: SampleConfig = SampleConfig { n_target: 800, n_part: 200, oversample: 4 };

fn spec(kind: PrimitiveKind, size: [f64; 3]) -> PartSpec {
    PartSpec { kind, size, part_type: "p".into() }
}

#[test]
fn unit_cube_points_on_surface_and_every_face_hit() {
    let c = generate_primitive(&spec(PrimitiveKind::Box, [1.0; 3]), 1000, &mut rng(1)).unwrap();
    let mut faces = [false; 6];
    for p in c.points() {
        let m = p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!((m - 0.5).abs() < 1e-12);
        for k in 0..3 {
            if p[k] == 0.5 {
                faces[2 * k] = true;
            }
            if p[k] == -0.5 {
                faces[2 * k + 1] = true;
            }
        }
    }
    assert!(faces.iter().all(|&f| f));
}

#[test]
fn sphere_points_at_radius() {
    let c = generate_primitive(&spec(PrimitiveKind::Sphere, [1.0; 3]), 500, &mut rng(2)).unwrap();
    for p in c.points() {
        assert!((linalg::norm(*p) - 0.5).abs() < 1e-12);
    }
}

#[test]
fn box_face_fractions_follow_areas() {
    let size = [2.0, 1.0, 0.5];
    let n = 100_000;
    let c = generate_primitive(&spec(PrimitiveKind::Box, size), n, &mut rng(3)).unwrap();
    let mut counts = [0usize; 3];
    for p in c.points() {
        let k = (0..3).find(|&k| p[k].abs() == size[k] / 2.0).unwrap();
        counts[k] += 1;
    }
    let areas = [size[1] * size[2], size[0] * size[2], size[0] * size[1]];
    let total: f64 = areas.iter().sum();
    for k in 0..3 {
        let pk = areas[k] / total;
        let sigma = (n as f64 * pk * (1.0 - pk)).sqrt();
        assert!((counts[k] as f64 - n as f64 * pk).abs() < 3.0 * sigma, "axis {k}: {counts:?}");
    }
}

#[test]
fn primitive_contract_errors() {
    assert!(matches!(
        generate_primitive(&spec(PrimitiveKind::Box, [1.0, 0.0, 1.0]), 100, &mut rng(0)),
        Err(DataError::InvalidSpec(_))
    ));
    assert!(generate_primitive(&spec(PrimitiveKind::Box, [1.0; 3]), 7, &mut rng(0)).is_err());
    assert!(generate_primitive(&spec(PrimitiveKind::Sphere, [f64::NAN; 3]), 100, &mut rng(0)).is_err());
}

#[test]
fn cylinder_surface_and_area() {
    let s = Shape::Cylinder { radius: 0.2, height: 1.0 };
    let mut r = rng(4);
    let (mut side, mut caps) = (0usize, 0usize);
    for _ in 0..20_000 {
        let p = s.sample_surface(&mut r);
        let rr = (p[0] * p[0] + p[1] * p[1]).sqrt();
        if p[2].abs() == 0.5 {
            caps += 1;
            assert!(rr <= 0.2 + 1e-12);
        } else {
            side += 1;
            assert!((rr - 0.2).abs() < 1e-12);
        }
    }
    let frac = side as f64 / (side + caps) as f64;
    assert!((frac - 1.0 / 1.2).abs() < 0.02);
    assert!((s.area() - std::f64::consts::TAU * 0.2 * 1.2).abs() < 1e-12);
}

#[test]
fn table4_has_five_parts_and_leg_class() {
    let s = generate_assembly(Template::Table4, &mut rng(5), &SMALL, "t").unwrap();
    assert_eq!(s.num_parts(), 5);
    assert_eq!(s.equivalence_classes, vec![vec![0], vec![1, 2, 3, 4]]);
    assert_eq!(s.part_types[0], "top");
}

#[test]
fn every_template_has_expected_structure() {
    for (t, n_min, n_max) in [
        (Template::Stool, 4, 4),
        (Template::Lamp, 3, 3),
        (Template::Shelf, 4, 6),
        (Template::Chair, 6, 6),
        (Template::Tframe, 2, 2),
    ] {
        let s = generate_assembly(t, &mut rng(6), &SMALL, "x").unwrap();
        assert!((n_min..=n_max).contains(&s.num_parts()), "{t}");
        s.validate().unwrap();
    }
}

#[test]
fn samples_fit_unit_cube_with_exact_counts() {
    for (i, t) in Template::ALL.into_iter().enumerate() {
        let s = generate_assembly(t, &mut rng(7 + i as u64), &SMALL, "x").unwrap();
        assert_eq!(s.target.len(), SMALL.n_target);
        assert!(s.parts.iter().all(|p| p.len() == SMALL.n_part));
        let (lo, hi) = s.target.aabb();
        for k in 0..3 {
            assert!(lo[k] >= -0.5 - 1e-12 && hi[k] <= 0.5 + 1e-12);
        }
        for p in &s.parts {
            assert!(linalg::norm(p.centroid()) < 1e-12);
        }
    }
}

#[test]
fn reconstruction_matches_target_for_every_template() {
    let cfg = SampleConfig::DESK;
    for (i, t) in Template::ALL.into_iter().enumerate() {
        for rep in 0..3 {
            let s = generate_assembly(t, &mut rng(100 + 10 * i as u64 + rep), &cfg, "x").unwrap();
            let cd = chamfer_mean(&s.target, &s.gt_assembly());
            assert!(cd < 1e-3, "{t}: chamfer {cd}");
        }
    }
}

#[test]
fn labels_name_the_nearest_generating_part() {
    let s = generate_assembly(Template::Chair, &mut rng(8), &SMALL, "x").unwrap();
    let placed: Vec<PointCloud> = s.parts.iter().zip(&s.gt_poses).map(|(p, q)| p.transformed(q)).collect();
    let trees: Vec<crate::geometry::KdTree> =
        placed.iter().map(|c| crate::geometry::KdTree::new(c.points())).collect();
    let mut agree = 0;
    for (x, &l) in s.target.points().iter().zip(&s.gt_labels) {
        let best = (0..trees.len())
            .min_by(|&a, &b| trees[a].nearest(*x).0.total_cmp(&trees[b].nearest(*x).0))
            .unwrap();
        agree += (best == l) as usize;
    }
    // parts touch, so only points right at a joint may disagree
    assert!(agree as f64 >= 0.97 * s.target.len() as f64, "{agree}");
}

#[test]
fn generation_is_deterministic() {
    let a = generate_assembly(Template::Shelf, &mut rng(9), &SMALL, "x").unwrap();
    let b = generate_assembly(Template::Shelf, &mut rng(9), &SMALL, "x").unwrap();
    assert_eq!(a, b);
}

#[test]
fn equivalence_examples() {
    let leg = [0.1, 0.1, 0.4];
    let mut parts = vec![([1.0, 0.6, 0.05], "top")];
    parts.extend(std::iter::repeat((leg, "leg")).take(4));
    assert_eq!(equivalence_classes(&parts), vec![vec![0], vec![1, 2, 3, 4]]);
    let split = [([0.1, 0.1, 0.40], "leg"), ([0.1, 0.1, 0.43], "leg")];
    assert_eq!(equivalence_classes(&split), vec![vec![0], vec![1]]);
    let distinct = [([0.1; 3], "a"), ([0.1; 3], "b"), ([0.1; 3], "c")];
    assert_eq!(equivalence_classes(&distinct), vec![vec![0], vec![1], vec![2]]);
    // orientation of the box does not matter, only sorted sizes
    let turned = [([0.4, 0.1, 0.1], "leg"), ([0.1, 0.1, 0.4], "leg")];
    assert_eq!(equivalence_classes(&turned), vec![vec![0, 1]]);
}

#[test]
fn equivalence_is_transitive_closure() {
    // 0~1 and 1~2 within tolerance, 0 and 2 are not
    let chain = [([1.0; 3], "x"), ([1.04; 3], "x"), ([1.08; 3], "x")];
    assert_eq!(equivalence_classes(&chain), vec![vec![0, 1, 2]]);
}

#[test]
fn quantization_rule() {
    assert!((quantize_size(0.04) - 0.05).abs() < 1e-12);
    assert!((quantize_size(0.43) - 0.45).abs() < 1e-12);
    assert!((quantize_size(0.01) - 0.05).abs() < 1e-12);
}

fn hand_sample(parts: Vec<PointCloud>, kinds: Vec<PrimitiveKind>) -> AssemblySample {
    let n = parts.len();
    let target = PointCloud::union(&parts).unwrap();
    let mut gt_labels = Vec::new();
    for (i, p) in parts.iter().enumerate() {
        gt_labels.extend(std::iter::repeat(i).take(p.len()));
    }
    AssemblySample {
        sample_id: "hand".into(),
        template: Template::Table4,
        variant: Variant::Exact,
        target,
        parts,
        part_types: vec!["leg".into(); n],
        part_kinds: kinds,
        gt_labels,
        gt_poses: vec![Pose::IDENTITY; n],
        equivalence_classes: (0..n).map(|i| vec![i]).collect(),
        target_orientation: Rotation::IDENTITY,
    }
}

#[test]
fn nonexact_keeps_grid_box_and_quantizes_leg() {
    let grid_box = generate_primitive(&spec(PrimitiveKind::Box, [0.3, 0.2, 0.1]), 400, &mut rng(10)).unwrap();
    // a cylinder-like leg with bounding box 0.04 × 0.04 × 0.43
    let leg = PointCloud::new(
        Shape::Cylinder { radius: 0.02, height: 0.43 }
            .sample_cloud(4000, &mut rng(11))
            .into_iter()
            .chain([[0.02, 0.0, 0.0], [-0.02, 0.0, 0.0], [0.0, 0.02, 0.0], [0.0, -0.02, 0.0]])
            .collect(),
    )
    .unwrap();
    let s = hand_sample(vec![grid_box.clone(), leg.clone(), leg], vec![PrimitiveKind::Box; 3]);
    let out = nonexact_substitute(&s, &mut rng(12)).unwrap();
    assert_eq!(out.variant, Variant::Nonexact);
    assert_eq!(out.parts[0], grid_box);
    let e = out.parts[1].aabb_extents();
    for (k, want) in [0.05, 0.05, 0.45].into_iter().enumerate() {
        assert!((e[k] - want).abs() < 1e-12, "{e:?}");
    }
    assert_eq!(out.gt_labels, s.gt_labels);
    assert_eq!(out.gt_poses, s.gt_poses);
    // the two legs now have identical quantized sizes
    assert_eq!(out.equivalence_classes, vec![vec![0], vec![1, 2]]);
    assert!(nonexact_substitute(&out, &mut rng(0)).is_err());
}

#[test]
fn nonexact_generated_samples_stay_close() {
    let s = generate_assembly(Template::Table4, &mut rng(13), &SampleConfig::DESK, "x").unwrap();
    let n = nonexact_substitute(&s, &mut rng(14)).unwrap();
    assert_eq!(n.equivalence_classes.len(), 2);
    assert!(chamfer_mean(&n.target, &n.gt_assembly()) < 0.01);
}

#[test]
fn augment_identity_and_label_invariance() {
    let s = generate_assembly(Template::Lamp, &mut rng(15), &SMALL, "x").unwrap();
    assert_eq!(rotate_sample(&s, &Rotation::IDENTITY), s);
    let mut r = rng(16);
    for _ in 0..100 {
        let a = augment_rotation(&s, &mut r);
        assert_eq!(a.gt_labels, s.gt_labels);
        assert_eq!(a.parts, s.parts);
        let cd = chamfer_mean(&a.target, &a.gt_assembly());
        assert!(cd < 1.5 * chamfer_mean(&s.target, &s.gt_assembly()) + 1e-9);
    }
}

#[test]
fn augmented_reconstruction_desk_scale() {
    let s = generate_assembly(Template::Chair, &mut rng(17), &SampleConfig::DESK, "x").unwrap();
    let a = augment_rotation(&s, &mut rng(18));
    assert!(chamfer_mean(&a.target, &a.gt_assembly()) < 1e-3);
    let r = random_rotation(&mut rng(18));
    assert_eq!(a.target_orientation, r);
}

fn small_config(count: usize) -> DatasetConfig {
    DatasetConfig {
        templates: vec![Template::Table4, Template::Lamp],
        unseen_templates: vec![Template::Tframe],
        count,
        unseen_count: 2,
        points: SampleConfig { n_target: 300, n_part: 64, oversample: 3 },
        nonexact_fraction: 0.5,
        val_fraction: 0.2,
        test_fraction: 0.2,
        seed: 3,
    }
}

#[test]
fn dataset_splits_are_disjoint_and_cover() {
    let d = generate_dataset(&small_config(10)).unwrap();
    let sp = &d.manifest.splits;
    assert_eq!((sp.train.len(), sp.val.len(), sp.test.len(), sp.unseen.len()), (6, 2, 2, 2));
    let mut all: Vec<&String> = sp.train.iter().chain(&sp.val).chain(&sp.test).chain(&sp.unseen).collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 12);
    assert!(d.split(Split::Unseen).iter().all(|s| s.template == Template::Tframe));
    assert_eq!(d.manifest.census["table4"], 5);
    assert!(d.samples.iter().any(|s| s.variant == Variant::Nonexact));
}

#[test]
fn dataset_round_trip_and_determinism() {
    let d = generate_dataset(&small_config(4)).unwrap();
    let mut a = Vec::new();
    write_dataset(&mut a, &d).unwrap();
    let back = read_dataset(&mut a.as_slice()).unwrap();
    assert_eq!(back, d);
    let mut b = Vec::new();
    write_dataset(&mut b, &generate_dataset(&small_config(4)).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dataset_integrity_errors() {
    let d = generate_dataset(&small_config(2)).unwrap();
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, &d).unwrap();

    let mut flipped = bytes.clone();
    let k = flipped.len() - 100;
    flipped[k] ^= 0x40;
    assert!(matches!(read_dataset(&mut flipped.as_slice()), Err(DataError::Checksum(_))));

    let cut = &bytes[..bytes.len() - 10];
    assert!(matches!(read_dataset(&mut &cut[..]), Err(DataError::Truncated)));

    let mut version = bytes.clone();
    version[8] = 9;
    assert!(matches!(read_dataset(&mut version.as_slice()), Err(DataError::VersionMismatch { found: 9, .. })));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(read_dataset(&mut magic.as_slice()), Err(DataError::BadMagic)));
}

#[test]
fn empty_dataset_round_trip() {
    let cfg = DatasetConfig { count: 0, unseen_count: 0, ..DatasetConfig::default() };
    let d = generate_dataset(&cfg).unwrap();
    assert!(d.samples.is_empty());
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, &d).unwrap();
    let back = read_dataset(&mut bytes.as_slice()).unwrap();
    assert_eq!(back.manifest.sample_count, 0);
    assert_eq!(back, d);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn equivalence_is_a_partition(sizes in prop::collection::vec((0usize..3, 0.5f64..0.6, 1.0f64..1.1), 1..9)) {
        let types = ["a", "b", "c"];
        let parts: Vec<([f64; 3], &str)> = sizes.iter().map(|&(t, x, y)| ([x, y, 1.0], types[t])).collect();
        let classes = equivalence_classes(&parts);
        let mut seen = vec![0usize; parts.len()];
        for c in &classes {
            for &i in c {
                seen[i] += 1;
            }
            // members share a type
            prop_assert!(c.iter().all(|&i| parts[i].1 == parts[c[0]].1));
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        // directly similar parts are never split
        for i in 0..parts.len() {
            for j in 0..parts.len() {
                let close = parts[i].1 == parts[j].1
                    && (0..3).all(|k| {
                        let mut a = parts[i].0; a.sort_by(|x, y| y.total_cmp(x));
                        let mut b = parts[j].0; b.sort_by(|x, y| y.total_cmp(x));
                        (a[k] - b[k]).abs() <= EQUIVALENCE_TOL * a[k].min(b[k])
                    });
                if close {
                    prop_assert!(classes.iter().any(|c| c.contains(&i) && c.contains(&j)));
                }
            }
        }
    }
}
