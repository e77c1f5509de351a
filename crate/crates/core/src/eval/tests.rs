use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::assignment::permutations;
use crate::datagen::{generate_assembly, AssemblySample, SampleConfig, Template, Variant};
use crate::geometry::{chamfer_mean, random_rotation, PointCloud, Pose, Rotation};
use crate::model::{row_argmax, SegmentationResult};
use crate::tensor::Tensor;

fn sample(t: Template, seed: u64) -> AssemblySample {
    generate_assembly(t, &mut ChaCha8Rng::seed_from_u64(seed), &SampleConfig::DESK, "s").unwrap()
}

fn result_from(probs: Tensor) -> SegmentationResult {
    let labels = row_argmax(&probs);
    SegmentationResult { labels, attn_probs: probs.clone(), attn_indices: (0..probs.rows()).collect(), probs }
}

/// Exhaustive maximum over every product of within-class permutations.
fn seg_accuracy_brute(pred: &[usize], gt: &[usize], classes: &[Vec<usize>]) -> f64 {
    let n = classes.iter().flatten().count();
    let mut best = 0usize;
    let per_class: Vec<Vec<Vec<usize>>> = classes.iter().map(|c| permutations(c.len())).collect();
    let mut choice = vec![0usize; classes.len()];
    loop {
        let mut relabel: Vec<usize> = (0..n).collect();
        for (c, class) in classes.iter().enumerate() {
            for (a, &b) in per_class[c][choice[c]].iter().enumerate() {
                relabel[class[a]] = class[b];
            }
        }
        let hits = pred.iter().zip(gt).filter(|(&p, &g)| p == relabel[g]).count();
        best = best.max(hits);
        let mut k = 0;
        loop {
            if k == classes.len() {
                return best as f64 / gt.len() as f64;
            }
            choice[k] += 1;
            if choice[k] < per_class[k].len() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

#[test]
fn seg_accuracy_examples() {
    let classes = vec![vec![0], vec![1, 2]];
    let gt = vec![0, 0, 1, 1, 2, 2];
    assert_eq!(seg_accuracy(&gt, &gt, &classes), 1.0);
    let swapped = vec![0, 0, 2, 2, 1, 1];
    assert_eq!(seg_accuracy(&swapped, &gt, &classes), 1.0);
    // singletons: a swap across classes is not forgiven
    let singles = vec![vec![0], vec![1], vec![2]];
    assert!((seg_accuracy(&swapped, &gt, &singles) - 2.0 / 6.0).abs() < 1e-15);
}

#[test]
fn seg_accuracy_hand_constructed_seven_of_ten() {
    // parts 1 and 2 are interchangeable; the best relabeling swaps them
    let classes = vec![vec![0], vec![1, 2]];
    let gt = vec![0, 0, 0, 1, 1, 1, 1, 2, 2, 2];
    let pred = vec![0, 0, 1, 2, 2, 2, 0, 1, 1, 0];
    // swap: gt 1 → 2 matches 3 points, gt 2 → 1 matches 2, part 0 matches 2
    assert!((seg_accuracy(&pred, &gt, &classes) - 0.7).abs() < 1e-15);
    assert!((seg_accuracy_brute(&pred, &gt, &classes) - 0.7).abs() < 1e-15);
}

#[test]
fn seg_accuracy_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..200 {
        let classes = vec![vec![0, 3], vec![1], vec![2, 4, 5]];
        let gt: Vec<usize> = (0..40).map(|_| rng.gen_range(0..6)).collect();
        let pred: Vec<usize> = (0..40).map(|_| rng.gen_range(0..6)).collect();
        assert_eq!(seg_accuracy(&pred, &gt, &classes), seg_accuracy_brute(&pred, &gt, &classes));
    }
}

proptest! {
    #[test]
    fn seg_accuracy_invariant_under_within_class_relabeling(
        gt in proptest::collection::vec(0usize..5, 1..60),
        pred in proptest::collection::vec(0usize..5, 60),
        pick in 0usize..6,
    ) {
        let pred = &pred[..gt.len()];
        let classes = vec![vec![0, 2, 4], vec![1], vec![3]];
        let perm = &permutations(3)[pick];
        let mut relabel = [0, 1, 2, 3, 4];
        for (a, &b) in perm.iter().enumerate() {
            relabel[classes[0][a]] = classes[0][b];
        }
        let moved: Vec<usize> = pred.iter().map(|&p| relabel[p]).collect();
        prop_assert_eq!(seg_accuracy(pred, &gt, &classes), seg_accuracy(&moved, &gt, &classes));
    }
}

#[test]
fn segments_single_part_whole_target() {
    let r = result_from(Tensor::matrix(7, 1, vec![1.0; 7]));
    let s = segments_from_result(&r, 5).unwrap();
    assert_eq!(s.indices, vec![(0..7).collect::<Vec<_>>()]);
}

#[test]
fn segments_partition_random_probs() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..20 {
        let (n, m) = (200, 5);
        let mut data: Vec<f64> = (0..n * m).map(|_| rng.gen::<f64>()).collect();
        for row in data.chunks_mut(m) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let r = result_from(Tensor::matrix(n, m, data));
        let s = segments_from_result(&r, 5).unwrap();
        let mut all: Vec<usize> = s.indices.concat();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        for (i, idx) in s.indices.iter().enumerate() {
            assert!(idx.iter().all(|&t| s.labels[t] == i));
        }
    }
}

#[test]
fn segments_stray_points_reassigned_to_runner_up() {
    // 20 points to part 0, 3 stray points to part 2 with part 1 second best
    let mut data = Vec::new();
    for _ in 0..20 {
        data.extend([0.8, 0.1, 0.1]);
    }
    for _ in 0..3 {
        data.extend([0.2, 0.3, 0.5]);
    }
    for _ in 0..6 {
        data.extend([0.1, 0.8, 0.1]);
    }
    let r = result_from(Tensor::matrix(29, 3, data));
    assert_eq!(r.labels[20..23], [2, 2, 2]);
    let s = segments_from_result(&r, 5).unwrap();
    assert!(!s.is_used(2));
    assert_eq!(s.indices[1], (20..29).collect::<Vec<_>>());
    assert_eq!(s.indices[0], (0..20).collect::<Vec<_>>());
}

#[test]
fn segments_all_small_is_degenerate() {
    let r = result_from(Tensor::matrix(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]));
    assert!(matches!(segments_from_result(&r, 5), Err(EvalError::Degenerate(_))));
}

fn parts_and_poses(n: usize, seed: u64) -> (Vec<PointCloud>, Vec<Pose>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = PointCloud::new((0..60).map(|_| [rng.gen_range(-0.05..0.05), rng.gen_range(-0.02..0.02), rng.gen_range(-0.2..0.2)]).collect()).unwrap();
    let parts = vec![base; n];
    let poses = (0..n).map(|i| Pose::new(random_rotation(&mut rng), [i as f64 * 0.3, 0.0, 0.0])).collect();
    (parts, poses)
}

#[test]
fn part_accuracy_examples() {
    let (parts, gt) = parts_and_poses(5, 42);
    let singles: Vec<Vec<usize>> = (0..5).map(|i| vec![i]).collect();
    let pred: Vec<Option<Pose>> = gt.iter().copied().map(Some).collect();
    assert_eq!(part_accuracy(&pred, &gt, &parts, &singles, DEFAULT_TAU), 1.0);

    // equivalent legs swapped
    let legs = vec![vec![0, 1, 2, 3, 4]];
    let mut swapped = pred.clone();
    swapped.swap(1, 3);
    assert_eq!(part_accuracy(&swapped, &gt, &parts, &legs, DEFAULT_TAU), 1.0);
    assert_eq!(part_accuracy(&swapped, &gt, &parts, &singles, DEFAULT_TAU), 0.6);

    // one part displaced by half a unit
    let mut moved = pred.clone();
    let q = gt[2];
    moved[2] = Some(Pose::new(q.rotation, [q.translation[0], q.translation[1] + 0.5, q.translation[2]]));
    assert!((part_accuracy(&moved, &gt, &parts, &singles, DEFAULT_TAU) - 0.8).abs() < 1e-15);
    assert!((part_accuracy(&moved, &gt, &parts, &legs, DEFAULT_TAU) - 0.8).abs() < 1e-15);

    // unused parts are misses
    let mut unused = pred;
    unused[4] = None;
    assert!((part_accuracy(&unused, &gt, &parts, &singles, DEFAULT_TAU) - 0.8).abs() < 1e-15);
}

#[test]
fn part_accuracy_invariant_under_gt_permutation_within_class() {
    let (parts, gt) = parts_and_poses(4, 43);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let classes = vec![vec![0, 2, 3], vec![1]];
    for _ in 0..30 {
        let pred: Vec<Option<Pose>> = gt
            .iter()
            .map(|q| match rng.gen_range(0..3) {
                0 => None,
                1 => Some(*q),
                _ => Some(Pose::new(random_rotation(&mut rng), q.translation)),
            })
            .collect();
        let base = part_accuracy(&pred, &gt, &parts, &classes, DEFAULT_TAU);
        for p in permutations(3) {
            let mut g = gt.clone();
            for (a, &b) in p.iter().enumerate() {
                g[classes[0][a]] = gt[classes[0][b]];
            }
            assert_eq!(part_accuracy(&pred, &g, &parts, &classes, DEFAULT_TAU), base);
        }
    }
}

#[test]
fn chamfer_report_examples() {
    let s = sample(Template::Table4, 45);
    assert_eq!(chamfer_report(&s.target, &s.target), ChamferReport { cd_permille: 0.0, cd_raw: 0.0 });
    let perfect = chamfer_report(&s.target, &s.gt_assembly());
    assert!(perfect.cd_permille <= 1.0, "{perfect:?}");
    assert!(perfect.cd_raw > perfect.cd_permille / 1000.0);
}

#[test]
fn chamfer_report_density_stable() {
    // the same surfaces at two densities give comparable per-mille values
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let lo = SampleConfig { n_target: 1280, n_part: 256, oversample: 4 };
    let hi = SampleConfig { n_target: 2560, n_part: 512, oversample: 4 };
    let a = generate_assembly(Template::Lamp, &mut rng.clone(), &lo, "a").unwrap();
    let b = generate_assembly(Template::Lamp, &mut rng, &hi, "b").unwrap();
    let shift = Pose::new(Rotation::IDENTITY, [0.02, 0.0, 0.0]);
    let ra = chamfer_report(&a.target, &a.target.transformed(&shift));
    let rb = chamfer_report(&b.target, &b.target.transformed(&shift));
    let ratio = ra.cd_permille / rb.cd_permille;
    assert!((0.5..2.0).contains(&ratio), "{ra:?} {rb:?}");
    // the raw sum scales with density
    assert!(rb.cd_raw / ra.cd_raw > 1.2, "{ra:?} {rb:?}");
}

#[test]
fn assemble_ground_truth_round_trip() {
    for t in Template::ALL {
        let s = sample(t, 47);
        let a = assemble(&s, &oracle_result(&s)).unwrap();
        for (i, q) in a.poses.iter().enumerate() {
            let seg = s.target.select(&s.gt_segment_indices(i)).unwrap();
            let placed = s.parts[i].transformed(q.as_ref().unwrap());
            let d = chamfer_mean(&placed, &seg);
            assert!(d <= 1e-3, "{t}: part {i} chamfer {d}");
        }
        assert_eq!(part_accuracy(&a.poses, &s.gt_poses, &s.parts, &s.equivalence_classes, DEFAULT_TAU), 1.0, "{t}");
        assert_eq!(a, assemble(&s, &oracle_result(&s)).unwrap());
    }
}

#[test]
fn assemble_single_part() {
    let mut s = sample(Template::Lamp, 48);
    s.parts.truncate(1);
    s.part_types.truncate(1);
    s.part_kinds.truncate(1);
    s.gt_poses.truncate(1);
    s.equivalence_classes = vec![vec![0]];
    s.gt_labels = vec![0; s.target.len()];
    let a = assemble(&s, &oracle_result(&s)).unwrap();
    let want = crate::geometry::estimate_pose(&s.parts[0], Some(&s.target)).unwrap();
    assert_eq!(a.poses, vec![Some(want)]);
    assert_eq!(a.assembled, s.parts[0].transformed(&want));
}

#[test]
fn assemble_rejects_mismatched_result() {
    let s = sample(Template::Lamp, 49);
    let r = result_from(Tensor::matrix(3, 1, vec![1.0; 3]));
    assert!(matches!(assemble(&s, &r), Err(EvalError::Mismatch(_))));
}

#[test]
fn regime_parsing() {
    assert_eq!(Regime::parse_list("").unwrap(), Regime::ALL.to_vec());
    assert_eq!(
        Regime::parse_list("random-pose,nonexact").unwrap(),
        vec![Regime { pose: PoseRegime::RandomPose, variant: Variant::Nonexact }]
    );
    assert_eq!(Regime::parse_list("canonical").unwrap().len(), 2);
    assert!(Regime::parse_list("sideways").is_err());
    assert_eq!(Regime::ALL[3].to_string(), "random-pose/nonexact");
}

#[test]
fn oracle_evaluation_is_perfect_on_exact_samples() {
    let samples: Vec<AssemblySample> = Template::ALL.iter().map(|&t| sample(t, 50)).collect();
    let refs: Vec<&AssemblySample> = samples.iter().collect();
    let config = EvalConfig {
        regimes: Regime::parse_list("exact").unwrap(),
        oracle: true,
        seed: 3,
        ..EvalConfig::default()
    };
    let report = evaluate(&refs, None, &config).unwrap();
    assert_eq!(report.rows.len(), 12);
    for r in &report.rows {
        assert_eq!(r.part_accuracy, 1.0, "{r:?}");
        assert!(r.success);
        assert_eq!(r.seg_accuracy, 1.0);
    }
    assert_eq!(report.overall.success_rate, 1.0);
    let mean_pa = report.rows.iter().map(|r| r.part_accuracy).sum::<f64>() / report.rows.len() as f64;
    assert!((report.overall.part_accuracy - mean_pa).abs() < 1e-12);
    assert_eq!(report, evaluate(&refs, None, &config).unwrap());
}

#[test]
fn nonexact_regime_rows_and_bookkeeping() {
    let samples: Vec<AssemblySample> = [Template::Table4, Template::Shelf].iter().map(|&t| sample(t, 51)).collect();
    let refs: Vec<&AssemblySample> = samples.iter().collect();
    let config = EvalConfig { oracle: true, seed: 4, ..EvalConfig::default() };
    let report = evaluate(&refs, None, &config).unwrap();
    assert_eq!(report.rows.len(), 8);
    assert_eq!(report.by_regime.len(), 4);
    assert_eq!(report.by_group.len(), 8);
    for r in &report.rows {
        assert_eq!(r.success, r.part_accuracy == 1.0);
    }
    for (key, agg) in &report.by_regime {
        let rows: Vec<&SampleRow> =
            report.rows.iter().filter(|r| Regime { pose: r.pose, variant: r.variant }.to_string() == *key).collect();
        assert_eq!(*agg, Aggregate::of(rows));
    }
    let mut json = Vec::new();
    report.write_json(&mut json).unwrap();
    let back: MetricsReport = serde_json::from_slice(&json).unwrap();
    assert_eq!(back, report);
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 9);
}

#[test]
fn nonexact_sample_has_no_exact_regime() {
    let s = crate::datagen::nonexact_substitute(&sample(Template::Stool, 52), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let exact = Regime { pose: PoseRegime::Canonical, variant: Variant::Exact };
    assert!(regime_sample(&s, 0, exact, 0).unwrap().is_none());
    let rot = Regime { pose: PoseRegime::RandomPose, variant: Variant::Nonexact };
    let r = regime_sample(&s, 0, rot, 0).unwrap().unwrap();
    assert_eq!(r.parts, s.parts);
    assert_ne!(r.target, s.target);
}

#[test]
fn empty_split_gives_empty_report() {
    let config = EvalConfig { oracle: true, ..EvalConfig::default() };
    let report = evaluate(&[], None, &config).unwrap();
    assert!(report.rows.is_empty());
    assert_eq!(report.overall, Aggregate::default());
}

#[test]
fn evaluate_without_model_requires_oracle() {
    assert!(matches!(evaluate(&[], None, &EvalConfig::default()), Err(EvalError::Mismatch(_))));
}

fn row(seg: f64, pa: f64) -> SampleRow {
    SampleRow {
        sample_id: "x".into(),
        template: "t".into(),
        pose: PoseRegime::Canonical,
        variant: Variant::Exact,
        seg_accuracy: seg,
        part_accuracy: pa,
        success: pa == 1.0,
        cd_permille: 0.0,
        cd_raw: 0.0,
        used_parts: 1,
        num_parts: 1,
    }
}

#[test]
fn bottleneck_curve_flat_when_perfect() {
    let curve = bottleneck_curve(&[row(1.0, 1.0), row(1.0, 1.0)]);
    assert_eq!(curve.len(), 21);
    for p in &curve {
        assert_eq!((p.count, p.success_rate, p.part_accuracy), (2, Some(1.0), Some(1.0)));
    }
}

#[test]
fn bottleneck_curve_two_sample_partition() {
    let curve = bottleneck_curve(&[row(0.42, 0.25), row(0.9, 1.0)]);
    // thresholds up to 0.40 include both samples
    for p in &curve[..=8] {
        assert_eq!(p.count, 2);
        assert_eq!(p.part_accuracy, Some(0.625));
        assert_eq!(p.success_rate, Some(0.5));
    }
    for p in &curve[9..=18] {
        assert_eq!(p.count, 1);
        assert_eq!(p.part_accuracy, Some(1.0));
    }
    for p in &curve[19..] {
        assert_eq!((p.count, p.part_accuracy), (0, None));
    }
    let mut csv = Vec::new();
    write_curve_csv(&mut csv, &curve).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("0,2,0.5,0.625"));
    assert!(text.lines().last().unwrap().ends_with("1,0,,"));
}

#[test]
fn ply_export_writes_both_files() {
    let s = sample(Template::Lamp, 53);
    let config = EvalConfig { oracle: true, ..EvalConfig::default() };
    let regime = Regime::ALL[0];
    let outcome = evaluate_sample(s, regime, None, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_outcome_ply(dir.path(), "lamp", &outcome, &outcome.result.labels).unwrap();
    let target = std::fs::read_to_string(dir.path().join("lamp_target.ply")).unwrap();
    assert!(target.contains(&format!("element vertex {}", outcome.sample.target.len())));
    let assembled = std::fs::read_to_string(dir.path().join("lamp_assembly.ply")).unwrap();
    assert!(assembled.contains(&format!("element vertex {}", outcome.assembly.assembled.len())));
}
