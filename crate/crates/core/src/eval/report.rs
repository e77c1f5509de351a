//! Dataset-level evaluation across pose and part regimes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::assembly::{assemble_segments, oracle_result, segments_from_result, Assembly, DEFAULT_MIN_POINTS};
use super::metrics::{chamfer_report, match_parts, seg_accuracy, DEFAULT_TAU};
use super::EvalError;
use crate::datagen::{augment_rotation, nonexact_substitute, sample_rng, AssemblySample, Variant};
use crate::geometry::ply::{label_color, write_ply, Rgb};
use crate::geometry::PointCloud;
use crate::model::{Model, SegmentationResult};

/// Salt separating the rotation stream from the substitution stream.
const ROTATION_SALT: u64 = 0x5eed_0f_a0_7a7e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseRegime {
    Canonical,
    RandomPose,
}

impl PoseRegime {
    pub fn name(self) -> &'static str {
        match self {
            PoseRegime::Canonical => "canonical",
            PoseRegime::RandomPose => "random-pose",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Regime {
    pub pose: PoseRegime,
    pub variant: Variant,
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Exact => "exact",
        Variant::Nonexact => "nonexact",
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.pose.name(), variant_name(self.variant))
    }
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime { pose: PoseRegime::Canonical, variant: Variant::Exact },
        Regime { pose: PoseRegime::Canonical, variant: Variant::Nonexact },
        Regime { pose: PoseRegime::RandomPose, variant: Variant::Exact },
        Regime { pose: PoseRegime::RandomPose, variant: Variant::Nonexact },
    ];

    /// Parses a comma list of pose tokens (`canonical`, `random-pose`) and
    /// part tokens (`exact`, `nonexact`) into their cross product. A missing
    /// dimension means both of its values.
    pub fn parse_list(s: &str) -> Result<Vec<Regime>, String> {
        let mut poses = Vec::new();
        let mut variants = Vec::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "canonical" => poses.push(PoseRegime::Canonical),
                "random-pose" => poses.push(PoseRegime::RandomPose),
                "exact" => variants.push(Variant::Exact),
                "nonexact" => variants.push(Variant::Nonexact),
                _ => return Err(format!("unknown regime token '{tok}' (canonical, random-pose, exact, nonexact)")),
            }
        }
        if poses.is_empty() {
            poses = vec![PoseRegime::Canonical, PoseRegime::RandomPose];
        }
        if variants.is_empty() {
            variants = vec![Variant::Exact, Variant::Nonexact];
        }
        let mut out = Vec::new();
        for r in Regime::ALL {
            if poses.contains(&r.pose) && variants.contains(&r.variant) {
                out.push(r);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub regimes: Vec<Regime>,
    pub tau: f64,
    pub min_points: usize,
    /// Use ground-truth labels instead of the model.
    pub oracle: bool,
    /// Seeds random poses and non-exact substitutes.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { regimes: Regime::ALL.to_vec(), tau: DEFAULT_TAU, min_points: DEFAULT_MIN_POINTS, oracle: false, seed: 0 }
    }
}

/// Scores of one sample under one regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_id: String,
    pub template: String,
    pub pose: PoseRegime,
    pub variant: Variant,
    pub seg_accuracy: f64,
    pub part_accuracy: f64,
    pub success: bool,
    pub cd_permille: f64,
    pub cd_raw: f64,
    pub used_parts: usize,
    pub num_parts: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub seg_accuracy: f64,
    pub part_accuracy: f64,
    pub success_rate: f64,
    pub cd_permille: f64,
    pub cd_raw: f64,
}

impl Aggregate {
    /// Means over `rows`, summed in row order.
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a SampleRow>) -> Aggregate {
        let mut a = Aggregate::default();
        for r in rows {
            a.count += 1;
            a.seg_accuracy += r.seg_accuracy;
            a.part_accuracy += r.part_accuracy;
            a.success_rate += if r.success { 1.0 } else { 0.0 };
            a.cd_permille += r.cd_permille;
            a.cd_raw += r.cd_raw;
        }
        if a.count > 0 {
            let n = a.count as f64;
            a.seg_accuracy /= n;
            a.part_accuracy /= n;
            a.success_rate /= n;
            a.cd_permille /= n;
            a.cd_raw /= n;
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: EvalConfig,
    pub rows: Vec<SampleRow>,
    pub overall: Aggregate,
    /// Keyed by `pose/variant`.
    pub by_regime: BTreeMap<String, Aggregate>,
    /// Keyed by `template/pose/variant`.
    pub by_group: BTreeMap<String, Aggregate>,
}

impl MetricsReport {
    pub fn from_rows(config: EvalConfig, rows: Vec<SampleRow>) -> Self {
        let mut regime_rows: BTreeMap<String, Vec<&SampleRow>> = BTreeMap::new();
        let mut group_rows: BTreeMap<String, Vec<&SampleRow>> = BTreeMap::new();
        for r in &rows {
            let regime = Regime { pose: r.pose, variant: r.variant }.to_string();
            group_rows.entry(format!("{}/{regime}", r.template)).or_default().push(r);
            regime_rows.entry(regime).or_default().push(r);
        }
        let by_regime = regime_rows.into_iter().map(|(k, v)| (k, Aggregate::of(v))).collect();
        let by_group = group_rows.into_iter().map(|(k, v)| (k, Aggregate::of(v))).collect();
        let overall = Aggregate::of(&rows);
        MetricsReport { config, rows, overall, by_regime, by_group }
    }

    pub fn regime(&self, regime: Regime) -> Option<&Aggregate> {
        self.by_regime.get(&regime.to_string())
    }

    pub fn write_json<W: Write>(&self, out: &mut W) -> io::Result<()> {
        serde_json::to_writer_pretty(&mut *out, self)?;
        writeln!(out)
    }

    /// One line per sample row.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "sample_id,template,pose,variant,seg_accuracy,part_accuracy,success,cd_permille,cd_raw,used_parts,num_parts")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.sample_id,
                r.template,
                r.pose.name(),
                variant_name(r.variant),
                r.seg_accuracy,
                r.part_accuracy,
                r.success,
                r.cd_permille,
                r.cd_raw,
                r.used_parts,
                r.num_parts
            )?;
        }
        Ok(())
    }
}

/// Everything computed for one sample in one regime.
#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub sample: AssemblySample,
    pub result: SegmentationResult,
    pub assembly: Assembly,
    pub row: SampleRow,
}

/// The sample as seen under `regime`, or `None` if it cannot be expressed
/// (a non-exact sample has no exact version).
pub fn regime_sample(sample: &AssemblySample, index: usize, regime: Regime, seed: u64) -> Result<Option<AssemblySample>, EvalError> {
    let base = match (sample.variant, regime.variant) {
        (Variant::Exact, Variant::Nonexact) => nonexact_substitute(sample, &mut sample_rng(seed, index as u64))?,
        (Variant::Nonexact, Variant::Exact) => return Ok(None),
        _ => sample.clone(),
    };
    Ok(Some(match regime.pose {
        PoseRegime::Canonical => base,
        PoseRegime::RandomPose => augment_rotation(&base, &mut sample_rng(seed ^ ROTATION_SALT, index as u64)),
    }))
}

/// Segments, assembles and scores one prepared sample.
pub fn evaluate_sample(
    sample: AssemblySample,
    regime: Regime,
    model: Option<&Model>,
    config: &EvalConfig,
) -> Result<SampleOutcome, EvalError> {
    let result = match model {
        Some(m) if !config.oracle => m.forward(&sample.target, &sample.parts)?,
        _ => oracle_result(&sample),
    };
    let segments = segments_from_result(&result, config.min_points)?;
    let assembly = assemble_segments(&sample, &segments)?;
    let pm = match_parts(&assembly.poses, &sample.gt_poses, &sample.parts, &sample.equivalence_classes, config.tau);
    let cd = chamfer_report(&sample.target, &assembly.assembled);
    let part_accuracy = pm.accuracy();
    let row = SampleRow {
        sample_id: sample.sample_id.clone(),
        template: sample.template.to_string(),
        pose: regime.pose,
        variant: regime.variant,
        seg_accuracy: seg_accuracy(&result.labels, &sample.gt_labels, &sample.equivalence_classes),
        part_accuracy,
        success: part_accuracy == 1.0,
        cd_permille: cd.cd_permille,
        cd_raw: cd.cd_raw,
        used_parts: assembly.used_parts(),
        num_parts: sample.num_parts(),
    };
    Ok(SampleOutcome { sample, result, assembly, row })
}

/// Evaluates every sample under every configured regime. Without a model,
/// or with `config.oracle`, ground-truth labels stand in for predictions.
pub fn evaluate(samples: &[&AssemblySample], model: Option<&Model>, config: &EvalConfig) -> Result<MetricsReport, EvalError> {
    let rows = evaluate_with(samples, model, config, |_| Ok(()))?;
    Ok(MetricsReport::from_rows(config.clone(), rows))
}

/// [`evaluate`] that hands each outcome to `inspect` (e.g. for PLY export)
/// and returns the rows in (sample, regime) order.
pub fn evaluate_with<F>(
    samples: &[&AssemblySample],
    model: Option<&Model>,
    config: &EvalConfig,
    inspect: F,
) -> Result<Vec<SampleRow>, EvalError>
where
    F: Fn(&SampleOutcome) -> Result<(), EvalError> + Sync,
{
    if model.is_none() && !config.oracle {
        return Err(EvalError::Mismatch("no model given and oracle mode is off".into()));
    }
    let jobs: Vec<(usize, Regime)> =
        (0..samples.len()).flat_map(|i| config.regimes.iter().map(move |&r| (i, r))).collect();
    let rows: Vec<Option<SampleRow>> = jobs
        .par_iter()
        .map(|&(i, regime)| {
            let Some(s) = regime_sample(samples[i], i, regime, config.seed)? else { return Ok(None) };
            let outcome = evaluate_sample(s, regime, model, config)?;
            inspect(&outcome)?;
            Ok(Some(outcome.row))
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Mean success rate and part accuracy over samples whose segmentation
/// accuracy is at least `threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub count: usize,
    pub success_rate: Option<f64>,
    pub part_accuracy: Option<f64>,
}

/// Thresholds 0, 0.05, …, 1.
pub fn bottleneck_curve(rows: &[SampleRow]) -> Vec<CurvePoint> {
    (0..=20)
        .map(|k| {
            let threshold = k as f64 / 20.0;
            let agg = Aggregate::of(rows.iter().filter(|r| r.seg_accuracy >= threshold));
            let some = |v: f64| (agg.count > 0).then_some(v);
            CurvePoint {
                threshold,
                count: agg.count,
                success_rate: some(agg.success_rate),
                part_accuracy: some(agg.part_accuracy),
            }
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(out: &mut W, curve: &[CurvePoint]) -> io::Result<()> {
    writeln!(out, "min_seg_accuracy,count,success_rate,part_accuracy")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for p in curve {
        writeln!(out, "{},{},{},{}", p.threshold, p.count, opt(p.success_rate), opt(p.part_accuracy))?;
    }
    Ok(())
}

/// Writes `{stem}_target.ply` (target colored by predicted segment) and
/// `{stem}_assembly.ply` (placed parts colored by part) into `dir`.
pub fn export_outcome_ply(dir: &Path, stem: &str, outcome: &SampleOutcome, labels: &[usize]) -> io::Result<()> {
    let colors: Vec<Rgb> = labels.iter().map(|&l| label_color(l)).collect();
    let mut f = io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}_target.ply")))?);
    write_ply(&mut f, &outcome.sample.target, Some(&colors))?;
    f.flush()?;
    let mut placed = Vec::new();
    let mut part_colors = Vec::new();
    for (i, (part, pose)) in outcome.sample.parts.iter().zip(&outcome.assembly.poses).enumerate() {
        if let Some(q) = pose {
            placed.push(part.transformed(q));
            part_colors.extend(std::iter::repeat(label_color(i)).take(part.len()));
        }
    }
    let assembled = PointCloud::union(&placed).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let mut f = io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}_assembly.ply")))?);
    write_ply(&mut f, &assembled, Some(&part_colors))?;
    f.flush()
}
