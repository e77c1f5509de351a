//! Finite-difference check of the full loss gradient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_on_tape, min_relabeling, DEFAULT_PERMUTATION_CAP};
use super::TrainError;
use crate::geometry::linalg::{self, Vec3};
use crate::geometry::PointCloud;
use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamId, Tape};

pub const FD_STEP: f64 = 1e-5;
/// A check passes when every coordinate's relative error is below this.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Smaller steps tried when the loss has a kink within `FD_STEP`.
pub const KINK_STEPS: [f64; 2] = [1e-6, 1e-7];
/// One-sided differences disagreeing by more than this (relatively) mark a kink.
pub const KINK_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;
/// Minimum number of coordinates checked per case.
pub const MIN_COORDS: usize = 200;

/// A fixed input on which the gradient is checked.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub target: PointCloud,
    pub parts: Vec<PointCloud>,
    pub gt_labels: Vec<usize>,
    pub classes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub case: usize,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// Step of the reported central difference.
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

fn random_cloud(rng: &mut impl Rng, n: usize, center: Vec3, s: f64) -> PointCloud {
    PointCloud::new((0..n).map(|_| std::array::from_fn(|k| center[k] + rng.gen_range(-s..s))).collect()).expect("non-empty")
}

/// Three parts and a target labeled by the nearest of three anchors, under
/// the class layouts all-distinct, one pair, and all-equivalent.
pub fn default_cases(n_attn: usize, seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_target = (2 * n_attn).max(16);
    let anchors: Vec<Vec3> = (0..3).map(|_| std::array::from_fn(|_| rng.gen_range(-0.4..0.4))).collect();
    let target = random_cloud(&mut rng, n_target, [0.0; 3], 0.5);
    let gt_labels = target
        .points()
        .iter()
        .map(|&p| {
            (0..3)
                .min_by(|&a, &b| linalg::dist2(p, anchors[a]).total_cmp(&linalg::dist2(p, anchors[b])))
                .expect("three anchors")
        })
        .collect::<Vec<_>>();
    let parts: Vec<PointCloud> = (0..3).map(|i| random_cloud(&mut rng, 24, [0.0; 3], 0.1 + 0.05 * i as f64)).collect();
    [vec![vec![0], vec![1], vec![2]], vec![vec![0, 1], vec![2]], vec![vec![0, 1, 2]]]
        .into_iter()
        .map(|classes| GradCase { target: target.clone(), parts: parts.clone(), gt_labels: gt_labels.clone(), classes })
        .collect()
}

fn case_loss(model: &Model, case: &GradCase) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let fv = model.forward_tape(&mut tape, &case.target, &case.parts)?;
    let gt: Vec<usize> = fv.attn_indices.iter().map(|&i| case.gt_labels[i]).collect();
    Ok(min_relabeling(tape.value(fv.log_probs), &gt, &case.classes, DEFAULT_PERMUTATION_CAP).0)
}

/// Coordinates to check: one random entry of every parameter tensor, then
/// random entries until at least `min` are chosen (or all, if fewer exist).
fn choose_coords(model: &Model, min: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> =
        model.params.iter().enumerate().flat_map(|(p, t)| (0..t.value.numel()).map(move |k| (p, k))).collect();
    if all.len() <= min {
        return all;
    }
    let mut chosen: Vec<(usize, usize)> =
        model.params.iter().enumerate().map(|(p, t)| (p, rng.gen_range(0..t.value.numel()))).collect();
    let mut rest: Vec<(usize, usize)> = all.into_iter().filter(|c| !chosen.contains(c)).collect();
    rest.shuffle(rng);
    let need = min.saturating_sub(chosen.len());
    chosen.extend(rest.into_iter().take(need));
    chosen.sort_unstable();
    chosen
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Central difference of coordinate `k`, and whether the one-sided
/// differences disagree.
fn differences(
    model: &mut Model,
    case: &GradCase,
    id: ParamId,
    k: usize,
    base: f64,
    h: f64,
) -> Result<(f64, bool), TrainError> {
    let orig = model.params.get(id).value.data()[k];
    model.params.get_mut(id).value.data_mut()[k] = orig + h;
    let up = case_loss(model, case);
    model.params.get_mut(id).value.data_mut()[k] = orig - h;
    let down = case_loss(model, case);
    model.params.get_mut(id).value.data_mut()[k] = orig;
    let (up, down) = (up?, down?);
    let (fwd, bwd) = ((up - base) / h, (base - down) / h);
    Ok(((up - down) / (2.0 * h), relative_error(fwd, bwd) > KINK_TOL))
}

/// Compares analytic gradients with central differences on every case.
/// Relative error is `|a − n| / max(|a|, |n|, REL_FLOOR)`. Where the
/// one-sided differences reveal a kink within the step, the central
/// difference is repeated with the smaller [`KINK_STEPS`].
pub fn grad_check_model(model: &mut Model, cases: &[GradCase], seed: u64) -> Result<GradCheckReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4644);
    let ids: Vec<_> = model.params.ids().collect();
    let mut coords = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        let mut tape = Tape::new();
        let fv = model.forward_tape(&mut tape, &case.target, &case.parts)?;
        let gt: Vec<usize> = fv.attn_indices.iter().map(|&i| case.gt_labels[i]).collect();
        let (loss, _) = loss_on_tape(&mut tape, fv.log_probs, &gt, &case.classes, DEFAULT_PERMUTATION_CAP)?;
        let grads = tape.backward(loss)?;
        let mut analytic: Vec<Option<&[f64]>> = vec![None; ids.len()];
        for (id, g) in grads.params() {
            analytic[id.0] = Some(g);
        }
        for (p, k) in choose_coords(model, MIN_COORDS, &mut rng) {
            let id = ids[p];
            let a = analytic[p].map_or(0.0, |g| g[k]);
            let base = case_loss(model, case)?;
            let mut step = FD_STEP;
            let (mut numeric, kink) = differences(model, case, id, k, base, step)?;
            let mut rel_err = relative_error(a, numeric);
            // ReLU and max-pool switches make the loss piecewise smooth; a
            // switch inside the step shows up as disagreeing one-sided slopes
            if kink {
                for h in KINK_STEPS {
                    if rel_err < GRAD_TOLERANCE {
                        break;
                    }
                    step = h;
                    numeric = differences(model, case, id, k, base, h)?.0;
                    rel_err = relative_error(a, numeric);
                }
            }
            coords.push(CoordCheck {
                case: ci,
                param: model.params.get(id).name.clone(),
                index: k,
                analytic: a,
                numeric,
                rel_err,
                step,
            });
        }
    }
    let max_rel_err = coords.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, checked: coords.len(), coords })
}

/// Gradient check of a freshly initialized model on [`default_cases`].
pub fn grad_check(model_config: &ModelConfig, seed: u64) -> Result<GradCheckReport, TrainError> {
    let mut model = Model::new(ModelConfig { init_seed: seed, ..model_config.clone() })?;
    let cases = default_cases(model.config.n_attn, seed);
    grad_check_model(&mut model, &cases, seed)
}
