//! Negative log-likelihood minimized over relabelings of interchangeable parts.

use crate::assignment::{hungarian, permutations};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Classes up to this size are searched exhaustively by default.
pub const DEFAULT_PERMUTATION_CAP: usize = 6;

/// `C[i][j] = −Σ_{t: gt[t]=i} lp[t, j]`, row-major `N × N`.
pub fn class_cost(log_probs: &Tensor, gt: &[usize]) -> Vec<f64> {
    let n = log_probs.cols();
    let mut c = vec![0.0; n * n];
    for (t, &g) in gt.iter().enumerate() {
        for (j, &lp) in log_probs.row(t).iter().enumerate() {
            c[g * n + j] -= lp;
        }
    }
    c
}

/// Best within-class bijection for one class, as positions into `class`.
fn best_class_assignment(cost: &[f64], n: usize, class: &[usize], cap: usize) -> Vec<usize> {
    let s = class.len();
    let sub: Vec<f64> = class.iter().flat_map(|&i| class.iter().map(move |&j| cost[i * n + j])).collect();
    if s <= cap {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for p in permutations(s) {
            let c: f64 = p.iter().enumerate().map(|(a, &b)| sub[a * s + b]).sum();
            if best.as_ref().map_or(true, |(b, _)| c < *b) {
                best = Some((c, p));
            }
        }
        best.expect("class is non-empty").1
    } else {
        hungarian(&sub, s)
    }
}

/// The relabeling `σ` (ground-truth label `i` ↦ part `σ[i]`) minimizing the
/// loss, and that loss. Classes larger than `cap` use the assignment solver,
/// which is exact because the cost separates over labels.
pub fn min_relabeling(log_probs: &Tensor, gt: &[usize], classes: &[Vec<usize>], cap: usize) -> (f64, Vec<usize>) {
    let n = log_probs.cols();
    let cost = class_cost(log_probs, gt);
    let mut sigma: Vec<usize> = (0..n).collect();
    if cost.iter().any(|c| !c.is_finite()) {
        // nothing to minimize; the caller sees the non-finite loss
        return (relabeled_nll(log_probs, gt, &sigma), sigma);
    }
    for class in classes {
        let a = best_class_assignment(&cost, n, class, cap.max(1));
        for (pos, &b) in a.iter().enumerate() {
            sigma[class[pos]] = class[b];
        }
    }
    (relabeled_nll(log_probs, gt, &sigma), sigma)
}

/// `−(1/n) Σ_t lp[t, σ(gt[t])]`, summed in point order.
pub fn relabeled_nll(log_probs: &Tensor, gt: &[usize], sigma: &[usize]) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let s: f64 = gt.iter().enumerate().map(|(t, &g)| log_probs.at(t, sigma[g])).sum();
    -s / gt.len() as f64
}

/// [`min_relabeling`] on probabilities. Zero probabilities are floored at the
/// smallest positive double so costs stay finite.
pub fn permutation_min_loss(probs: &Tensor, gt: &[usize], classes: &[Vec<usize>], cap: usize) -> (f64, Vec<usize>) {
    let lp = Tensor::new(probs.shape().to_vec(), probs.data().iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect())
        .expect("same shape");
    min_relabeling(&lp, gt, classes, cap)
}

/// Records the loss on `tape`. The relabeling is chosen on the current
/// values, so the gradient is that of the minimizing term.
pub fn loss_on_tape(
    tape: &mut Tape,
    log_probs: Var,
    gt: &[usize],
    classes: &[Vec<usize>],
    cap: usize,
) -> Result<(Var, Vec<usize>), TensorError> {
    let (_, sigma) = min_relabeling(tape.value(log_probs), gt, classes, cap);
    let cols: Vec<usize> = gt.iter().map(|&g| sigma[g]).collect();
    let picked = tape.pick(log_probs, &cols)?;
    let s = tape.sum(picked);
    Ok((tape.scale(s, -1.0 / gt.len().max(1) as f64), sigma))
}
