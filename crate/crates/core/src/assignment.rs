//! Exact linear assignment (Hungarian method) and permutation enumeration.

/// Minimum-cost perfect matching of an `n × n` cost matrix (row-major).
///
/// Returns `assign` with row `i` matched to column `assign[i]`. Runs the
/// shortest-augmenting-path form with dual potentials, O(n³).
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n × n");
    assert!(cost.iter().all(|c| c.is_finite()), "cost entries must be finite");
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[row_of[j] - 1] = j - 1;
    }
    assign
}

/// Sum of `cost[i][assign[i]]` in row order.
pub fn assignment_cost(cost: &[f64], n: usize, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
}

/// All permutations of `0..n` in lexicographic order, identity first.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else { break };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("pivot exists");
        p.swap(i - 1, j);
        p[i..].reverse();
    }
    out
}

/// Like [`hungarian`] but by exhaustive search; first minimum in
/// lexicographic order wins.
pub fn brute_force_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in permutations(n) {
        let c = assignment_cost(cost, n, &p);
        if best.as_ref().map_or(true, |(b, _)| c < *b) {
            best = Some((c, p));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}
