use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{cost_between, GmmMeasure, SupportPattern};
use crate::error::{Error, Result};
use crate::ot::{dual_objective, solve_transport, CostMatrix, DualSolution, TransportPlan};

/// Largest `I` or `J` accepted by the exhaustive subset-sum check.
pub const SUBSET_SUM_CAP: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MwResult {
    pub value: f64,
    pub plan: TransportPlan<f64>,
    pub dual: DualSolution<f64>,
    pub duality_gap: f64,
}

/// Exact transport between mode locations with squared-Euclidean cost.
pub fn mixture_wasserstein(a: &GmmMeasure, b: &GmmMeasure) -> Result<MwResult> {
    a.validate()?;
    b.validate()?;
    let cost = cost_between(a.modes.view(), b.modes.view())?;
    let (plan, dual) = solve_transport(&cost, &a.weights, &b.weights)?;
    Ok(MwResult {
        value: plan.objective,
        duality_gap: (plan.objective - dual.objective).abs(),
        plan,
        dual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSumReport {
    pub holds: bool,
    /// Index sets of the first coinciding pair of proper subsets.
    pub violation: Option<(Vec<usize>, Vec<usize>)>,
    /// Smallest gap between any proper subset sum of `p` and of `q`.
    pub min_gap: f64,
}

fn proper_subset_sums(w: &[f64]) -> Vec<(f64, u32)> {
    let n = w.len();
    let full = (1u32 << n) - 1;
    let mut sums = vec![0.0; 1usize << n];
    for mask in 1..=full {
        let low = mask.trailing_zeros() as usize;
        sums[mask as usize] = sums[(mask & (mask - 1)) as usize] + w[low];
    }
    (1..full).map(|m| (sums[m as usize], m)).collect()
}

fn mask_indices(mask: u32) -> Vec<usize> {
    (0..32).filter(|b| mask & (1 << b) != 0).collect()
}

/// True when no proper nonempty subset of `p` sums to that of a proper
/// nonempty subset of `q` within `tol`. Enumerates all subset sums.
pub fn check_subset_sum(p: &[f64], q: &[f64], tol: f64) -> Result<SubsetSumReport> {
    for (name, w) in [("I", p), ("J", q)] {
        if w.is_empty() {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if w.len() > SUBSET_SUM_CAP {
            return Err(Error::CapExceeded {
                what: if name == "I" { "I" } else { "J" },
                value: w.len(),
                cap: SUBSET_SUM_CAP,
                hint: "the subset-sum check enumerates every subset",
            });
        }
    }
    let ps = proper_subset_sums(p);
    let mut qs = proper_subset_sums(q);
    qs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut min_gap = f64::INFINITY;
    let mut violation = None;
    for &(s, pm) in &ps {
        let k = qs.partition_point(|x| x.0 < s);
        for cand in [k.checked_sub(1), Some(k)].into_iter().flatten() {
            if let Some(&(t, qm)) = qs.get(cand) {
                let gap = (s - t).abs();
                if gap < min_gap {
                    min_gap = gap;
                }
                if gap <= tol && violation.is_none() {
                    violation = Some((mask_indices(pm), mask_indices(qm)));
                }
            }
        }
    }
    Ok(SubsetSumReport {
        holds: violation.is_none(),
        violation,
        min_gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSupport {
    pub pattern: SupportPattern,
    /// Completed tail `z_{I+j} = min_i [c_ij − z_i / p_i]`.
    pub z_tail: Vec<f64>,
    /// The same completion with `max` in place of `min`.
    pub max_rule_tail: Vec<f64>,
    /// Columns where the two completions differ beyond the tolerance.
    pub rule_disagreements: Vec<usize>,
    /// Rows with no tight constraint; non-empty means `z_head` is
    /// inconsistent with any optimal plan.
    pub untight_rows: Vec<usize>,
}

impl DualSupport {
    pub fn consistent(&self) -> bool {
        self.untight_rows.is_empty()
    }
}

/// Completes a partial dual `z_head` and marks tight constraints.
///
/// A cell is tight when its slack is at most `tol · (1 + max c)`.
pub fn support_from_dual(
    theta: ArrayView2<f64>,
    gamma: ArrayView2<f64>,
    p: &[f64],
    z_head: &[f64],
    tol: f64,
) -> Result<DualSupport> {
    let ni = theta.nrows();
    if p.len() != ni || z_head.len() != ni {
        return Err(Error::shape(format!(
            "{ni} modes but p has {} entries and z_head {}",
            p.len(),
            z_head.len()
        )));
    }
    if let Some(i) = p.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::invalid(format!(
            "mode {i} has weight {}; the dual completion divides by p_i",
            p[i]
        )));
    }
    let cost = cost_between(theta, gamma)?;
    let c = &cost.entries;
    let nj = gamma.nrows();
    let cmax = c.iter().copied().fold(0.0f64, f64::max);
    let thr = tol * (1.0 + cmax);
    let reduced = |i: usize, j: usize| c[[i, j]] - z_head[i] / p[i];
    let mut z_tail = vec![0.0; nj];
    let mut max_rule_tail = vec![0.0; nj];
    let mut rule_disagreements = Vec::new();
    for j in 0..nj {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..ni {
            let r = reduced(i, j);
            lo = lo.min(r);
            hi = hi.max(r);
        }
        z_tail[j] = lo;
        max_rule_tail[j] = hi;
        if hi - lo > thr {
            rule_disagreements.push(j);
        }
    }
    let mask = Array2::from_shape_fn((ni, nj), |(i, j)| reduced(i, j) - z_tail[j] <= thr);
    let untight_rows = (0..ni).filter(|&i| !mask.row(i).iter().any(|&b| b)).collect();
    Ok(DualSupport {
        pattern: SupportPattern { mask },
        z_tail,
        max_rule_tail,
        rule_disagreements,
        untight_rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplementaryDual {
    pub dual: DualSolution<f64>,
    /// Smallest slack over cells outside the plan's support. Positive means
    /// the tight set equals the support exactly.
    pub min_slack: f64,
}

/// An optimal dual whose tight set is exactly the support of `plan`,
/// chosen to maximize the smallest off-support slack.
///
/// On a spanning-tree support the dual is already unique (up to the
/// anchor). On a forest each component carries a free shift; the shifts
/// solve a system of difference constraints whose best margin is the
/// minimum mean cycle of the component graph.
pub fn strictly_complementary_dual(
    cost: &CostMatrix<f64>,
    plan: &TransportPlan<f64>,
) -> Result<ComplementaryDual> {
    cost.validate()?;
    let (ni, nj) = cost.dim();
    if plan.v.dim() != (ni, nj) {
        return Err(Error::shape("plan and cost dimensions differ"));
    }
    let c = &cost.entries;
    let support = plan.support();
    let nodes = ni + nj;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    for i in 0..ni {
        for j in 0..nj {
            if support[[i, j]] {
                adj[i].push(ni + j);
                adj[ni + j].push(i);
            }
        }
    }
    // Potentials inside each component, anchored at its first node.
    let mut comp = vec![usize::MAX; nodes];
    let mut pot = vec![0.0f64; nodes];
    let mut n_comp = 0;
    let mut queue = VecDeque::new();
    for start in 0..nodes {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = n_comp;
        queue.push_back(start);
        while let Some(a) = queue.pop_front() {
            for &b in &adj[a] {
                if comp[b] == usize::MAX {
                    comp[b] = n_comp;
                    let (i, j) = if a < ni { (a, b - ni) } else { (b, a - ni) };
                    // u_i + w_j = c_ij
                    pot[b] = c[[i, j]] - pot[a];
                    queue.push_back(b);
                }
            }
        }
        n_comp += 1;
    }
    // Off-support slack with shifts s: base − s_a + s_b, a = comp(i), b = comp(j).
    let mut intra = f64::INFINITY;
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    let mut best: Vec<Vec<f64>> = vec![vec![f64::INFINITY; n_comp]; n_comp];
    for i in 0..ni {
        for j in 0..nj {
            if support[[i, j]] {
                continue;
            }
            let base = c[[i, j]] - pot[i] - pot[ni + j];
            let (a, b) = (comp[i], comp[ni + j]);
            if a == b {
                intra = intra.min(base);
            } else if base < best[b][a] {
                // s_a − s_b ≤ base − δ : edge b → a
                best[b][a] = base;
            }
        }
    }
    for (b, row) in best.iter().enumerate() {
        for (a, &w) in row.iter().enumerate() {
            if w.is_finite() {
                edges.push((b, a, w));
            }
        }
    }
    let cycle = min_mean_cycle(n_comp, &edges);
    let cmax = c.iter().copied().fold(0.0f64, f64::max);
    let delta = match (cycle, intra.is_finite()) {
        (Some(m), _) => m.min(intra),
        (None, true) => intra,
        (None, false) => 1.0 + cmax,
    };
    let delta = delta - 1e-12 * (1.0 + cmax);
    let shift = bellman_ford(n_comp, &edges, delta.max(0.0));

    let mut u: Vec<f64> = (0..ni).map(|i| pot[i] + shift[comp[i]]).collect();
    let mut w: Vec<f64> = (0..nj).map(|j| pot[ni + j] - shift[comp[ni + j]]).collect();
    let anchor = u[0];
    u.iter_mut().for_each(|x| *x -= anchor);
    w.iter_mut().for_each(|x| *x += anchor);
    let mut min_slack = f64::INFINITY;
    for i in 0..ni {
        for j in 0..nj {
            if !support[[i, j]] {
                min_slack = min_slack.min(c[[i, j]] - u[i] - w[j]);
            }
        }
    }
    let dual = DualSolution::from_potentials(&u, &w, &plan.p, &plan.q);
    Ok(ComplementaryDual { dual, min_slack })
}

/// Karp's minimum mean cycle; `None` when the graph is acyclic.
fn min_mean_cycle(n: usize, edges: &[(usize, usize, f64)]) -> Option<f64> {
    if n == 0 || edges.is_empty() {
        return None;
    }
    // d[k][v]: minimum weight of a k-edge walk ending at v from a virtual source.
    let mut d = vec![vec![f64::INFINITY; n]; n + 1];
    d[0].iter_mut().for_each(|x| *x = 0.0);
    for k in 1..=n {
        for &(a, b, w) in edges {
            let cand = d[k - 1][a] + w;
            if cand < d[k][b] {
                d[k][b] = cand;
            }
        }
    }
    let mut best: Option<f64> = None;
    for v in 0..n {
        if !d[n][v].is_finite() {
            continue;
        }
        let mut worst = f64::NEG_INFINITY;
        for k in 0..n {
            if d[k][v].is_finite() {
                worst = worst.max((d[n][v] - d[k][v]) / (n - k) as f64);
            }
        }
        if worst.is_finite() {
            best = Some(best.map_or(worst, |b: f64| b.min(worst)));
        }
    }
    best
}

/// Feasible potentials for `s_a − s_b ≤ w − delta` on edges `b → a`.
fn bellman_ford(n: usize, edges: &[(usize, usize, f64)], delta: f64) -> Vec<f64> {
    let mut s = vec![0.0; n];
    for _ in 0..n {
        let mut changed = false;
        for &(b, a, w) in edges {
            let cand = s[b] + w - delta;
            if cand < s[a] {
                s[a] = cand;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    s
}

/// Dual objective after completing the tail with the min rule.
pub fn reduced_dual_objective(
    theta: ArrayView2<f64>,
    gamma: ArrayView2<f64>,
    p: &[f64],
    q: &[f64],
    z_head: &[f64],
) -> Result<f64> {
    let ds = support_from_dual(theta, gamma, p, z_head, 0.0)?;
    if q.len() != ds.z_tail.len() {
        return Err(Error::shape("q length differs from the number of target modes"));
    }
    let mut z = z_head.to_vec();
    z.extend_from_slice(&ds.z_tail);
    Ok(dual_objective(&z, q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllPosedReport {
    /// Coefficient of `z_1` after substituting the completed tail.
    pub z1_coefficient: f64,
    pub grid: Vec<f64>,
    pub objective: Vec<f64>,
    /// `max − min` of the objective over the grid.
    pub objective_range: f64,
}

/// With a single base mode the completed dual objective is
/// `z_1 (1 − Σ q_j) + Σ q_j c_1j`, so `z_1` drops out.
pub fn demonstrate_i1_illposed(
    theta1: &[f64],
    gamma: ArrayView2<f64>,
    q: &[f64],
) -> Result<IllPosedReport> {
    if theta1.len() != gamma.ncols() {
        return Err(Error::shape(format!(
            "theta has dimension {} but gamma has {}",
            theta1.len(),
            gamma.ncols()
        )));
    }
    let target = GmmMeasure::new(gamma.to_owned(), q.to_vec())?;
    let theta = Array2::from_shape_vec((1, theta1.len()), theta1.to_vec())
        .map_err(|e| Error::shape(e.to_string()))?;
    let z1_coefficient = 1.0 - q.iter().sum::<f64>();
    let grid: Vec<f64> = (-10..=10).map(f64::from).collect();
    let objective = grid
        .iter()
        .map(|&z1| reduced_dual_objective(theta.view(), target.modes.view(), &[1.0], q, &[z1]))
        .collect::<Result<Vec<_>>>()?;
    let lo = objective.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = objective.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(IllPosedReport {
        z1_coefficient,
        grid,
        objective,
        objective_range: hi - lo,
    })
}
