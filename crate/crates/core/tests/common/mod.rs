//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};

/// Central finite differences of `f` at `x`.
pub fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = xs[k];
            xs[k] = orig + h;
            let up = f(&xs);
            xs[k] = orig - h;
            let down = f(&xs);
            xs[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Every permutation of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, a, out);
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

pub fn sq_cost(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        sq_dist(a.row(i).as_slice().unwrap(), b.row(j).as_slice().unwrap())
    })
}

/// Minimum of `Σ c_ij π_ij` over couplings with marginals `p`, `q`, by a
/// dense two-phase tableau simplex with Bland's rule. Returns the optimal
/// value and coupling.
pub fn dense_transport_lp(c: &Array2<f64>, p: &[f64], q: &[f64]) -> (f64, Array2<f64>) {
    let (ni, nj) = c.dim();
    let nv = ni * nj;
    // Equality rows: i-th row sum, then j-th column sum for j < nj - 1
    // (the last column constraint is implied).
    let m = ni + nj - 1;
    let mut a = vec![vec![0.0; nv]; m];
    let mut b = vec![0.0; m];
    for i in 0..ni {
        for j in 0..nj {
            a[i][i * nj + j] = 1.0;
        }
        b[i] = p[i];
    }
    for j in 0..nj - 1 {
        for i in 0..ni {
            a[ni + j][i * nj + j] = 1.0;
        }
        b[ni + j] = q[j];
    }
    let cost: Vec<f64> = c.iter().copied().collect();
    let x = simplex_eq(&a, &b, &cost);
    let value = x.iter().zip(&cost).map(|(x, c)| x * c).sum();
    (value, Array2::from_shape_vec((ni, nj), x).unwrap())
}

/// `min c·x` s.t. `A x = b`, `x ≥ 0`, with `b ≥ 0`; phase one adds one
/// artificial per row.
pub fn simplex_eq(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Vec<f64> {
    let m = a.len();
    let n = c.len();
    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m + 1];
    let mut basis: Vec<usize> = (n..n + m).collect();
    for r in 0..m {
        t[r][..n].copy_from_slice(&a[r]);
        t[r][n + r] = 1.0;
        t[r][width - 1] = b[r];
    }
    let eps = 1e-12;
    let pivot = |t: &mut Vec<Vec<f64>>, basis: &mut Vec<usize>, r: usize, col: usize| {
        let pv = t[r][col];
        for v in t[r].iter_mut() {
            *v /= pv;
        }
        let row = t[r].clone();
        for (k, tr) in t.iter_mut().enumerate() {
            if k != r && tr[col].abs() > 0.0 {
                let f = tr[col];
                for (x, y) in tr.iter_mut().zip(&row) {
                    *x -= f * y;
                }
            }
        }
        basis[r] = col;
    };
    let run = |t: &mut Vec<Vec<f64>>, basis: &mut Vec<usize>, obj: &[f64], allowed: usize| {
        loop {
            // Reduced costs from the current basis.
            let mut reduced = obj[..allowed].to_vec();
            for (r, &bv) in basis.iter().enumerate() {
                let cb = obj[bv];
                if cb != 0.0 {
                    for (k, rc) in reduced.iter_mut().enumerate() {
                        *rc -= cb * t[r][k];
                    }
                }
            }
            let Some(col) = (0..allowed).find(|&k| reduced[k] < -1e-11 && !basis.contains(&k)) else {
                return;
            };
            let mut best: Option<(f64, usize, usize)> = None;
            for r in 0..basis.len() {
                if t[r][col] > eps {
                    let ratio = t[r][width - 1] / t[r][col];
                    let cand = (ratio, basis[r], r);
                    if best.is_none_or(|b| ratio < b.0 - 1e-14 || ((ratio - b.0).abs() <= 1e-14 && cand.1 < b.1)) {
                        best = Some(cand);
                    }
                }
            }
            let (_, _, r) = best.expect("transportation LP is bounded");
            pivot(t, basis, r, col);
        }
    };
    let mut phase1 = vec![0.0; n + m];
    for v in phase1.iter_mut().skip(n) {
        *v = 1.0;
    }
    run(&mut t, &mut basis, &phase1, n + m);
    // Drive remaining artificials out of the basis where possible.
    for r in 0..m {
        if basis[r] >= n {
            if let Some(col) = (0..n).find(|&k| t[r][k].abs() > 1e-9) {
                pivot(&mut t, &mut basis, r, col);
            }
        }
    }
    let mut obj = c.to_vec();
    obj.extend(std::iter::repeat_n(0.0, m));
    run(&mut t, &mut basis, &obj, n);
    let mut x = vec![0.0; n];
    for (r, &bv) in basis.iter().enumerate() {
        if bv < n {
            x[bv] = t[r][width - 1].max(0.0);
        }
    }
    x
}

/// Minimum transport cost over basic feasible solutions found by
/// enumerating every set of `I + J − 1` cells forming a spanning tree of
/// the bipartite graph. Only for tiny instances.
pub fn vertex_enumeration(c: &Array2<f64>, p: &[f64], q: &[f64]) -> f64 {
    let (ni, nj) = c.dim();
    let cells: Vec<(usize, usize)> = (0..ni).flat_map(|i| (0..nj).map(move |j| (i, j))).collect();
    let k = ni + nj - 1;
    let mut best = f64::INFINITY;
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let chosen: Vec<(usize, usize)> = idx.iter().map(|&s| cells[s]).collect();
        if let Some(x) = tree_solution(&chosen, ni, nj, p, q) {
            if x.iter().all(|&v| v >= -1e-12) {
                let v: f64 = chosen.iter().zip(&x).map(|(&(i, j), x)| c[[i, j]] * x).sum();
                best = best.min(v);
            }
        }
        // Next combination.
        let mut pos = k;
        while pos > 0 && idx[pos - 1] == cells.len() - k + pos - 1 {
            pos -= 1;
        }
        if pos == 0 {
            break;
        }
        idx[pos - 1] += 1;
        for t in pos..k {
            idx[t] = idx[t - 1] + 1;
        }
    }
    best
}

/// Flows on a spanning tree by repeatedly peeling leaves; `None` when the
/// cells do not form a spanning tree.
fn tree_solution(cells: &[(usize, usize)], ni: usize, nj: usize, p: &[f64], q: &[f64]) -> Option<Vec<f64>> {
    let mut supply: Vec<f64> = p.iter().chain(q).copied().collect();
    let mut alive = vec![true; cells.len()];
    let mut x = vec![0.0; cells.len()];
    let node = |c: (usize, usize)| (c.0, ni + c.1);
    for _ in 0..cells.len() {
        let mut deg = vec![0usize; ni + nj];
        for (k, &c) in cells.iter().enumerate() {
            if alive[k] {
                let (a, b) = node(c);
                deg[a] += 1;
                deg[b] += 1;
            }
        }
        let (k, leaf) = cells.iter().enumerate().filter(|(k, _)| alive[*k]).find_map(|(k, &c)| {
            let (a, b) = node(c);
            if deg[a] == 1 {
                Some((k, a))
            } else if deg[b] == 1 {
                Some((k, b))
            } else {
                None
            }
        })?;
        let (a, b) = node(cells[k]);
        let other = if leaf == a { b } else { a };
        x[k] = supply[leaf];
        supply[other] -= supply[leaf];
        supply[leaf] = 0.0;
        alive[k] = false;
    }
    if supply.iter().any(|s| s.abs() > 1e-9) {
        return None;
    }
    Some(x)
}

/// Exhaustive minimum of `Σ_j q_j ‖Γ_j − Θ_{a(j)}‖²` over all assignments
/// `a` of atoms to at most `n_modes` groups, with each `Θ_i` the weighted
/// barycenter of its group.
pub fn exhaustive_hard_projection(gamma: ArrayView2<f64>, q: &[f64], n_modes: usize) -> f64 {
    let (nj, d) = gamma.dim();
    let mut a = vec![0usize; nj];
    let mut best = f64::INFINITY;
    loop {
        let mut mass = vec![0.0; n_modes];
        let mut sum = vec![vec![0.0; d]; n_modes];
        for j in 0..nj {
            mass[a[j]] += q[j];
            for k in 0..d {
                sum[a[j]][k] += q[j] * gamma[[j, k]];
            }
        }
        let mut cost = 0.0;
        for j in 0..nj {
            let g = a[j];
            if mass[g] > 0.0 {
                for k in 0..d {
                    cost += q[j] * (gamma[[j, k]] - sum[g][k] / mass[g]).powi(2);
                }
            }
        }
        best = best.min(cost);
        let mut pos = 0;
        while pos < nj {
            a[pos] += 1;
            if a[pos] < n_modes {
                break;
            }
            a[pos] = 0;
            pos += 1;
        }
        if pos == nj {
            return best;
        }
    }
}

/// Straight-line MLP forward pass: hidden layers use `act`, the last layer
/// is affine.
pub fn mlp_forward_reference(weights: &[Array2<f64>], biases: &[Vec<f64>], act: fn(f64) -> f64, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (l, (w, b)) in weights.iter().zip(biases).enumerate() {
        let mut out = vec![0.0; w.nrows()];
        for r in 0..w.nrows() {
            let mut s = b[r];
            for c in 0..w.ncols() {
                s += w[[r, c]] * h[c];
            }
            out[r] = if l + 1 < weights.len() { act(s) } else { s };
        }
        h = out;
    }
    h
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}
