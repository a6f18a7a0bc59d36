//! Transportation simplex in coupling variables.
//!
//! The basis is a spanning tree of the bipartite row/column graph with
//! exactly `I + J − 1` cells (zero-valued cells are kept when the problem is
//! degenerate). Entering cells are priced by Dantzig's rule, switching to
//! Bland's smallest-index rule after a run of degenerate pivots so the
//! method cannot cycle.

use std::collections::VecDeque;

use ndarray::Array2;

use super::{check_simplex, CostMatrix, DualSolution, TransportPlan};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    /// Pivot budget; `None` scales with the problem size.
    pub max_pivots: Option<usize>,
    /// Consecutive degenerate pivots before switching to Bland's rule.
    pub bland_after: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_pivots: None,
            bland_after: 32,
        }
    }
}

/// Optimal coupling, basis and potentials (`u_i + w_j = c_ij` on the basis).
#[derive(Debug, Clone)]
pub(crate) struct SimplexSolution<T> {
    pub pi: Array2<T>,
    pub u: Vec<T>,
    pub w: Vec<T>,
    pub basis: Vec<(usize, usize)>,
}

/// Exact optimal plan and scaled dual between weights `p` (rows) and `q`
/// (columns).
pub fn solve_transport<T: Scalar>(
    cost: &CostMatrix<T>,
    p: &[T],
    q: &[T],
) -> Result<(TransportPlan<T>, DualSolution<T>)> {
    solve_transport_with(cost, p, q, SimplexOptions::default())
}

pub fn solve_transport_with<T: Scalar>(
    cost: &CostMatrix<T>,
    p: &[T],
    q: &[T],
    opts: SimplexOptions,
) -> Result<(TransportPlan<T>, DualSolution<T>)> {
    let sol = simplex(cost, p, q, opts)?;
    Ok(finish(cost, p, q, &sol))
}

pub(crate) fn finish<T: Scalar>(
    cost: &CostMatrix<T>,
    p: &[T],
    q: &[T],
    sol: &SimplexSolution<T>,
) -> (TransportPlan<T>, DualSolution<T>) {
    let (m, n) = cost.dim();
    let mut v = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            v[[i, j]] = if p[i] > T::zero() {
                sol.pi[[i, j]] / p[i]
            } else {
                q[j]
            };
        }
    }
    let objective = cost
        .entries
        .iter()
        .zip(sol.pi.iter())
        .map(|(&c, &x)| c * x)
        .sum();
    let pmax = p.iter().copied().fold(T::zero(), T::max);
    let thr = T::lit(1e-10) * pmax;
    let degenerate = sol.basis.iter().any(|&(i, j)| !(sol.pi[[i, j]] > thr));
    let plan = TransportPlan {
        v,
        p: p.to_vec(),
        q: q.to_vec(),
        objective,
        degenerate,
    };
    let dual = DualSolution::from_potentials(&sol.u, &sol.w, p, q);
    (plan, dual)
}

pub(crate) fn simplex<T: Scalar>(
    cost: &CostMatrix<T>,
    p: &[T],
    q: &[T],
    opts: SimplexOptions,
) -> Result<SimplexSolution<T>> {
    cost.validate()?;
    let (m, n) = cost.dim();
    if p.len() != m || q.len() != n {
        return Err(Error::shape(format!(
            "cost is {m}x{n} but marginals have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    let c = &cost.entries;
    let cmax = c.iter().copied().fold(T::zero(), T::max);
    let tol = T::epsilon() * T::lit(1e4) * (T::one() + cmax);

    let mut st = State::northwest(p, q);
    let max_pivots = opts
        .max_pivots
        .unwrap_or_else(|| 1000 + 50 * (m + n) * (m + n).max(m * n / (m + n).max(1)));
    let block = if m * n <= 4096 {
        m * n
    } else {
        ((m * n) as f64).sqrt().ceil() as usize * 4
    };
    let mut cursor = 0usize;
    let mut degenerate_run = 0usize;
    let mut pivots = 0usize;
    let (mut u, mut w) = (vec![T::zero(); m], vec![T::zero(); n]);

    loop {
        st.potentials(c, &mut u, &mut w);
        let bland = degenerate_run >= opts.bland_after;
        let entering = if bland {
            st.price_bland(c, &u, &w, tol)
        } else {
            st.price_block(c, &u, &w, tol, block, &mut cursor)
        };
        let Some((ei, ej)) = entering else { break };
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::CapExceeded {
                what: "simplex pivots",
                value: pivots,
                cap: max_pivots,
                hint: "the cost matrix may be badly scaled",
            });
        }
        let theta = st.pivot(ei, ej, bland);
        if theta > T::zero() {
            degenerate_run = 0;
        } else {
            degenerate_run += 1;
        }
    }

    let mut pi = Array2::zeros((m, n));
    for (k, &(i, j)) in st.cells.iter().enumerate() {
        pi[[i, j]] = st.flow[k].max(T::zero());
    }
    Ok(SimplexSolution {
        pi,
        u,
        w,
        basis: st.cells,
    })
}

const NO_CELL: usize = usize::MAX;

struct State<T> {
    m: usize,
    n: usize,
    cells: Vec<(usize, usize)>,
    flow: Vec<T>,
    /// Basis slot of each cell, `NO_CELL` when nonbasic.
    slot: Vec<usize>,
    adj: Vec<Vec<(usize, usize)>>,
    parent: Vec<(usize, usize)>,
    seen: Vec<bool>,
    queue: VecDeque<usize>,
}

impl<T: Scalar> State<T> {
    /// Northwest-corner start keeping exactly `m + n − 1` basic cells.
    fn northwest(p: &[T], q: &[T]) -> Self {
        let (m, n) = (p.len(), q.len());
        let mut a = p.to_vec();
        let mut b = q.to_vec();
        let mut cells = Vec::with_capacity(m + n - 1);
        let mut flow = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = a[i].min(b[j]).max(T::zero());
            cells.push((i, j));
            flow.push(x);
            a[i] -= x;
            b[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if j == n - 1 || (i < m - 1 && a[i] <= b[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        let mut slot = vec![NO_CELL; m * n];
        for (k, &(i, j)) in cells.iter().enumerate() {
            slot[i * n + j] = k;
        }
        let mut st = Self {
            m,
            n,
            cells,
            flow,
            slot,
            adj: vec![Vec::new(); m + n],
            parent: vec![(NO_CELL, NO_CELL); m + n],
            seen: vec![false; m + n],
            queue: VecDeque::with_capacity(m + n),
        };
        st.rebuild_adjacency();
        st
    }

    fn rebuild_adjacency(&mut self) {
        for a in self.adj.iter_mut() {
            a.clear();
        }
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            self.adj[i].push((self.m + j, k));
            self.adj[self.m + j].push((i, k));
        }
    }

    /// Solves `u_i + w_j = c_ij` on the basis tree with `u_0 = 0`.
    fn potentials(&mut self, c: &Array2<T>, u: &mut [T], w: &mut [T]) {
        self.seen.iter_mut().for_each(|s| *s = false);
        self.queue.clear();
        self.queue.push_back(0);
        self.seen[0] = true;
        u[0] = T::zero();
        while let Some(node) = self.queue.pop_front() {
            for &(next, k) in &self.adj[node] {
                if self.seen[next] {
                    continue;
                }
                self.seen[next] = true;
                let (i, j) = self.cells[k];
                if next >= self.m {
                    w[j] = c[[i, j]] - u[i];
                } else {
                    u[i] = c[[i, j]] - w[j];
                }
                self.queue.push_back(next);
            }
        }
    }

    fn price_block(
        &self,
        c: &Array2<T>,
        u: &[T],
        w: &[T],
        tol: T,
        block: usize,
        cursor: &mut usize,
    ) -> Option<(usize, usize)> {
        let total = self.m * self.n;
        let mut best: Option<(usize, T)> = None;
        let mut scanned = 0;
        while scanned < total {
            let end = (scanned + block).min(total);
            for s in scanned..end {
                let idx = (*cursor + s) % total;
                if self.slot[idx] != NO_CELL {
                    continue;
                }
                let (i, j) = (idx / self.n, idx % self.n);
                let r = c[[i, j]] - u[i] - w[j];
                if r < -tol && best.is_none_or(|(_, b)| r < b) {
                    best = Some((idx, r));
                }
            }
            scanned = end;
            if let Some((idx, _)) = best {
                *cursor = (idx + 1) % total;
                return Some((idx / self.n, idx % self.n));
            }
        }
        None
    }

    fn price_bland(&self, c: &Array2<T>, u: &[T], w: &[T], tol: T) -> Option<(usize, usize)> {
        for i in 0..self.m {
            for j in 0..self.n {
                if self.slot[i * self.n + j] == NO_CELL && c[[i, j]] - u[i] - w[j] < -tol {
                    return Some((i, j));
                }
            }
        }
        None
    }

    /// Brings `(ei, ej)` into the basis; returns the step length.
    fn pivot(&mut self, ei: usize, ej: usize, bland: bool) -> T {
        // Tree path from column node back to row node `ei`.
        self.seen.iter_mut().for_each(|s| *s = false);
        self.queue.clear();
        self.queue.push_back(ei);
        self.seen[ei] = true;
        let target = self.m + ej;
        while let Some(node) = self.queue.pop_front() {
            if node == target {
                break;
            }
            for &(next, k) in &self.adj[node] {
                if !self.seen[next] {
                    self.seen[next] = true;
                    self.parent[next] = (node, k);
                    self.queue.push_back(next);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = target;
        while node != ei {
            let (prev, k) = self.parent[node];
            path.push(k);
            node = prev;
        }

        // Cells at even positions of `path` lose mass.
        let mut theta = T::infinity();
        let mut leave = NO_CELL;
        for &k in path.iter().step_by(2) {
            let f = self.flow[k];
            let better = f < theta
                || (f == theta && bland && {
                    let (a, b) = self.cells[k];
                    let (c, d) = self.cells[leave];
                    (a, b) < (c, d)
                });
            if better {
                theta = f;
                leave = k;
            }
        }
        let theta = theta.max(T::zero());
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                self.flow[k] -= theta;
            } else {
                self.flow[k] += theta;
            }
        }
        let (li, lj) = self.cells[leave];
        self.slot[li * self.n + lj] = NO_CELL;
        self.cells[leave] = (ei, ej);
        self.flow[leave] = theta;
        self.slot[ei * self.n + ej] = leave;
        self.rebuild_adjacency();
        theta
    }
}
